#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "vg/tensor.hpp"

namespace vg {

// Reverse-mode gradient tape. Ops execute eagerly (values are available
// immediately) and record their pullbacks; backward() replays them in
// reverse creation order, accumulating (summing) into parent gradients so
// shared subexpressions follow the chain rule.
//
// A tape is confined to one thread. With grad_enabled(false) the same op set
// doubles as a plain forward evaluator.
class Tape {
public:
    struct Var {
        std::int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(128); }

    bool grad_enabled() const { return grad_enabled_; }

    Var leaf(Tensor v);            // tracked input (parameter / attack noise / ...)
    Var constant(Tensor v);        // untracked input (data, frozen noise)
    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

    // ---- elementwise / structural ----
    Var add(Var a, Var b);
    Var add_bias(Var a, Var bias);  // bias broadcast over the leading dim
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var exp(Var a);
    Var log(Var a);
    Var sigmoid(Var a);
    Var softplus(Var a);
    Var relu(Var a);
    Var square(Var a);
    Var clamp(Var a, double lo, double hi);
    // out = mask (.) a + (1-mask) (.) b; mask is data, not differentiated
    Var select(const Tensor& mask, Var a, Var b);

    Var matmul(Var a, Var b);
    Var concat_cols(Var a, Var b);
    Var slice_cols(Var a, std::size_t c0, std::size_t c1);

    // ---- reductions ----
    Var sum(Var a);      // -> [1]
    Var mean(Var a);     // -> [1]
    Var row_sum(Var a);  // [B x D] -> [B]

    // ---- grouped ops over contiguous groups of size K in the trailing dim ----
    Var group_log_softmax(Var a, std::size_t k);
    Var group_logsumexp(Var a, std::size_t k);  // [B, D*K] -> [B, D]

    // ---- fused likelihood / divergence rows ----
    Var bernoulli_log_prob_rows(Var logits, const Tensor& x);                      // -> [B]
    Var gaussian_log_prob_rows(Var mean, const Tensor& x, double sigma);           // -> [B]
    Var kl_std_normal_rows(Var mu, Var logvar);                                    // -> [B]
    Var kl_to_const_gaussian_rows(Var mu, Var logvar, const Tensor& mu2, const Tensor& logvar2);
    Var kl_from_const_gaussian_rows(const Tensor& mu2, const Tensor& logvar2, Var mu, Var logvar);

    // Runs the pullbacks for a scalar loss. A tape can be consumed once.
    void backward(Var loss);

    // Gradient of a variable after backward(); zeros if the loss never
    // reached it.
    Tensor gradient(Var v) const;

private:
    struct Node {
        Tensor value;
        bool needs_grad = false;
        std::function<void(Tape&)> pullback;  // empty for leaves/constants
    };

    Var push(Tensor value, bool needs_grad, std::function<void(Tape&)> pullback);
    bool needs(Var v) const { return grad_enabled_ && nodes_[v.id].needs_grad; }
    Tensor& grad_buf(Var v);
    void add_to_grad(Var v, const Tensor& g);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;  // parallel to nodes_, sized during backward
    bool grad_enabled_ = true;
    bool consumed_ = false;
};

// Max over coordinates of |analytic - central difference| / (|analytic| +
// |central| + 1e-12) for a scalar objective built from a vector of leaves.
double finite_difference_check(
    const std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>& build_loss,
    const std::vector<Tensor>& params, double h);

double finite_difference_check(
    const std::function<Tape::Var(Tape&, Tape::Var)>& build_loss,
    const Tensor& params, double h);

}  // namespace vg
