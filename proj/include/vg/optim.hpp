#pragma once

#include <cmath>
#include <vector>

#include "vg/tensor.hpp"

namespace vg {

enum class OptimizerKind { Sgd, Adam };

// Adam with the standard decay constants. Masked-out parameters are left
// untouched, including their moment buffers.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
              double eps = 1e-8)
        : kind_(kind), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_learning_rate(double lr) { lr_ = lr; }

    void step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
              const std::vector<bool>* update_mask = nullptr) {
        if (params.size() != grads.size()) throw ShapeError("optimizer: params/grads size mismatch");
        if (kind_ == OptimizerKind::Adam && m_.empty()) {
            for (Tensor* p : params) {
                m_.push_back(Tensor::zeros(p->shape()));
                v_.push_back(Tensor::zeros(p->shape()));
            }
        }
        ++step_count_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (update_mask && !(*update_mask)[i]) continue;
            Tensor& p = *params[i];
            const Tensor& g = grads[i];
            if (!p.same_shape(g)) throw ShapeError("optimizer: gradient shape mismatch");
            if (kind_ == OptimizerKind::Sgd) {
                for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr_ * g[j];
            } else {
                Tensor& m = m_[i];
                Tensor& v = v_[i];
                for (std::size_t j = 0; j < p.size(); ++j) {
                    m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                    v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                    p[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
                }
            }
            p.require_finite("optimizer step");
        }
    }

private:
    OptimizerKind kind_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t step_count_ = 0;
    std::vector<Tensor> m_, v_;
};

inline double global_grad_norm(const std::vector<Tensor>& grads) {
    double s = 0.0;
    for (const Tensor& g : grads)
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * g[i];
    return std::sqrt(s);
}

inline void clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    if (max_norm <= 0) return;
    const double n = global_grad_norm(grads);
    if (n <= max_norm) return;
    const double f = max_norm / n;
    for (Tensor& g : grads)
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= f;
}

}  // namespace vg
