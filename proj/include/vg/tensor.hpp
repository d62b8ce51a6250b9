#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

#include "vg/common.hpp"
#include "vg/rng.hpp"

namespace vg {

// Dense row-major tensor of doubles. Values are immutable once shared; all
// mutating helpers are used before a tensor is published to other threads.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor from_values(std::initializer_list<double> v);
    static Tensor identity(std::size_t n);
    static Tensor uniform(std::vector<std::size_t> shape, double lo, double hi, SeededRng& rng);
    static Tensor normal(std::vector<std::size_t> shape, double mean, double stddev, SeededRng& rng);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    // rows/cols of a matrix, or a vector viewed as 1xN
    std::size_t rows() const { return rank() >= 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() >= 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;
    // throws NumericError naming `what` if any element is NaN/Inf
    void require_finite(const char* what) const;

    Tensor reshaped(std::vector<std::size_t> shape) const;
    Tensor row(std::size_t r) const;  // [cols] copy of one row of a matrix
    double item() const;              // value of a 1-element tensor

    double sum() const;
    double mean() const;
    double min() const;
    double max() const;

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// ---- serialization: "VGT1" | u32 rank | rank x u64 dims | LE IEEE-754 ----
// Payload is f64 by default; pass float32=true to write a 4-byte payload.
// The reader infers the width from the remaining byte count, so f32 payloads
// are only valid in standalone tensor files; tensors embedded in container
// formats (VGW1, VGB1) are always written as f64.
void write_tensor(std::ostream& out, const Tensor& t, bool float32 = false);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t, bool float32 = false);
Tensor load_tensor(const std::string& path);

// ---- plain (non-tape) kernels; every result is checked finite ----
namespace kernels {

// C = op(A) * op(B), 2-D only. trans flags select A^T / B^T without copies.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// C += op(A) * op(B) into pre-shaped accumulator (no finite check; caller checks)
void matmul_acc(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b, Tensor& acc);

Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor add_rowwise(const Tensor& a, const Tensor& bias);  // bias broadcast over leading dim
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

}  // namespace kernels

}  // namespace vg
