#include "vg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace vg {

static std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) return 0;
        if (n > std::numeric_limits<std::size_t>::max() / d) throw ShapeError("dimension overflow");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) throw ShapeError("shape does not match data length");
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

Tensor Tensor::from_values(std::initializer_list<double> v) {
    return Tensor({v.size()}, std::vector<double>(v));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at2(i, i) = 1.0;
    return t;
}

Tensor Tensor::uniform(std::vector<std::size_t> shape, double lo, double hi, SeededRng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::normal(std::vector<std::size_t> shape, double mean, double stddev, SeededRng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = mean + stddev * rng.normal();
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::require_finite(const char* what) const {
    if (!all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (shape_product(shape) != data_.size()) throw ShapeError("reshape size mismatch");
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::row(std::size_t r) const {
    if (rank() != 2 || r >= shape_[0]) throw ShapeError("row out of range");
    const std::size_t c = shape_[1];
    std::vector<double> out(data_.begin() + r * c, data_.begin() + (r + 1) * c);
    return Tensor({c}, std::move(out));
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor");
    return data_[0];
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
double Tensor::mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }
double Tensor::min() const { return *std::min_element(data_.begin(), data_.end()); }
double Tensor::max() const { return *std::max_element(data_.begin(), data_.end()); }

// ---------------------------------------------------------------- VGT1 io

static void write_raw(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out) throw IoError("write failed");
}

void write_tensor(std::ostream& out, const Tensor& t, bool float32) {
    write_raw(out, "VGT1", 4);
    const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
    write_raw(out, &rank, 4);
    for (std::size_t d : t.shape()) {
        const std::uint64_t d64 = d;
        write_raw(out, &d64, 8);
    }
    if (float32) {
        std::vector<float> payload(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) payload[i] = static_cast<float>(t[i]);
        write_raw(out, payload.data(), payload.size() * 4);
    } else {
        write_raw(out, t.data(), t.size() * 8);
    }
}

Tensor read_tensor(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "VGT1", 4) != 0) throw IoError("bad tensor magic (expected VGT1)");
    std::uint32_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), 4);
    if (!in || rank > 8) throw IoError("bad tensor rank");
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint64_t d = 0;
        in.read(reinterpret_cast<char*>(&d), 8);
        if (!in) throw IoError("truncated tensor header");
        if (d > (1ull << 40)) throw IoError("tensor dimension overflow");
        shape[i] = static_cast<std::size_t>(d);
        count *= shape[i];
    }
    // remaining byte count decides f64 vs f32 payload
    const std::streampos here = in.tellg();
    in.seekg(0, std::ios::end);
    const std::streampos end = in.tellg();
    in.seekg(here);
    const std::uint64_t remaining = static_cast<std::uint64_t>(end - here);
    std::vector<double> data(count);
    if (remaining >= count * 8ull) {
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * 8));
        if (!in) throw IoError("truncated tensor payload: expected " + std::to_string(count * 8) +
                               " bytes, had " + std::to_string(remaining));
    } else if (remaining >= count * 4ull) {
        std::vector<float> payload(count);
        in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(count * 4));
        if (!in) throw IoError("truncated tensor payload");
        for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<double>(payload[i]);
    } else {
        throw IoError("truncated tensor payload: expected " + std::to_string(count * 8) + " or " +
                      std::to_string(count * 4) + " bytes, had " + std::to_string(remaining));
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t, bool float32) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    write_tensor(out, t, float32);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    return read_tensor(in);
}

// ---------------------------------------------------------------- kernels

namespace kernels {

static void require_matrix(const Tensor& t, const char* name) {
    if (t.rank() != 2) throw ShapeError(std::string(name) + " must be 2-D");
}

void matmul_acc(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b, Tensor& acc) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
    const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
    const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
    const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
    if (k != kb) throw ShapeError("matmul inner dimensions disagree: " + std::to_string(k) + " vs " + std::to_string(kb));
    if (acc.rank() != 2 || acc.dim(0) != m || acc.dim(1) != n) throw ShapeError("matmul accumulator shape");

    const double* A = a.data();
    const double* B = b.data();
    double* C = acc.data();
    const std::size_t lda = a.dim(1), ldb = b.dim(1);

    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            double* Ci = C + i * n;
            const double* Ai = A + i * lda;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = Ai[p];
                if (av == 0.0) continue;
                const double* Bp = B + p * ldb;
                for (std::size_t j = 0; j < n; ++j) Ci[j] += av * Bp[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // C[i,j] += sum_p A[i,p] * B[j,p]  (rows of B are contiguous)
        for (std::size_t i = 0; i < m; ++i) {
            const double* Ai = A + i * lda;
            double* Ci = C + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* Bj = B + j * ldb;
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += Ai[p] * Bj[p];
                Ci[j] += s;
            }
        }
    } else if (trans_a && !trans_b) {
        // C[i,j] += sum_p A[p,i] * B[p,j]
        for (std::size_t p = 0; p < k; ++p) {
            const double* Ap = A + p * lda;
            const double* Bp = B + p * ldb;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = Ap[i];
                if (av == 0.0) continue;
                double* Ci = C + i * n;
                for (std::size_t j = 0; j < n; ++j) Ci[j] += av * Bp[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            double* Ci = C + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* Bj = B + j * ldb;
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += A[p * lda + i] * Bj[p];
                Ci[j] += s;
            }
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
    const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
    Tensor c({m, n});
    matmul_acc(a, b, trans_a, trans_b, c);
    c.require_finite("matmul");
    return c;
}

template <class F>
static Tensor map1(const Tensor& a, F f, const char* what) {
    Tensor out(a.shape());
    const double* x = a.data();
    double* y = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(x[i]);
    out.require_finite(what);
    return out;
}

template <class F>
static Tensor map2(const Tensor& a, const Tensor& b, F f, const char* what) {
    if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": operand shapes differ");
    Tensor out(a.shape());
    const double* x = a.data();
    const double* y = b.data();
    double* z = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) z[i] = f(x[i], y[i]);
    out.require_finite(what);
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return map2(a, b, [](double x, double y) { return x + y; }, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return map2(a, b, [](double x, double y) { return x - y; }, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return map2(a, b, [](double x, double y) { return x * y; }, "mul"); }

Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
    if (a.rank() != 2 || bias.size() != a.dim(1)) throw ShapeError("add_rowwise: bias length must equal trailing dim");
    Tensor out(a.shape());
    const std::size_t r = a.dim(0), c = a.dim(1);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at2(i, j) = a.at2(i, j) + bias[j];
    out.require_finite("add_rowwise");
    return out;
}

Tensor scale(const Tensor& a, double s) { return map1(a, [s](double x) { return x * s; }, "scale"); }
Tensor add_scalar(const Tensor& a, double s) { return map1(a, [s](double x) { return x + s; }, "add_scalar"); }
Tensor exp(const Tensor& a) { return map1(a, [](double x) { return std::exp(x); }, "exp"); }
Tensor log(const Tensor& a) { return map1(a, [](double x) { return std::log(x); }, "log"); }

Tensor sigmoid(const Tensor& a) {
    return map1(a, [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
                "sigmoid");
}

Tensor softplus(const Tensor& a) {
    return map1(a, [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); }, "softplus");
}

Tensor relu(const Tensor& a) { return map1(a, [](double x) { return x > 0 ? x : 0.0; }, "relu"); }
Tensor square(const Tensor& a) { return map1(a, [](double x) { return x * x; }, "square"); }

Tensor clamp(const Tensor& a, double lo, double hi) {
    return map1(a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); }, "clamp");
}

}  // namespace kernels

}  // namespace vg
