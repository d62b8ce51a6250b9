#include "vg/tape.hpp"

#include <cmath>
#include <cstring>

namespace vg {

Tape::Var Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&)> pullback) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = grad_enabled_ && needs_grad;
    if (n.needs_grad) n.pullback = std::move(pullback);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Tape::Var Tape::leaf(Tensor v) {
    v.require_finite("leaf");
    return push(std::move(v), true, {});
}

Tape::Var Tape::constant(Tensor v) {
    v.require_finite("constant");
    return push(std::move(v), false, {});
}

Tensor& Tape::grad_buf(Var v) {
    Tensor& g = grads_[v.id];
    if (g.size() == 0) g = Tensor::zeros(nodes_[v.id].value.shape());
    return g;
}

void Tape::add_to_grad(Var v, const Tensor& g) {
    Tensor& buf = grad_buf(v);
    double* d = buf.data();
    const double* s = g.data();
    for (std::size_t i = 0; i < buf.size(); ++i) d[i] += s[i];
}

Tensor Tape::gradient(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw ShapeError("gradient of invalid var");
    if (grads_.size() == nodes_.size() && grads_[v.id].size() != 0) return grads_[v.id];
    return Tensor::zeros(nodes_[v.id].value.shape());
}

void Tape::backward(Var loss) {
    if (!grad_enabled_) throw NumericError("backward on a tape with gradients disabled");
    if (consumed_) throw NumericError("tape already consumed");
    if (value(loss).size() != 1) throw ShapeError("backward requires a scalar loss");
    consumed_ = true;
    grads_.assign(nodes_.size(), Tensor());
    if (!nodes_[loss.id].needs_grad) return;  // loss independent of every leaf
    grad_buf(loss)[0] = 1.0;
    for (std::int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.needs_grad || !n.pullback) continue;
        if (grads_[i].size() == 0) continue;  // not on a path to the loss
        n.pullback(*this);
    }
}

// --------------------------------------------------------------- op bodies

Tape::Var Tape::add(Var a, Var b) {
    Tensor out = kernels::add(value(a), value(b));
    Var r = push(std::move(out), needs(a) || needs(b), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, b, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            if (t.needs(a)) t.add_to_grad(a, g);
            if (t.needs(b)) t.add_to_grad(b, g);
        };
    }
    return r;
}

Tape::Var Tape::add_bias(Var a, Var bias) {
    Tensor out = kernels::add_rowwise(value(a), value(bias));
    Var r = push(std::move(out), needs(a) || needs(bias), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, bias, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            if (t.needs(a)) t.add_to_grad(a, g);
            if (t.needs(bias)) {
                Tensor& gb = t.grad_buf(bias);
                const std::size_t rows = g.dim(0), cols = g.dim(1);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) gb[j] += g.at2(i, j);
            }
        };
    }
    return r;
}

Tape::Var Tape::sub(Var a, Var b) {
    Tensor out = kernels::sub(value(a), value(b));
    Var r = push(std::move(out), needs(a) || needs(b), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, b, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            if (t.needs(a)) t.add_to_grad(a, g);
            if (t.needs(b)) {
                Tensor& gb = t.grad_buf(b);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
            }
        };
    }
    return r;
}

Tape::Var Tape::mul(Var a, Var b) {
    Tensor out = kernels::mul(value(a), value(b));
    Var r = push(std::move(out), needs(a) || needs(b), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, b, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            if (t.needs(a)) {
                const Tensor& vb = t.value(b);
                Tensor& ga = t.grad_buf(a);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (t.needs(b)) {
                const Tensor& va = t.value(a);
                Tensor& gb = t.grad_buf(b);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va[i];
            }
        };
    }
    return r;
}

Tape::Var Tape::scale(Var a, double s) {
    Tensor out = kernels::scale(value(a), s);
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, s, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
        };
    }
    return r;
}

Tape::Var Tape::add_scalar(Var a, double s) {
    Tensor out = kernels::add_scalar(value(a), s);
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r](Tape& t) {
            if (t.needs(a)) t.add_to_grad(a, t.grads_[r.id]);
        };
    }
    return r;
}

Tape::Var Tape::exp(Var a) {
    Tensor out = kernels::exp(value(a));
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& y = t.value(r);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i];
        };
    }
    return r;
}

Tape::Var Tape::log(Var a) {
    Tensor out = kernels::log(value(a));
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / x[i];
        };
    }
    return r;
}

Tape::Var Tape::sigmoid(Var a) {
    Tensor out = kernels::sigmoid(value(a));
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& y = t.value(r);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        };
    }
    return r;
}

Tape::Var Tape::softplus(Var a) {
    Tensor out = kernels::softplus(value(a));
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const double s = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
                ga[i] += g[i] * s;
            }
        };
    }
    return r;
}

Tape::Var Tape::relu(Var a) {
    Tensor out = kernels::relu(value(a));
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i)
                if (x[i] > 0) ga[i] += g[i];
        };
    }
    return r;
}

Tape::Var Tape::square(Var a) {
    Tensor out = kernels::square(value(a));
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
        };
    }
    return r;
}

Tape::Var Tape::clamp(Var a, double lo, double hi) {
    Tensor out = kernels::clamp(value(a), lo, hi);
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, lo, hi, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& x = t.value(a);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i)
                if (x[i] > lo && x[i] < hi) ga[i] += g[i];
        };
    }
    return r;
}

Tape::Var Tape::select(const Tensor& mask, Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb) || !va.same_shape(mask)) throw ShapeError("select: operand shapes differ");
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] != 0.0 ? va[i] : vb[i];
    out.require_finite("select");
    Var r = push(std::move(out), needs(a) || needs(b), {});
    if (nodes_[r.id].needs_grad) {
        Tensor m = mask;
        nodes_[r.id].pullback = [a, b, r, m](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            if (t.needs(a)) {
                Tensor& ga = t.grad_buf(a);
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (m[i] != 0.0) ga[i] += g[i];
            }
            if (t.needs(b)) {
                Tensor& gb = t.grad_buf(b);
                for (std::size_t i = 0; i < gb.size(); ++i)
                    if (m[i] == 0.0) gb[i] += g[i];
            }
        };
    }
    return r;
}

Tape::Var Tape::matmul(Var a, Var b) {
    Tensor out = kernels::matmul(value(a), value(b));
    Var r = push(std::move(out), needs(a) || needs(b), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, b, r](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            if (t.needs(a)) kernels::matmul_acc(g, t.value(b), false, true, t.grad_buf(a));
            if (t.needs(b)) kernels::matmul_acc(t.value(a), g, true, false, t.grad_buf(b));
        };
    }
    return r;
}

Tape::Var Tape::concat_cols(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(0) != vb.dim(0)) throw ShapeError("concat_cols: row counts differ");
    const std::size_t rows = va.dim(0), ca = va.dim(1), cb = vb.dim(1);
    Tensor out({rows, ca + cb});
    for (std::size_t i = 0; i < rows; ++i) {
        std::memcpy(out.data() + i * (ca + cb), va.data() + i * ca, ca * sizeof(double));
        std::memcpy(out.data() + i * (ca + cb) + ca, vb.data() + i * cb, cb * sizeof(double));
    }
    Var r = push(std::move(out), needs(a) || needs(b), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, b, r, rows, ca, cb](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            if (t.needs(a)) {
                Tensor& ga = t.grad_buf(a);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * (ca + cb) + j];
            }
            if (t.needs(b)) {
                Tensor& gb = t.grad_buf(b);
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * (ca + cb) + ca + j];
            }
        };
    }
    return r;
}

Tape::Var Tape::slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Tensor& va = value(a);
    if (va.rank() != 2 || c0 >= c1 || c1 > va.dim(1)) throw ShapeError("slice_cols: bad range");
    const std::size_t rows = va.dim(0), cols = va.dim(1), w = c1 - c0;
    Tensor out({rows, w});
    for (std::size_t i = 0; i < rows; ++i)
        std::memcpy(out.data() + i * w, va.data() + i * cols + c0, w * sizeof(double));
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r, rows, cols, c0, w](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < w; ++j) ga[i * cols + c0 + j] += g[i * w + j];
        };
    }
    return r;
}

Tape::Var Tape::sum(Var a) {
    Tensor out = Tensor::scalar(value(a).sum());
    out.require_finite("sum");
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r](Tape& t) {
            const double g = t.grads_[r.id][0];
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        };
    }
    return r;
}

Tape::Var Tape::mean(Var a) {
    const std::size_t n = value(a).size();
    Tensor out = Tensor::scalar(value(a).mean());
    out.require_finite("mean");
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r, n](Tape& t) {
            const double g = t.grads_[r.id][0] / static_cast<double>(n);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        };
    }
    return r;
}

Tape::Var Tape::row_sum(Var a) {
    const Tensor& va = value(a);
    if (va.rank() != 2) throw ShapeError("row_sum needs a matrix");
    const std::size_t rows = va.dim(0), cols = va.dim(1);
    Tensor out({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += va[i * cols + j];
        out[i] = s;
    }
    out.require_finite("row_sum");
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r, rows, cols](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += g[i];
        };
    }
    return r;
}

Tape::Var Tape::group_log_softmax(Var a, std::size_t k) {
    const Tensor& va = value(a);
    if (k == 0 || va.size() % k != 0) throw ShapeError("group_log_softmax: group size");
    const std::size_t groups = va.size() / k;
    Tensor out(va.shape());
    for (std::size_t g = 0; g < groups; ++g) {
        const double* x = va.data() + g * k;
        double m = x[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, x[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < k; ++j) out[g * k + j] = x[j] - lse;
    }
    out.require_finite("group_log_softmax");
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r, groups, k](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& y = t.value(r);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t gi = 0; gi < groups; ++gi) {
                double gs = 0.0;
                for (std::size_t j = 0; j < k; ++j) gs += g[gi * k + j];
                for (std::size_t j = 0; j < k; ++j)
                    ga[gi * k + j] += g[gi * k + j] - std::exp(y[gi * k + j]) * gs;
            }
        };
    }
    return r;
}

Tape::Var Tape::group_logsumexp(Var a, std::size_t k) {
    const Tensor& va = value(a);
    if (va.rank() != 2 || k == 0 || va.dim(1) % k != 0) throw ShapeError("group_logsumexp: group size");
    const std::size_t rows = va.dim(0), out_cols = va.dim(1) / k;
    Tensor out({rows, out_cols});
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t c = 0; c < out_cols; ++c) {
            const double* x = va.data() + i * va.dim(1) + c * k;
            double m = x[0];
            for (std::size_t j = 1; j < k; ++j) m = std::max(m, x[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - m);
            out.at2(i, c) = m + std::log(s);
        }
    }
    out.require_finite("group_logsumexp");
    Var r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [a, r, rows, out_cols, k](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& x = t.value(a);
            const Tensor& y = t.value(r);
            Tensor& ga = t.grad_buf(a);
            const std::size_t cols = out_cols * k;
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < out_cols; ++c) {
                    const double gy = g[i * out_cols + c];
                    if (gy == 0.0) continue;
                    const double lse = y[i * out_cols + c];
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t idx = i * cols + c * k + j;
                        ga[idx] += gy * std::exp(x[idx] - lse);
                    }
                }
        };
    }
    return r;
}

Tape::Var Tape::bernoulli_log_prob_rows(Var logits, const Tensor& x) {
    const Tensor& l = value(logits);
    if (!l.same_shape(x)) throw ShapeError("bernoulli_log_prob: shapes differ");
    if (l.rank() != 2) throw ShapeError("bernoulli_log_prob needs a matrix");
    const std::size_t rows = l.dim(0), cols = l.dim(1);
    Tensor out({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double v = l.at2(i, j);
            const double sp = v > 30 ? v : std::log1p(std::exp(v));
            s += x.at2(i, j) * v - sp;
        }
        out[i] = s;
    }
    out.require_finite("bernoulli_log_prob");
    Var r = push(std::move(out), needs(logits), {});
    if (nodes_[r.id].needs_grad) {
        Tensor xc = x;
        nodes_[r.id].pullback = [logits, r, xc, rows, cols](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& l = t.value(logits);
            Tensor& gl = t.grad_buf(logits);
            for (std::size_t i = 0; i < rows; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double v = l.at2(i, j);
                    const double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                    gl.at2(i, j) += gi * (xc.at2(i, j) - sig);
                }
            }
        };
    }
    return r;
}

Tape::Var Tape::gaussian_log_prob_rows(Var mean, const Tensor& x, double sigma) {
    const Tensor& m = value(mean);
    if (!m.same_shape(x)) throw ShapeError("gaussian_log_prob: shapes differ");
    if (m.rank() != 2) throw ShapeError("gaussian_log_prob needs a matrix");
    if (sigma <= 0) throw NumericError("gaussian_log_prob: sigma must be positive");
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    const double inv_var = 1.0 / (sigma * sigma);
    const double log_norm = -0.5 * std::log(2.0 * 3.14159265358979323846 * sigma * sigma);
    Tensor out({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double d = x.at2(i, j) - m.at2(i, j);
            s += log_norm - 0.5 * d * d * inv_var;
        }
        out[i] = s;
    }
    out.require_finite("gaussian_log_prob");
    Var r = push(std::move(out), needs(mean), {});
    if (nodes_[r.id].needs_grad) {
        Tensor xc = x;
        nodes_[r.id].pullback = [mean, r, xc, rows, cols, inv_var](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            const Tensor& m = t.value(mean);
            Tensor& gm = t.grad_buf(mean);
            for (std::size_t i = 0; i < rows; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                for (std::size_t j = 0; j < cols; ++j)
                    gm.at2(i, j) += gi * (xc.at2(i, j) - m.at2(i, j)) * inv_var;
            }
        };
    }
    return r;
}

Tape::Var Tape::kl_std_normal_rows(Var mu, Var logvar) {
    const Tensor& m = value(mu);
    const Tensor& lv = value(logvar);
    if (!m.same_shape(lv) || m.rank() != 2) throw ShapeError("kl_std_normal: bad shapes");
    const std::size_t rows = m.dim(0), cols = m.dim(1);
    Tensor out({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double mu_ij = m.at2(i, j), lv_ij = lv.at2(i, j);
            s += mu_ij * mu_ij + std::exp(lv_ij) - 1.0 - lv_ij;
        }
        out[i] = 0.5 * s;
    }
    out.require_finite("kl_std_normal");
    Var r = push(std::move(out), needs(mu) || needs(logvar), {});
    if (nodes_[r.id].needs_grad) {
        nodes_[r.id].pullback = [mu, logvar, r, rows, cols](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            for (std::size_t i = 0; i < rows; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                if (t.needs(mu)) {
                    const Tensor& m = t.value(mu);
                    Tensor& gm = t.grad_buf(mu);
                    for (std::size_t j = 0; j < cols; ++j) gm.at2(i, j) += gi * m.at2(i, j);
                }
                if (t.needs(logvar)) {
                    const Tensor& lv = t.value(logvar);
                    Tensor& glv = t.grad_buf(logvar);
                    for (std::size_t j = 0; j < cols; ++j) glv.at2(i, j) += gi * 0.5 * (std::exp(lv.at2(i, j)) - 1.0);
                }
            }
        };
    }
    return r;
}

Tape::Var Tape::kl_to_const_gaussian_rows(Var mu, Var logvar, const Tensor& mu2, const Tensor& logvar2) {
    const Tensor& m1 = value(mu);
    const Tensor& lv1 = value(logvar);
    if (!m1.same_shape(lv1) || !m1.same_shape(mu2) || !m1.same_shape(logvar2) || m1.rank() != 2)
        throw ShapeError("kl_to_const_gaussian: bad shapes");
    const std::size_t rows = m1.dim(0), cols = m1.dim(1);
    Tensor out({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double a = m1.at2(i, j) - mu2.at2(i, j);
            const double l1 = lv1.at2(i, j), l2 = logvar2.at2(i, j);
            s += l2 - l1 + (std::exp(l1) + a * a) * std::exp(-l2) - 1.0;
        }
        out[i] = 0.5 * s;
    }
    out.require_finite("kl_to_const_gaussian");
    Var r = push(std::move(out), needs(mu) || needs(logvar), {});
    if (nodes_[r.id].needs_grad) {
        Tensor m2 = mu2, l2c = logvar2;
        nodes_[r.id].pullback = [mu, logvar, r, m2, l2c, rows, cols](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            for (std::size_t i = 0; i < rows; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double inv_v2 = std::exp(-l2c.at2(i, j));
                    if (t.needs(mu))
                        t.grad_buf(mu).at2(i, j) += gi * (t.value(mu).at2(i, j) - m2.at2(i, j)) * inv_v2;
                    if (t.needs(logvar)) {
                        const double l1 = t.value(logvar).at2(i, j);
                        t.grad_buf(logvar).at2(i, j) += gi * 0.5 * (std::exp(l1) * inv_v2 - 1.0);
                    }
                }
            }
        };
    }
    return r;
}

Tape::Var Tape::kl_from_const_gaussian_rows(const Tensor& mu2, const Tensor& logvar2, Var mu, Var logvar) {
    const Tensor& m1 = value(mu);
    const Tensor& lv1 = value(logvar);
    if (!m1.same_shape(lv1) || !m1.same_shape(mu2) || !m1.same_shape(logvar2) || m1.rank() != 2)
        throw ShapeError("kl_from_const_gaussian: bad shapes");
    const std::size_t rows = m1.dim(0), cols = m1.dim(1);
    Tensor out({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double a = mu2.at2(i, j) - m1.at2(i, j);
            const double l1 = lv1.at2(i, j), l2 = logvar2.at2(i, j);
            s += l1 - l2 + (std::exp(l2) + a * a) * std::exp(-l1) - 1.0;
        }
        out[i] = 0.5 * s;
    }
    out.require_finite("kl_from_const_gaussian");
    Var r = push(std::move(out), needs(mu) || needs(logvar), {});
    if (nodes_[r.id].needs_grad) {
        Tensor m2 = mu2, l2c = logvar2;
        nodes_[r.id].pullback = [mu, logvar, r, m2, l2c, rows, cols](Tape& t) {
            const Tensor& g = t.grads_[r.id];
            for (std::size_t i = 0; i < rows; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                for (std::size_t j = 0; j < cols; ++j) {
                    const double l1 = t.value(logvar).at2(i, j);
                    const double inv_v1 = std::exp(-l1);
                    const double a = m2.at2(i, j) - t.value(mu).at2(i, j);
                    if (t.needs(mu)) t.grad_buf(mu).at2(i, j) += -gi * a * inv_v1;
                    if (t.needs(logvar))
                        t.grad_buf(logvar).at2(i, j) +=
                            gi * 0.5 * (1.0 - (std::exp(l2c.at2(i, j)) + a * a) * inv_v1);
                }
            }
        };
    }
    return r;
}

// ------------------------------------------------------ finite differences

double finite_difference_check(
    const std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>& build_loss,
    const std::vector<Tensor>& params, double h) {
    // analytic gradients
    Tape tape(true);
    std::vector<Tape::Var> leaves;
    leaves.reserve(params.size());
    for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
    Tape::Var loss = build_loss(tape, leaves);
    if (tape.value(loss).size() != 1) throw ShapeError("finite_difference_check: loss must be scalar");
    tape.backward(loss);
    std::vector<Tensor> analytic;
    for (Tape::Var v : leaves) analytic.push_back(tape.gradient(v));

    auto eval_at = [&](const std::vector<Tensor>& pts) {
        Tape t(false);
        std::vector<Tape::Var> ls;
        for (const Tensor& p : pts) ls.push_back(t.leaf(p));
        const double v = t.value(build_loss(t, ls)).item();
        if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite objective");
        return v;
    };

    double worst = 0.0;
    std::vector<Tensor> probe = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double orig = probe[p][i];
            probe[p][i] = orig + h;
            const double fp = eval_at(probe);
            probe[p][i] = orig - h;
            const double fm = eval_at(probe);
            probe[p][i] = orig;
            const double central = (fp - fm) / (2.0 * h);
            const double a = analytic[p][i];
            const double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

double finite_difference_check(const std::function<Tape::Var(Tape&, Tape::Var)>& build_loss,
                               const Tensor& params, double h) {
    return finite_difference_check(
        [&](Tape& t, const std::vector<Tape::Var>& vs) { return build_loss(t, vs[0]); },
        std::vector<Tensor>{params}, h);
}

}  // namespace vg
