#include "vg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "vg/optim.hpp"

namespace vg::metrics {

std::string GapReport::csv_header() {
    return "epoch,seed,elbo_train,elbo_test,elbo_star,gap_generalization,gap_amortization,gap_robustness,"
           "has_amortization,has_robustness,wall_seconds";
}

std::string GapReport::csv_row(double wall_seconds) const {
    std::string s;
    s += std::to_string(epoch);
    s += ',';
    s += std::to_string(seed);
    s += ',';
    s += format_real(elbo_train);
    s += ',';
    s += format_real(elbo_test);
    s += ',';
    s += format_real(elbo_star);
    s += ',';
    s += format_real(gap_generalization);
    s += ',';
    s += format_real(gap_amortization);
    s += ',';
    s += format_real(gap_robustness);
    s += ',';
    s += has_amortization ? "1" : "0";
    s += ',';
    s += has_robustness ? "1" : "0";
    s += ',';
    s += format_real(wall_seconds);
    return s;
}

std::vector<Tensor> frozen_noise(std::size_t n_mc, std::size_t count, std::size_t dim, const SeededRng& base,
                                 const std::vector<std::size_t>* example_indices) {
    if (example_indices && example_indices->size() != count) throw ShapeError("frozen_noise index count");
    std::vector<Tensor> noise(n_mc, Tensor({count, dim}));
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t key = example_indices ? (*example_indices)[i] : i;
        SeededRng r = base.child(key);
        for (std::size_t j = 0; j < n_mc; ++j)
            for (std::size_t k = 0; k < dim; ++k) noise[j].at2(i, k) = r.normal();
    }
    return noise;
}

namespace {

constexpr std::size_t kEvalBatch = 64;

// mean ELBO with per-example noise keyed by dataset index
double dataset_elbo_keyed(const VaeParameters& p, const data::Dataset& dataset, std::size_t n_mc,
                          const SeededRng& base) {
    if (dataset.size() == 0) throw ConfigError("dataset_elbo needs a non-empty dataset");
    if (n_mc == 0) throw ConfigError("dataset_elbo needs n_mc >= 1");
    const std::size_t n = dataset.size(), d = dataset.input_dim();
    double acc = 0.0;
    for (std::size_t begin = 0; begin < n; begin += kEvalBatch) {
        const std::size_t m = std::min(kEvalBatch, n - begin);
        Tensor x({m, d});
        std::memcpy(x.data(), dataset.images.data() + begin * d, m * d * sizeof(double));
        std::vector<std::size_t> idx(m);
        for (std::size_t i = 0; i < m; ++i) idx[i] = begin + i;
        const std::vector<Tensor> noise = frozen_noise(n_mc, m, p.arch.latent_dim(), base, &idx);
        const Tensor rows = elbo_rows(p, x, noise);
        acc += rows.sum();
    }
    return acc / static_cast<double>(n);
}

}  // namespace

double dataset_elbo(const VaeParameters& p, const data::Dataset& dataset, std::size_t n_mc, SeededRng rng) {
    return dataset_elbo_keyed(p, dataset, n_mc, rng);
}

double generalization_gap(const VaeParameters& p, const data::Dataset& train, const data::Dataset& test,
                          std::size_t n_mc, SeededRng rng) {
    if (train.input_dim() != test.input_dim()) throw ShapeError("generalization_gap: dataset dims differ");
    const double on_train = dataset_elbo_keyed(p, train, n_mc, rng);
    const double on_test = dataset_elbo_keyed(p, test, n_mc, rng);
    return on_train - on_test;
}

SviBatchResult svi_refine_batch(const VaeParameters& p, const Tensor& x, const SviConfig& cfg,
                                const std::vector<Tensor>& noise, std::vector<double>* trace_row0) {
    if (noise.empty()) throw ConfigError("svi needs at least one noise draw");
    const std::size_t b = x.dim(0), d = p.arch.latent_dim();

    PosteriorBatch init = encode(p, x);
    Tensor mu = init.mean, lv = init.log_var;

    auto objective_rows = [&](Tape& t, Tape::Var vmu, Tape::Var vlv) {
        TapeVae dec = TapeVae::make(t, p, false, false);
        Tape::Var lv_c = t.clamp(vlv, -30.0, 20.0);
        Tape::Var ll_acc{};
        for (std::size_t j = 0; j < noise.size(); ++j) {
            Tape::Var z = reparameterize_tape(t, vmu, lv_c, noise[j]);
            Tape::Var ll = log_likelihood_rows_tape(t, p.arch, decode_tape(t, dec, z), x);
            ll_acc = j == 0 ? ll : t.add(ll_acc, ll);
        }
        Tape::Var mean_ll =
            noise.size() == 1 ? ll_acc : t.scale(ll_acc, 1.0 / static_cast<double>(noise.size()));
        return t.sub(mean_ll, t.kl_std_normal_rows(vmu, lv_c));
    };

    Tensor best_mu = mu, best_lv = lv;
    Tensor best_rows({b}), init_rows({b});
    Optimizer opt(OptimizerKind::Sgd, cfg.step_size);

    for (std::size_t step = 0; step <= cfg.steps; ++step) {
        const bool last = step == cfg.steps;
        Tape t(!last);
        Tape::Var vmu = t.leaf(mu);
        Tape::Var vlv = t.leaf(lv);
        Tape::Var rows = objective_rows(t, vmu, vlv);
        const Tensor row_vals = t.value(rows);
        if (trace_row0) trace_row0->push_back(row_vals[0]);
        if (step == 0) {
            init_rows = row_vals;
            best_rows = row_vals;
        } else {
            for (std::size_t i = 0; i < b; ++i)
                if (row_vals[i] > best_rows[i]) {
                    best_rows[i] = row_vals[i];
                    for (std::size_t k = 0; k < d; ++k) {
                        best_mu.at2(i, k) = mu.at2(i, k);
                        best_lv.at2(i, k) = lv.at2(i, k);
                    }
                }
        }
        if (last) break;
        t.backward(t.scale(t.sum(rows), -1.0));  // ascend
        std::vector<Tensor> grads = {t.gradient(vmu), t.gradient(vlv)};
        std::vector<Tensor*> params = {&mu, &lv};
        opt.step(params, grads);
    }

    SviBatchResult out;
    out.q_star.mean = std::move(best_mu);
    out.q_star.log_var = kernels::clamp(best_lv, -30.0, 20.0);
    out.elbo_star_rows = std::move(best_rows);
    out.elbo_init_rows = std::move(init_rows);
    return out;
}

SviResult svi_refine(const VaeParameters& p, const Tensor& x_row, const SviConfig& cfg, SeededRng rng) {
    const Tensor x = x_row.rank() == 1 ? x_row.reshaped({1, x_row.size()}) : x_row;
    std::vector<Tensor> noise;
    for (std::size_t j = 0; j < std::max<std::size_t>(1, cfg.n_mc); ++j)
        noise.push_back(Tensor::normal({1, p.arch.latent_dim()}, 0.0, 1.0, rng));

    SviResult res;
    SviBatchResult r = svi_refine_batch(p, x, cfg, noise, &res.trace);
    res.q_star = r.q_star.row(0);
    res.elbo_star = r.elbo_star_rows[0];
    res.elbo_init = r.elbo_init_rows[0];
    return res;
}

double amortization_gap(const VaeParameters& p, const data::Dataset& test, const SviConfig& cfg,
                        std::size_t n_mc, SeededRng rng) {
    if (test.size() == 0) throw ConfigError("amortization_gap needs a non-empty test set");
    const std::size_t n = test.size(), d = test.input_dim();
    const std::size_t mc = std::max<std::size_t>(1, n_mc);
    double acc = 0.0;
    for (std::size_t begin = 0; begin < n; begin += kEvalBatch) {
        const std::size_t m = std::min(kEvalBatch, n - begin);
        Tensor x({m, d});
        std::memcpy(x.data(), test.images.data() + begin * d, m * d * sizeof(double));
        std::vector<std::size_t> idx(m);
        for (std::size_t i = 0; i < m; ++i) idx[i] = begin + i;
        const std::vector<Tensor> noise = frozen_noise(mc, m, p.arch.latent_dim(), rng, &idx);
        SviBatchResult r = svi_refine_batch(p, x, cfg, noise);
        for (std::size_t i = 0; i < m; ++i) acc += r.elbo_star_rows[i] - r.elbo_init_rows[i];
    }
    return acc / static_cast<double>(n);
}

// ------------------------------------------------------------------ MS-SSIM

const std::vector<double>& ms_ssim_standard_weights() {
    static const std::vector<double> w = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    return w;
}

namespace {

struct Plane {
    std::size_t w = 0, h = 0;
    std::vector<double> v;
};

std::vector<double> gaussian_kernel(std::size_t span, double sigma) {
    std::vector<double> k(span);
    const double c = 0.5 * (span - 1);
    double s = 0.0;
    for (std::size_t i = 0; i < span; ++i) {
        k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        s += k[i];
    }
    for (double& x : k) x /= s;
    return k;
}

// separable valid-region filtering
Plane filter_valid(const Plane& p, const std::vector<double>& k) {
    const std::size_t span = k.size();
    Plane mid;  // horizontal pass
    mid.w = p.w - span + 1;
    mid.h = p.h;
    mid.v.resize(mid.w * mid.h);
    for (std::size_t y = 0; y < p.h; ++y)
        for (std::size_t x = 0; x < mid.w; ++x) {
            double s = 0.0;
            for (std::size_t i = 0; i < span; ++i) s += k[i] * p.v[y * p.w + x + i];
            mid.v[y * mid.w + x] = s;
        }
    Plane out;
    out.w = mid.w;
    out.h = p.h - span + 1;
    out.v.resize(out.w * out.h);
    for (std::size_t y = 0; y < out.h; ++y)
        for (std::size_t x = 0; x < out.w; ++x) {
            double s = 0.0;
            for (std::size_t i = 0; i < span; ++i) s += k[i] * mid.v[(y + i) * mid.w + x];
            out.v[y * out.w + x] = s;
        }
    return out;
}

Plane downsample2(const Plane& p) {
    Plane out;
    out.w = p.w / 2;
    out.h = p.h / 2;
    out.v.resize(out.w * out.h);
    for (std::size_t y = 0; y < out.h; ++y)
        for (std::size_t x = 0; x < out.w; ++x)
            out.v[y * out.w + x] = 0.25 * (p.v[2 * y * p.w + 2 * x] + p.v[2 * y * p.w + 2 * x + 1] +
                                           p.v[(2 * y + 1) * p.w + 2 * x] + p.v[(2 * y + 1) * p.w + 2 * x + 1]);
    return out;
}

}  // namespace

double ms_ssim(const Tensor& a, const Tensor& b, std::size_t width, std::size_t height, std::size_t scales) {
    if (!a.same_shape(b)) throw ShapeError("ms_ssim: image shapes differ");
    if (a.size() != width * height) throw ShapeError("ms_ssim: image size mismatch");
    if (scales == 0) throw ConfigError("ms_ssim needs at least one scale");
    if ((std::min(width, height) >> (scales - 1)) < 2)
        throw ConfigError("image too small for " + std::to_string(scales) + " scales");
    // canonical operand order keeps the metric exactly symmetric even when
    // the compiler contracts floating-point expressions
    if (std::lexicographical_compare(b.data(), b.data() + b.size(), a.data(), a.data() + a.size()))
        return ms_ssim(b, a, width, height, scales);

    std::vector<double> weights(ms_ssim_standard_weights().begin(),
                                ms_ssim_standard_weights().begin() + std::min<std::size_t>(scales, 5));
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    for (double& w : weights) w /= wsum;

    constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;

    Plane pa{width, height, std::vector<double>(a.data(), a.data() + a.size())};
    Plane pb{width, height, std::vector<double>(b.data(), b.data() + b.size())};

    double result = 1.0;
    for (std::size_t s = 0; s < scales; ++s) {
        std::size_t span = std::min<std::size_t>(11, std::min(pa.w, pa.h));
        if (span % 2 == 0) --span;
        const std::vector<double> k = gaussian_kernel(span, 1.5);

        const Plane mu_a = filter_valid(pa, k), mu_b = filter_valid(pb, k);
        Plane aa = pa, bb = pb, ab = pa;
        for (std::size_t i = 0; i < pa.v.size(); ++i) {
            aa.v[i] = pa.v[i] * pa.v[i];
            bb.v[i] = pb.v[i] * pb.v[i];
            ab.v[i] = pa.v[i] * pb.v[i];
        }
        const Plane m_aa = filter_valid(aa, k), m_bb = filter_valid(bb, k), m_ab = filter_valid(ab, k);

        double mean_cs = 0.0, mean_ssim = 0.0;
        for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
            const double ma = mu_a.v[i], mb = mu_b.v[i];
            const double va = m_aa.v[i] - ma * ma;
            const double vb = m_bb.v[i] - mb * mb;
            const double cov = m_ab.v[i] - ma * mb;
            const double cs = (2.0 * cov + kC2) / (va + vb + kC2);
            const double lum = (2.0 * ma * mb + kC1) / (ma * ma + mb * mb + kC1);
            mean_cs += cs;
            mean_ssim += lum * cs;
        }
        mean_cs /= static_cast<double>(mu_a.v.size());
        mean_ssim /= static_cast<double>(mu_a.v.size());

        const bool coarsest = s + 1 == scales;
        const double factor = std::max(coarsest ? mean_ssim : mean_cs, 0.0);
        result *= std::pow(factor, weights[s]);
        if (!coarsest) {
            pa = downsample2(pa);
            pb = downsample2(pb);
        }
    }
    return result;
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
    if (!a.same_shape(b)) throw ShapeError("psnr: image shapes differ");
    if (peak <= 0) throw ConfigError("psnr: peak must be positive");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

TrainingDistributionElbo training_distribution_elbo(const VaeParameters& p, data::DataSource& source,
                                                    std::size_t n_samples, std::size_t n_mc, SeededRng rng) {
    if (n_samples == 0) throw ConfigError("training_distribution_elbo needs n_samples >= 1");
    const std::size_t d = p.arch.input_dim;
    double acc = 0.0;
    std::size_t done = 0;
    while (done < n_samples) {
        const std::size_t m = std::min(kEvalBatch, n_samples - done);
        data::Batch batch = source.next_batch(m);
        const std::vector<Tensor> noise =
            frozen_noise(std::max<std::size_t>(1, n_mc), m, p.arch.latent_dim(), rng,
                         batch.indices.empty() ? nullptr : &batch.indices);
        (void)d;
        acc += elbo_rows(p, batch.images, noise).sum();
        done += m;
    }
    TrainingDistributionElbo out;
    out.value = acc / static_cast<double>(n_samples);
    out.samples = n_samples;
    out.entropy_caveat = true;
    return out;
}

double gaussian_log_density(const Tensor& z, const GaussianPosterior& q) {
    if (z.size() != q.dim()) throw ShapeError("gaussian_log_density: dimension mismatch");
    constexpr double kLog2Pi = 1.8378770664093454835606594728112;
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double lv = q.log_variance[i];
        const double d = z[i] - q.mean[i];
        s += -0.5 * (kLog2Pi + lv + d * d * std::exp(-lv));
    }
    return s;
}

std::vector<std::pair<double, double>> latent_smoothness_scan(const Tensor& x0, const Tensor& x1,
                                                              const VaeParameters& p, std::size_t steps) {
    if (steps == 0) throw ConfigError("latent_smoothness_scan needs steps >= 1");
    const Tensor z0 = encode_one(p, x0).mean;
    const Tensor z1 = encode_one(p, x1).mean;
    std::vector<std::pair<double, double>> out;
    out.reserve(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) {
        const double alpha = static_cast<double>(i) / static_cast<double>(steps);
        Tensor z(z0.shape());
        for (std::size_t k = 0; k < z.size(); ++k) z[k] = alpha * z0[k] + (1.0 - alpha) * z1[k];
        const Tensor recon = decode_and_reconstruct(p, z);
        const GaussianPosterior q = encode_one(p, recon);
        out.emplace_back(alpha, gaussian_log_density(z, q));
    }
    return out;
}

}  // namespace vg::metrics
