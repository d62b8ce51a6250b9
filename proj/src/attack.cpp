#include "vg/attack.hpp"

#include <algorithm>
#include <cmath>

#include "vg/metrics.hpp"

namespace vg::attack {

void AttackConfig::validate() const {
    if (delta < 0) throw ConfigError("attack delta must be >= 0");
    if (eta <= 0) throw ConfigError("attack eta must be > 0");
    if (steps == 0) throw ConfigError("attack needs at least one iteration");
    if (n_images == 0 || n_seeds == 0) throw ConfigError("attack needs n_images, n_seeds >= 1");
}

double skl(const GaussianPosterior& q1, const GaussianPosterior& q2) {
    if (q1.dim() != q2.dim()) throw ShapeError("skl: posterior dimensions differ");
    double s = 0.0;
    for (std::size_t i = 0; i < q1.dim(); ++i) {
        const double l1 = q1.log_variance[i], l2 = q2.log_variance[i];
        const double d = q1.mean[i] - q2.mean[i];
        // KL(1||2) + KL(2||1); this arrangement is exactly zero for equal
        // parameters and exactly symmetric under operand swap
        const double ratio_part = std::exp(l1 - l2) + std::exp(l2 - l1) - 2.0;
        const double dist_part = d * d * (std::exp(-l1) + std::exp(-l2));
        s += 0.5 * (ratio_part + dist_part);
    }
    return s;
}

namespace {

// eps <- clamp to the L-inf ball, then keep x+eps inside the pixel range
void project(Tensor& eps, const Tensor& x, double delta) {
    for (std::size_t i = 0; i < eps.size(); ++i) {
        double e = std::clamp(eps[i], -delta, delta);
        e = std::clamp(x[i] + e, 0.0, 1.0) - x[i];
        eps[i] = e;
    }
}

}  // namespace

AttackResult find_adversarial(const Tensor& x_real, const VaeParameters& p, const AttackConfig& cfg,
                              SeededRng rng) {
    cfg.validate();
    const Tensor x = x_real.rank() == 1 ? x_real.reshaped({1, x_real.size()}) : x_real;
    if (x.dim(0) != 1 || x.dim(1) != p.arch.input_dim) throw ShapeError("attack expects a single image");

    const PosteriorBatch clean = encode(p, x);

    Tensor eps = Tensor::uniform(x.shape(), -cfg.delta, cfg.delta, rng);
    project(eps, x, cfg.delta);

    AttackResult res;
    res.x_adv = x;
    res.best_skl = 0.0;
    res.skl_trace.reserve(cfg.steps + 1);
    res.min_pixel = 1.0;
    res.max_pixel = 0.0;

    for (std::size_t it = 0; it <= cfg.steps; ++it) {
        const bool last = it == cfg.steps;
        Tape t(!last);
        Tape::Var veps = t.leaf(eps);
        Tape::Var x_adv = t.add(t.constant(x), veps);
        auto [mu, lv] = encode_tape(t, TapeVae::make(t, p, false, false), x_adv);
        // same exactly-cancelling arrangement as skl(): zero perturbation
        // gives a bitwise-zero objective
        Tape::Var dl = t.sub(lv, t.constant(clean.log_var));
        Tape::Var ratio = t.add_scalar(t.add(t.exp(dl), t.exp(t.scale(dl, -1.0))), -2.0);
        Tape::Var inv_sum = t.add(t.exp(t.scale(lv, -1.0)),
                                  t.constant(kernels::exp(kernels::scale(clean.log_var, -1.0))));
        Tape::Var dist = t.mul(t.square(t.sub(mu, t.constant(clean.mean))), inv_sum);
        Tape::Var obj = t.scale(t.row_sum(t.add(ratio, dist)), 0.5);
        const double value = t.value(obj)[0];
        if (!std::isfinite(value)) throw NumericError("attack objective is non-finite");
        res.skl_trace.push_back(value);
        const Tensor& xa = t.value(x_adv);
        for (std::size_t i = 0; i < eps.size(); ++i) {
            res.max_eps_linf = std::max(res.max_eps_linf, std::abs(eps[i]));
            res.min_pixel = std::min(res.min_pixel, xa[i]);
            res.max_pixel = std::max(res.max_pixel, xa[i]);
        }
        if (value > res.best_skl || it == 0) {
            res.best_skl = value;
            res.x_adv = t.value(x_adv);
        }
        if (last) break;
        t.backward(t.sum(obj));
        const Tensor g = t.gradient(veps);
        for (std::size_t i = 0; i < eps.size(); ++i) eps[i] += cfg.eta * g[i];
        project(eps, x, cfg.delta);
    }
    if (x_real.rank() == 1) res.x_adv = res.x_adv.reshaped({x_real.size()});
    return res;
}

std::string RobustnessReport::csv_header() {
    return "image,seed,final_skl,msssim_inputs,msssim_recons";
}

std::string RobustnessReport::csv() const {
    std::string out = csv_header() + "\n";
    for (const RobustnessRow& r : rows) {
        out += std::to_string(r.image);
        out += ',';
        out += std::to_string(r.seed);
        out += ',';
        out += format_real(r.final_skl);
        out += ',';
        out += format_real(r.msssim_inputs);
        out += ',';
        out += format_real(r.msssim_recons);
        out += '\n';
    }
    return out;
}

RobustnessReport robustness_gap(const VaeParameters& p, const data::Dataset& test, const AttackConfig& cfg,
                                SeededRng rng) {
    cfg.validate();
    if (test.size() == 0) throw ConfigError("robustness_gap needs a non-empty test set");
    if (test.width * test.height != test.input_dim())
        throw ConfigError("robustness_gap needs image width/height metadata");
    const std::size_t n_img = std::min(cfg.n_images, test.size());

    RobustnessReport report;
    double acc = 0.0;
    for (std::size_t i = 0; i < n_img; ++i) {
        const Tensor x = test.images.row(i);
        for (std::size_t s = 0; s < cfg.n_seeds; ++s) {
            SeededRng attack_rng = rng.child(i * 1000003 + s * 2 + 0);
            SeededRng recon_rng = rng.child(i * 1000003 + s * 2 + 1);
            AttackResult adv = find_adversarial(x, p, cfg, attack_rng);

            // one shared posterior draw per (image, seed) pair
            const GaussianPosterior q_r = encode_one(p, x);
            const GaussianPosterior q_a = encode_one(p, adv.x_adv);
            Tensor noise(q_r.mean.shape());
            for (std::size_t k = 0; k < noise.size(); ++k) noise[k] = recon_rng.normal();
            Tensor z_r(noise.shape()), z_a(noise.shape());
            for (std::size_t k = 0; k < noise.size(); ++k) {
                z_r[k] = q_r.mean[k] + std::exp(0.5 * q_r.log_variance[k]) * noise[k];
                z_a[k] = q_a.mean[k] + std::exp(0.5 * q_a.log_variance[k]) * noise[k];
            }
            const Tensor rec_r = decode_and_reconstruct(p, z_r);
            const Tensor rec_a = decode_and_reconstruct(p, z_a);

            RobustnessRow row;
            row.image = i;
            row.seed = s;
            row.final_skl = adv.best_skl;
            row.msssim_inputs = metrics::ms_ssim(x, adv.x_adv, test.width, test.height, cfg.msssim_scales);
            row.msssim_recons = metrics::ms_ssim(rec_r, rec_a, test.width, test.height, cfg.msssim_scales);
            report.rows.push_back(row);
            acc += row.msssim_inputs - row.msssim_recons;
        }
    }
    report.gap = acc / static_cast<double>(n_img * cfg.n_seeds);
    return report;
}

}  // namespace vg::attack
