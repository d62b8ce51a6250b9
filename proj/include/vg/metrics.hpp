#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vg/data.hpp"
#include "vg/vae.hpp"

namespace vg::metrics {

// One evaluation point: the three gaps plus their ELBO terms.
struct GapReport {
    std::size_t epoch = 0;
    std::uint64_t seed = 0;
    double elbo_train = 0.0;
    double elbo_test = 0.0;
    double elbo_star = 0.0;
    double gap_generalization = 0.0;  // nats
    double gap_amortization = 0.0;    // nats
    double gap_robustness = 0.0;      // MS-SSIM units
    bool has_amortization = false;
    bool has_robustness = false;

    static std::string csv_header();
    // wall_seconds is the only non-reproducible field and stays last
    std::string csv_row(double wall_seconds) const;
};

struct SviConfig {
    std::size_t steps = 300;
    double step_size = 1e-2;  // plain gradient ascent
    std::size_t n_mc = 1;
};

// Frozen per-example evaluation noise: example i always sees the draws of
// base.child(i), so repeated evaluations (and train-vs-test comparisons over
// aligned indices) share one noise tensor per example.
std::vector<Tensor> frozen_noise(std::size_t n_mc, std::size_t count, std::size_t dim, const SeededRng& base,
                                 const std::vector<std::size_t>* example_indices = nullptr);

// mean per-example ELBO over the full dataset, n_mc samples each
double dataset_elbo(const VaeParameters& p, const data::Dataset& dataset, std::size_t n_mc, SeededRng rng);

// Eq-style gap: dataset_elbo(train) - dataset_elbo(test) under one shared
// noise stream, so identical datasets give exactly zero.
double generalization_gap(const VaeParameters& p, const data::Dataset& train, const data::Dataset& test,
                          std::size_t n_mc, SeededRng rng);

struct SviResult {
    GaussianPosterior q_star;
    double elbo_star = 0.0;
    double elbo_init = 0.0;            // encoder-initialized ELBO under the same noise
    std::vector<double> trace;         // objective per step (before running max)
};

// Per-example variational refinement: gradient ascent on the ELBO over
// (mu, log-variance) with the decoder frozen and reparameterization noise
// frozen across steps. Returns the running-best iterate, so
// elbo_star >= elbo_init always.
SviResult svi_refine(const VaeParameters& p, const Tensor& x_row, const SviConfig& cfg, SeededRng rng);

struct SviBatchResult {
    PosteriorBatch q_star;
    Tensor elbo_star_rows;  // [B]
    Tensor elbo_init_rows;  // [B]
};
SviBatchResult svi_refine_batch(const VaeParameters& p, const Tensor& x, const SviConfig& cfg,
                                const std::vector<Tensor>& noise, std::vector<double>* trace_row0 = nullptr);

// mean over the test set of (elbo_star - encoder elbo); >= 0 by construction
double amortization_gap(const VaeParameters& p, const data::Dataset& test, const SviConfig& cfg,
                        std::size_t n_mc, SeededRng rng);

// Multi-scale SSIM with Gaussian windows (std 1.5, span 11 where the image
// permits), dyadic downsampling, luminance at the coarsest scale, and the
// standard weight vector truncated to `scales` and renormalized. Per-scale
// means are floored at zero before exponentiation.
double ms_ssim(const Tensor& a, const Tensor& b, std::size_t width, std::size_t height, std::size_t scales = 3);
const std::vector<double>& ms_ssim_standard_weights();

// 10*log10(peak^2 / MSE); +infinity sentinel when MSE is exactly zero
double psnr(const Tensor& a, const Tensor& b, double peak);

struct TrainingDistributionElbo {
    double value = 0.0;
    std::size_t samples = 0;
    // ELBO values taken on different source distributions are bounded by
    // different entropies and must not be compared across sources.
    bool entropy_caveat = true;
};
TrainingDistributionElbo training_distribution_elbo(const VaeParameters& p, data::DataSource& source,
                                                    std::size_t n_samples, std::size_t n_mc, SeededRng rng);

// z_a = alpha*z0 + (1-alpha)*z1 over steps+1 uniform alphas; reports
// log q_phi(z_a | reconstruction(z_a)).
std::vector<std::pair<double, double>> latent_smoothness_scan(const Tensor& x0, const Tensor& x1,
                                                              const VaeParameters& p, std::size_t steps);

// Gaussian log density under a factorized posterior (shared by the scan and
// its tests).
double gaussian_log_density(const Tensor& z, const GaussianPosterior& q);

}  // namespace vg::metrics
