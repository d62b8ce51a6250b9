#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vg/data.hpp"
#include "vg/vae.hpp"

namespace vg::attack {

struct AttackConfig {
    double delta = 0.1;        // L-inf radius
    double eta = 1.0;          // step size
    std::size_t steps = 50;    // PGD iterations (n_eps)
    std::size_t n_images = 50; // real images (n_r)
    std::size_t n_seeds = 10;  // attack seeds per image (n_a)
    std::size_t msssim_scales = 3;

    void validate() const;
};

// symmetric KL between factorized Gaussians
double skl(const GaussianPosterior& q1, const GaussianPosterior& q2);

struct AttackResult {
    Tensor x_adv;                    // best iterate
    double best_skl = 0.0;
    std::vector<double> skl_trace;   // objective at each evaluated iterate
    // worst-case bounds over every evaluated iterate
    double max_eps_linf = 0.0;
    double min_pixel = 0.0;
    double max_pixel = 0.0;
};

// Projected gradient ascent on SKL(q(.|x+eps) || q(.|x)). eps starts uniform
// in the delta-ball (a zero start has an exactly zero gradient for any smooth
// encoder) and every step is projected into the ball and the pixel range.
AttackResult find_adversarial(const Tensor& x_real, const VaeParameters& p, const AttackConfig& cfg,
                              SeededRng rng);

struct RobustnessRow {
    std::size_t image = 0;
    std::size_t seed = 0;
    double final_skl = 0.0;
    double msssim_inputs = 0.0;
    double msssim_recons = 0.0;
};

struct RobustnessReport {
    double gap = 0.0;  // mean of (msssim_inputs - msssim_recons)
    std::vector<RobustnessRow> rows;
    static std::string csv_header();
    std::string csv() const;
};

// Averages over the first n_images test images and n_seeds attack seeds.
// Clean and attacked reconstructions share one posterior noise draw per
// (image, seed), so delta=0 gives exactly zero gap.
RobustnessReport robustness_gap(const VaeParameters& p, const data::Dataset& test, const AttackConfig& cfg,
                                SeededRng rng);

}  // namespace vg::attack
