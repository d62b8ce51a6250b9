#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vg/data.hpp"
#include "vg/linear_model.hpp"
#include "vg/tensor.hpp"

namespace vg::diff {

// Minimal DDPM: linear beta schedule, fully-connected noise predictor with a
// sinusoidal time embedding, ancestral sampling with clipped x0 prediction.
// Images cross the API in [0,1]; training and sampling run on [-1,1].
struct DiffusionConfig {
    std::size_t timesteps = 200;
    // beta_max chosen so alpha_bar at the final step drops below 0.01 and the
    // terminal distribution is near-standard-normal
    double beta_min = 1e-4;
    double beta_max = 0.05;
    std::size_t hidden_dim = 128;
    std::size_t depth = 2;
    std::size_t time_embed_dim = 16;

    void validate() const;
};

struct DiffusionModel {
    DiffusionConfig cfg;
    std::size_t input_dim = 0;
    std::vector<Tensor> w, b;         // noise-predictor MLP
    std::vector<double> betas;        // beta_1..beta_T (index 0 is beta_1)
    std::vector<double> alpha_bars;   // cumulative products, same indexing

    static DiffusionModel init(std::size_t input_dim, const DiffusionConfig& cfg, SeededRng& rng);
    double alpha_bar(std::size_t t) const;  // t in [1, T]
    std::uint64_t fingerprint() const;

    std::vector<Tensor*> params();
    std::vector<const Tensor*> params() const;
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, returning (x_t, eps).
// Pure schedule arithmetic in whatever domain x0 lives in.
std::pair<Tensor, Tensor> forward_noise(const DiffusionModel& m, const Tensor& x0, std::size_t t,
                                        SeededRng& rng);

// predicted noise for a batch at (uniform) per-row timesteps
Tensor predict_noise(const DiffusionModel& m, const Tensor& x_t, const std::vector<std::size_t>& t_rows);

struct DiffusionTrainConfig {
    std::size_t epochs = 60;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    // cosine decay of the step size down to lr_floor_fraction * learning_rate
    // over the run (1.0 keeps it constant)
    double lr_floor_fraction = 0.1;
    // exponential moving average of the predictor weights; the averaged
    // weights become the returned model (0 disables)
    double ema_decay = 0.999;
};

struct DiffusionTrainResult {
    DiffusionModel model;
    std::vector<double> loss_trace;  // mean loss per epoch
};

// minimizes E || eps - eps_hat(x_t, t) ||^2 with Adam
DiffusionTrainResult train_diffusion(const data::Dataset& dataset, const DiffusionConfig& cfg,
                                     const DiffusionTrainConfig& train_cfg, SeededRng rng);

// denoising-loss value and parameter gradients for one prepared batch
// (exposed so gradient checks can drive the exact training objective)
double denoising_loss(const DiffusionModel& m, const Tensor& x0_batch,
                      const std::vector<std::size_t>& t_rows, const std::vector<Tensor>* noise_rows,
                      SeededRng* rng, std::vector<Tensor>* grads);

// Ancestral reverse chain from pure noise, outputs in [0,1]. Sample i is a
// pure function of rng.child(i), so prefixes agree across different counts.
Tensor sample(const DiffusionModel& m, std::size_t count, SeededRng rng);

// Draws k*n samples, persists them as a VGB1 bank tagged with the model
// fingerprint, and returns the bank.
data::SampleBank build_bank(const DiffusionModel& m, std::size_t k, std::size_t n, SeededRng rng,
                            const std::string& path);

struct C2stConfig {
    // regularized enough that the classifier cannot memorize individual
    // training points, which would bias the paired-data audit below chance
    LogRegConfig classifier{200, 0.05, 0.1};
    double train_fraction = 0.5;
};

// Classifier two-sample test on raw pixels: held-out accuracy of a logistic
// regression separating real from synthetic. Near 0.5 means indistinguishable.
double c2st_audit(const data::Dataset& real, const data::SampleBank& synthetic, const C2stConfig& cfg,
                  SeededRng rng);

// ---- checkpoint: "VGD1" | u32 json_len | config json | tensors ----
void save_diffusion(const std::string& path, const DiffusionModel& m);
DiffusionModel load_diffusion(const std::string& path);

}  // namespace vg::diff
