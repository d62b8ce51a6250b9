#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vg/data.hpp"
#include "vg/metrics.hpp"
#include "vg/optim.hpp"
#include "vg/vae.hpp"

namespace vg::train {

struct TrainConfig {
    std::size_t effective_epochs = 1000;  // T
    std::size_t batch_size = 64;          // M
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double grad_clip_norm = 100.0;  // <= 0 disables clipping
    bool shuffle = true;            // per-epoch shuffle for finite sources
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainTrace {
    std::vector<metrics::GapReport> reports;
    std::vector<double> wall_seconds;    // aligned with reports
    std::vector<double> epoch_loss;      // mean -ELBO per effective epoch
    std::size_t steps_executed = 0;
    std::size_t samples_consumed = 0;
};

// Called at evaluation cadence points; epoch is 1-based, with a final call at
// epoch == T.
using EvalHook = std::function<void(std::size_t epoch, const VaeParameters& params, TrainTrace& trace)>;

// Per-batch transformation applied before the gradient step (mollification).
using BatchTransform = std::function<Tensor(const Tensor& images, std::size_t epoch)>;

// Core loop shared by every variant: T effective epochs of floor(N/M) steps,
// minimizing -mean batch ELBO. update_mask selects trainable tensors in
// VaeParameters::all() order (empty = train everything).
std::pair<VaeParameters, TrainTrace> train_loop(data::DataSource& source, VaeParameters params,
                                                const TrainConfig& cfg, SeededRng rng,
                                                const EvalHook& hook = {},
                                                const std::vector<bool>& update_mask = {},
                                                const BatchTransform& transform = {});

std::pair<VaeParameters, TrainTrace> train_normal(const data::Dataset& dataset, const VaeArchitecture& arch,
                                                  const TrainConfig& cfg, SeededRng rng,
                                                  const EvalHook& hook = {});

// Alg-2 style: consumes the bank (or generative stream) sequentially so each
// effective epoch sees N fresh samples until the bank wraps.
std::pair<VaeParameters, TrainTrace> train_dmaapx(data::DataSource& source, const VaeArchitecture& arch,
                                                  const TrainConfig& cfg, SeededRng rng,
                                                  const EvalHook& hook = {});

enum class RhaPhase2Data {
    PriorSamples,       // decode z ~ p(z) through the frozen decoder mean
    TrainReconstructions  // decode posterior means of training batches
};

// Train normally for T/2 epochs, then freeze the decoder and train only the
// encoder for T/2 epochs on decoder-generated data. T must be even.
std::pair<VaeParameters, TrainTrace> train_rha(const data::Dataset& dataset, const VaeArchitecture& arch,
                                               const TrainConfig& cfg, SeededRng rng,
                                               RhaPhase2Data phase2 = RhaPhase2Data::PriorSamples,
                                               const EvalHook& hook = {});

// train_normal with scheduled input noise (annealed to zero by mid-training)
std::pair<VaeParameters, TrainTrace> train_mollified(const data::Dataset& dataset, const VaeArchitecture& arch,
                                                     const TrainConfig& cfg, double sigma_max, SeededRng rng,
                                                     const EvalHook& hook = {});

}  // namespace vg::train
