#include "vg/train.hpp"

#include <cmath>

namespace vg::train {

void TrainConfig::validate() const {
    if (effective_epochs == 0) throw ConfigError("training needs T >= 1");
    if (batch_size == 0) throw ConfigError("training needs M >= 1");
    if (learning_rate <= 0) throw ConfigError("learning rate must be positive");
}

std::pair<VaeParameters, TrainTrace> train_loop(data::DataSource& source, VaeParameters params,
                                                const TrainConfig& cfg, SeededRng rng, const EvalHook& hook,
                                                const std::vector<bool>& update_mask,
                                                const BatchTransform& transform) {
    cfg.validate();
    const std::size_t n = source.epoch_size();
    const std::size_t m = std::min(cfg.batch_size, n);
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, n / m);
    const std::size_t d_z = params.arch.latent_dim();

    SeededRng noise_rng = rng.child(11);
    Optimizer opt(cfg.optimizer, cfg.learning_rate);
    TrainTrace trace;

    for (std::size_t epoch = 1; epoch <= cfg.effective_epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (std::size_t i = 0; i < steps_per_epoch; ++i) {
            data::Batch batch = source.next_batch(m);
            Tensor images = transform ? transform(batch.images, epoch - 1) : batch.images;

            double loss_value = 0.0;
            std::vector<Tensor> grads;
            try {
                Tape t(true);
                TapeVae model = TapeVae::make(t, params, true, true);
                const Tensor eps = Tensor::normal({m, d_z}, 0.0, 1.0, noise_rng);
                Tape::Var rows = elbo_rows_tape(t, model, images, {eps});
                Tape::Var loss = t.scale(t.sum(rows), -1.0 / static_cast<double>(m));
                loss_value = t.value(loss)[0];
                t.backward(loss);
                grads.reserve(model.enc_w.size() * 2 + model.dec_w.size() * 2);
                for (std::size_t l = 0; l < model.enc_w.size(); ++l) {
                    grads.push_back(t.gradient(model.enc_w[l]));
                    grads.push_back(t.gradient(model.enc_b[l]));
                }
                for (std::size_t l = 0; l < model.dec_w.size(); ++l) {
                    grads.push_back(t.gradient(model.dec_w[l]));
                    grads.push_back(t.gradient(model.dec_b[l]));
                }
            } catch (const NumericError& e) {
                throw NumericError("training aborted at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(i) + ": " + e.what());
            }

            clip_global_norm(grads, cfg.grad_clip_norm);
            std::vector<Tensor*> tensors = params.all();
            opt.step(tensors, grads, update_mask.empty() ? nullptr : &update_mask);

            epoch_loss += loss_value;
            trace.steps_executed += 1;
            trace.samples_consumed += m;
        }
        trace.epoch_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
        if (hook) hook(epoch, params, trace);
    }
    return {std::move(params), std::move(trace)};
}

std::pair<VaeParameters, TrainTrace> train_normal(const data::Dataset& dataset, const VaeArchitecture& arch,
                                                  const TrainConfig& cfg, SeededRng rng, const EvalHook& hook) {
    if (dataset.size() == 0) throw ConfigError("train_normal needs a non-empty dataset");
    SeededRng init_rng = rng.child(1);
    VaeParameters params = VaeParameters::init(arch, init_rng);
    data::FiniteSource source(dataset, rng.child(2), cfg.shuffle);
    return train_loop(source, std::move(params), cfg, rng.child(3), hook);
}

std::pair<VaeParameters, TrainTrace> train_dmaapx(data::DataSource& source, const VaeArchitecture& arch,
                                                  const TrainConfig& cfg, SeededRng rng, const EvalHook& hook) {
    SeededRng init_rng = rng.child(1);
    VaeParameters params = VaeParameters::init(arch, init_rng);
    return train_loop(source, std::move(params), cfg, rng.child(3), hook);
}

namespace {

// phase-2 RHA stream: fresh decoder outputs every batch
class DecoderSource : public data::DataSource {
public:
    DecoderSource(VaeParameters frozen, std::size_t epoch_n, SeededRng rng)
        : frozen_(std::move(frozen)), epoch_n_(epoch_n), rng_(rng) {}

    data::Batch next_batch(std::size_t m) override {
        Tensor z = Tensor::normal({m, frozen_.arch.latent_dim()}, 0.0, 1.0, rng_);
        data::Batch b;
        b.images = decode_and_reconstruct(frozen_, z);
        b.provenance.assign(m, 0);
        return b;
    }
    std::size_t epoch_size() const override { return epoch_n_; }

private:
    VaeParameters frozen_;
    std::size_t epoch_n_;
    SeededRng rng_;
};

// phase-2 alternative: reconstructions of training batches, generated by the
// phase-1 model (the decoder is frozen there anyway; fixing the encoder too
// keeps the phase-2 data distribution stationary)
class ReconstructionSource : public data::DataSource {
public:
    ReconstructionSource(data::FiniteSource inner, VaeParameters frozen)
        : inner_(std::move(inner)), frozen_(std::move(frozen)) {}

    data::Batch next_batch(std::size_t m) override {
        data::Batch b = inner_.next_batch(m);
        const PosteriorBatch q = encode(frozen_, b.images);
        b.images = decode_and_reconstruct(frozen_, q.mean);
        b.provenance.assign(m, 0);
        return b;
    }
    std::size_t epoch_size() const override { return inner_.epoch_size(); }

private:
    data::FiniteSource inner_;
    VaeParameters frozen_;
};

}  // namespace

std::pair<VaeParameters, TrainTrace> train_rha(const data::Dataset& dataset, const VaeArchitecture& arch,
                                               const TrainConfig& cfg, SeededRng rng, RhaPhase2Data phase2,
                                               const EvalHook& hook) {
    if (cfg.effective_epochs % 2 != 0) throw ConfigError("RHA needs an even number of epochs");
    TrainConfig half_cfg = cfg;
    half_cfg.effective_epochs = cfg.effective_epochs / 2;

    auto [params, trace1] = train_normal(dataset, arch, half_cfg, rng, hook);

    // phase 2: decoder frozen, encoder trained on decoder-generated data
    std::vector<bool> mask;
    for (std::size_t l = 0; l < params.enc_w.size(); ++l) {
        mask.push_back(true);
        mask.push_back(true);
    }
    for (std::size_t l = 0; l < params.dec_w.size(); ++l) {
        mask.push_back(false);
        mask.push_back(false);
    }

    std::pair<VaeParameters, TrainTrace> phase2_result = [&] {
        EvalHook shifted_hook;
        if (hook)
            shifted_hook = [&hook, &half_cfg](std::size_t epoch, const VaeParameters& p, TrainTrace& tr) {
                hook(epoch + half_cfg.effective_epochs, p, tr);
            };
        if (phase2 == RhaPhase2Data::PriorSamples) {
            DecoderSource source(params, dataset.size(), rng.child(4));
            return train_loop(source, std::move(params), half_cfg, rng.child(5), shifted_hook, mask);
        }
        data::FiniteSource inner(dataset, rng.child(4), cfg.shuffle);
        ReconstructionSource source(std::move(inner), params);
        return train_loop(source, std::move(params), half_cfg, rng.child(5), shifted_hook, mask);
    }();

    TrainTrace trace = std::move(trace1);
    TrainTrace& t2 = phase2_result.second;
    trace.reports.insert(trace.reports.end(), t2.reports.begin(), t2.reports.end());
    trace.wall_seconds.insert(trace.wall_seconds.end(), t2.wall_seconds.begin(), t2.wall_seconds.end());
    trace.epoch_loss.insert(trace.epoch_loss.end(), t2.epoch_loss.begin(), t2.epoch_loss.end());
    trace.steps_executed += t2.steps_executed;
    trace.samples_consumed += t2.samples_consumed;
    return {std::move(phase2_result.first), std::move(trace)};
}

std::pair<VaeParameters, TrainTrace> train_mollified(const data::Dataset& dataset, const VaeArchitecture& arch,
                                                     const TrainConfig& cfg, double sigma_max, SeededRng rng,
                                                     const EvalHook& hook) {
    if (sigma_max < 0) throw ConfigError("mollification sigma_max must be >= 0");
    SeededRng init_rng = rng.child(1);
    VaeParameters params = VaeParameters::init(arch, init_rng);
    data::FiniteSource source(dataset, rng.child(2), cfg.shuffle);
    SeededRng noise_rng = rng.child(7);
    BatchTransform transform;
    if (sigma_max > 0)
        transform = [&noise_rng, &cfg, sigma_max](const Tensor& images, std::size_t epoch) {
            return data::mollified_batch(images, epoch, cfg.effective_epochs, sigma_max, noise_rng);
        };
    return train_loop(source, std::move(params), cfg, rng.child(3), hook, {}, transform);
}

}  // namespace vg::train
