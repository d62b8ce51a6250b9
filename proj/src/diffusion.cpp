#include "vg/diffusion.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "json.hpp"
#include "vg/optim.hpp"
#include "vg/tape.hpp"

namespace vg::diff {

void DiffusionConfig::validate() const {
    if (timesteps == 0) throw ConfigError("diffusion needs timesteps >= 1");
    if (beta_min <= 0 || beta_max >= 1 || beta_min > beta_max) throw ConfigError("diffusion beta schedule invalid");
    if (hidden_dim == 0 || depth == 0) throw ConfigError("diffusion predictor needs hidden layers");
    if (time_embed_dim == 0 || time_embed_dim % 2 != 0) throw ConfigError("time embedding dim must be even");
}

DiffusionModel DiffusionModel::init(std::size_t input_dim, const DiffusionConfig& cfg, SeededRng& rng) {
    cfg.validate();
    if (input_dim == 0) throw ConfigError("diffusion input_dim must be positive");
    DiffusionModel m;
    m.cfg = cfg;
    m.input_dim = input_dim;
    m.betas.resize(cfg.timesteps);
    m.alpha_bars.resize(cfg.timesteps);
    double prod = 1.0;
    for (std::size_t i = 0; i < cfg.timesteps; ++i) {
        const double frac = cfg.timesteps == 1 ? 0.0 : static_cast<double>(i) / (cfg.timesteps - 1);
        m.betas[i] = cfg.beta_min + (cfg.beta_max - cfg.beta_min) * frac;
        prod *= 1.0 - m.betas[i];
        m.alpha_bars[i] = prod;
    }

    // hidden stack plus a learned linear skip from [x_t, temb] to the output;
    // the skip carries the near-linear part of the noise target
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    dims.emplace_back(input_dim + cfg.time_embed_dim, cfg.hidden_dim);
    for (std::size_t i = 1; i < cfg.depth; ++i) dims.emplace_back(cfg.hidden_dim, cfg.hidden_dim);
    dims.emplace_back(cfg.hidden_dim, input_dim);
    dims.emplace_back(input_dim + cfg.time_embed_dim, input_dim);  // skip
    SeededRng wrng = rng.child(0xd1f);
    for (auto [in, out] : dims) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        m.w.push_back(Tensor::uniform({in, out}, -bound, bound, wrng));
        m.b.push_back(Tensor::zeros({out}));
    }
    return m;
}

double DiffusionModel::alpha_bar(std::size_t t) const {
    if (t < 1 || t > cfg.timesteps) throw ConfigError("timestep out of range [1, T]");
    return alpha_bars[t - 1];
}

std::uint64_t DiffusionModel::fingerprint() const {
    std::uint64_t h = fnv1a64("ddpm", 4);
    h = fnv1a64(&input_dim, sizeof(input_dim), h);
    h = fnv1a64(&cfg.timesteps, sizeof(cfg.timesteps), h);
    h = fnv1a64(&cfg.beta_min, sizeof(double), h);
    h = fnv1a64(&cfg.beta_max, sizeof(double), h);
    for (const Tensor* t : params()) h = fnv1a64(t->data(), t->size() * sizeof(double), h);
    return h;
}

std::vector<Tensor*> DiffusionModel::params() {
    std::vector<Tensor*> v;
    for (std::size_t i = 0; i < w.size(); ++i) {
        v.push_back(&w[i]);
        v.push_back(&b[i]);
    }
    return v;
}

std::vector<const Tensor*> DiffusionModel::params() const {
    std::vector<const Tensor*> v;
    for (std::size_t i = 0; i < w.size(); ++i) {
        v.push_back(&w[i]);
        v.push_back(&b[i]);
    }
    return v;
}

std::pair<Tensor, Tensor> forward_noise(const DiffusionModel& m, const Tensor& x0, std::size_t t,
                                        SeededRng& rng) {
    const double ab = m.alpha_bar(t);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    Tensor eps(x0.shape());
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
    Tensor xt(x0.shape());
    for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = sa * x0[i] + sn * eps[i];
    xt.require_finite("forward_noise");
    return {std::move(xt), std::move(eps)};
}

namespace {

Tensor time_embedding_rows(const DiffusionModel& m, const std::vector<std::size_t>& t_rows) {
    const std::size_t e = m.cfg.time_embed_dim, half = e / 2;
    Tensor emb({t_rows.size(), e});
    for (std::size_t i = 0; i < t_rows.size(); ++i) {
        const double t = static_cast<double>(t_rows[i]);
        for (std::size_t j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
            emb.at2(i, 2 * j) = std::sin(t * freq);
            emb.at2(i, 2 * j + 1) = std::cos(t * freq);
        }
    }
    return emb;
}

Tape::Var predictor_forward(Tape& t, const DiffusionModel& m, const std::vector<Tape::Var>& ws,
                            const std::vector<Tape::Var>& bs, const Tensor& x_t, const Tensor& temb) {
    const std::size_t skip = ws.size() - 1;  // last layer pair is the linear skip
    Tape::Var in = t.concat_cols(t.constant(x_t), t.constant(temb));
    Tape::Var h = in;
    for (std::size_t i = 0; i < skip; ++i) {
        h = t.add_bias(t.matmul(h, ws[i]), bs[i]);
        if (i + 1 < skip) h = t.relu(h);
    }
    return t.add(h, t.add_bias(t.matmul(in, ws[skip]), bs[skip]));
}

}  // namespace

Tensor predict_noise(const DiffusionModel& m, const Tensor& x_t, const std::vector<std::size_t>& t_rows) {
    if (x_t.rank() != 2 || x_t.dim(1) != m.input_dim || x_t.dim(0) != t_rows.size())
        throw ShapeError("predict_noise: bad batch shape");
    Tape tape(false);
    std::vector<Tape::Var> ws, bs;
    for (std::size_t i = 0; i < m.w.size(); ++i) {
        ws.push_back(tape.constant(m.w[i]));
        bs.push_back(tape.constant(m.b[i]));
    }
    return tape.value(predictor_forward(tape, m, ws, bs, x_t, time_embedding_rows(m, t_rows)));
}

double denoising_loss(const DiffusionModel& m, const Tensor& x0_batch,
                      const std::vector<std::size_t>& t_rows, const std::vector<Tensor>* noise_rows,
                      SeededRng* rng, std::vector<Tensor>* grads) {
    const std::size_t bsz = x0_batch.dim(0), d = m.input_dim;
    if (t_rows.size() != bsz) throw ShapeError("denoising_loss: timestep rows misaligned");

    Tensor xt({bsz, d}), eps({bsz, d});
    for (std::size_t i = 0; i < bsz; ++i) {
        const double ab = m.alpha_bar(t_rows[i]);
        const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
        for (std::size_t j = 0; j < d; ++j) {
            const double e = noise_rows ? (*noise_rows)[i][j] : rng->normal();
            eps.at2(i, j) = e;
            xt.at2(i, j) = sa * x0_batch.at2(i, j) + sn * e;
        }
    }

    Tape tape(grads != nullptr);
    std::vector<Tape::Var> ws, bs;
    for (std::size_t i = 0; i < m.w.size(); ++i) {
        ws.push_back(grads ? tape.leaf(m.w[i]) : tape.constant(m.w[i]));
        bs.push_back(grads ? tape.leaf(m.b[i]) : tape.constant(m.b[i]));
    }
    Tape::Var pred = predictor_forward(tape, m, ws, bs, xt, time_embedding_rows(m, t_rows));
    Tape::Var loss = tape.mean(tape.square(tape.sub(pred, tape.constant(eps))));
    const double value = tape.value(loss)[0];
    if (grads) {
        tape.backward(loss);
        grads->clear();
        for (std::size_t i = 0; i < ws.size(); ++i) {
            grads->push_back(tape.gradient(ws[i]));
            grads->push_back(tape.gradient(bs[i]));
        }
    }
    return value;
}

DiffusionTrainResult train_diffusion(const data::Dataset& dataset, const DiffusionConfig& cfg,
                                     const DiffusionTrainConfig& train_cfg, SeededRng rng) {
    if (dataset.size() == 0) throw ConfigError("train_diffusion needs a non-empty dataset");
    SeededRng init_rng = rng.child(1);
    DiffusionTrainResult out;
    out.model = DiffusionModel::init(dataset.input_dim(), cfg, init_rng);
    DiffusionModel& m = out.model;

    // [0,1] -> [-1,1]
    Tensor x01 = dataset.images;
    Tensor xpm(x01.shape());
    for (std::size_t i = 0; i < x01.size(); ++i) xpm[i] = 2.0 * x01[i] - 1.0;
    data::Dataset scaled;
    scaled.images = std::move(xpm);
    scaled.split = dataset.split;

    data::FiniteSource source(scaled, rng.child(2), true);
    SeededRng step_rng = rng.child(3);
    Optimizer opt(OptimizerKind::Adam, train_cfg.learning_rate);

    const bool use_ema = train_cfg.ema_decay > 0.0;
    std::vector<Tensor> ema;
    std::size_t ema_steps = 0;
    if (use_ema)
        for (const Tensor* t : m.params()) ema.push_back(*t);

    const std::size_t batch = std::min(train_cfg.batch_size, dataset.size());
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, dataset.size() / batch);
    const double total_steps = static_cast<double>(train_cfg.epochs * steps_per_epoch);
    const double lr_floor = std::clamp(train_cfg.lr_floor_fraction, 0.0, 1.0);
    std::size_t step_index = 0;
    for (std::size_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            if (lr_floor < 1.0) {
                const double frac = static_cast<double>(step_index++) / total_steps;
                const double scale = lr_floor + (1.0 - lr_floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
                opt.set_learning_rate(train_cfg.learning_rate * scale);
            }
            data::Batch b = source.next_batch(batch);
            std::vector<std::size_t> t_rows(batch);
            for (std::size_t i = 0; i < batch; ++i)
                t_rows[i] = 1 + step_rng.uniform_index(cfg.timesteps);
            std::vector<Tensor> grads;
            const double loss = denoising_loss(m, b.images, t_rows, nullptr, &step_rng, &grads);
            if (!std::isfinite(loss))
                throw NumericError("diffusion training diverged at epoch " + std::to_string(epoch));
            epoch_loss += loss;
            std::vector<Tensor*> params = m.params();
            opt.step(params, grads);
            if (use_ema) {
                // warmup ramp keeps the average useful on short runs
                ++ema_steps;
                const double d = std::min(train_cfg.ema_decay,
                                          (1.0 + ema_steps) / (10.0 + ema_steps));
                for (std::size_t p = 0; p < params.size(); ++p) {
                    Tensor& avg = ema[p];
                    const Tensor& cur = *params[p];
                    for (std::size_t j = 0; j < avg.size(); ++j) avg[j] = d * avg[j] + (1.0 - d) * cur[j];
                }
            }
        }
        out.loss_trace.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    }
    if (use_ema) {
        auto params = m.params();
        for (std::size_t p = 0; p < params.size(); ++p) *params[p] = ema[p];
    }
    return out;
}

namespace {

// one chunk of the reverse chain; sample i depends only on rng.child(i)
void sample_chunk(const DiffusionModel& m, std::size_t begin, std::size_t bsz, const SeededRng& rng,
                  Tensor& out) {
    const std::size_t d = m.input_dim, t_max = m.cfg.timesteps;
    {
        std::vector<SeededRng> streams;
        streams.reserve(bsz);
        for (std::size_t i = 0; i < bsz; ++i) streams.push_back(rng.child(begin + i));

        Tensor x({bsz, d});
        for (std::size_t i = 0; i < bsz; ++i)
            for (std::size_t j = 0; j < d; ++j) x.at2(i, j) = streams[i].normal();

        for (std::size_t t = t_max; t >= 1; --t) {
            const std::vector<std::size_t> t_rows(bsz, t);
            const Tensor eps_hat = predict_noise(m, x, t_rows);
            const double ab = m.alpha_bar(t);
            const double ab_prev = t > 1 ? m.alpha_bar(t - 1) : 1.0;
            const double beta = m.betas[t - 1];
            const double alpha = 1.0 - beta;
            // posterior q(x_{t-1} | x_t, x0_hat) with x0_hat clipped to [-1,1]
            const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
            const double ct = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
            const double post_var = t > 1 ? (1.0 - ab_prev) / (1.0 - ab) * beta : 0.0;
            const double post_sd = std::sqrt(std::max(post_var, 0.0));
            for (std::size_t i = 0; i < bsz; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double xt = x.at2(i, j);
                    double x0_hat = (xt - std::sqrt(1.0 - ab) * eps_hat.at2(i, j)) / std::sqrt(ab);
                    x0_hat = std::clamp(x0_hat, -1.0, 1.0);
                    double mean = c0 * x0_hat + ct * xt;
                    if (t > 1) mean += post_sd * streams[i].normal();
                    x.at2(i, j) = mean;
                }
            }
            x.require_finite("diffusion reverse chain");
        }
        for (std::size_t i = 0; i < bsz; ++i)
            for (std::size_t j = 0; j < d; ++j)
                out.at2(begin + i, j) = std::clamp(0.5 * (x.at2(i, j) + 1.0), 0.0, 1.0);
    }
}

}  // namespace

Tensor sample(const DiffusionModel& m, std::size_t count, SeededRng rng) {
    Tensor out({count, m.input_dim});
    constexpr std::size_t kChunk = 256;
    std::vector<std::pair<std::size_t, std::size_t>> chunks;
    for (std::size_t begin = 0; begin < count; begin += kChunk)
        chunks.emplace_back(begin, std::min(kChunk, count - begin));

    const std::size_t workers =
        std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), chunks.size());
    if (workers <= 1) {
        for (auto [begin, bsz] : chunks) sample_chunk(m, begin, bsz, rng, out);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= chunks.size()) return;
                sample_chunk(m, chunks[i].first, chunks[i].second, rng, out);
            }
        });
    for (std::thread& t : pool) t.join();
    return out;
}

data::SampleBank build_bank(const DiffusionModel& m, std::size_t k, std::size_t n, SeededRng rng,
                            const std::string& path) {
    if (k == 0 || n == 0) throw ConfigError("bank needs k >= 1 and n >= 1");
    data::SampleBank bank;
    bank.samples = sample(m, k * n, rng);
    bank.k = k;
    bank.n = n;
    bank.fingerprint = m.fingerprint();
    bank.seed = rng.seed();
    if (!path.empty()) data::save_bank(path, bank);
    return bank;
}

double c2st_audit(const data::Dataset& real, const data::SampleBank& synthetic, const C2stConfig& cfg,
                  SeededRng rng) {
    if (real.size() == 0 || synthetic.size() == 0) throw ConfigError("c2st needs non-empty sample sets");
    const std::size_t per_class = std::min(real.size(), synthetic.size());
    const std::size_t d = real.input_dim();
    if (synthetic.samples.dim(1) != d) throw ShapeError("c2st sample dims differ");

    // balanced pool: label 1 = real, 0 = synthetic
    Tensor pool({2 * per_class, d});
    std::vector<int> labels(2 * per_class);
    for (std::size_t i = 0; i < per_class; ++i) {
        std::memcpy(pool.data() + i * d, real.images.data() + i * d, d * sizeof(double));
        labels[i] = 1;
        std::memcpy(pool.data() + (per_class + i) * d, synthetic.samples.data() + i * d, d * sizeof(double));
        labels[per_class + i] = 0;
    }
    std::vector<std::size_t> order(2 * per_class);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);

    const std::size_t n_train = static_cast<std::size_t>(order.size() * cfg.train_fraction);
    if (n_train == 0 || n_train == order.size()) throw ConfigError("c2st split degenerates");
    Tensor train_x({n_train, d}), test_x({order.size() - n_train, d});
    std::vector<int> train_y(n_train), test_y(order.size() - n_train);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::size_t src = order[i];
        if (i < n_train) {
            std::memcpy(train_x.data() + i * d, pool.data() + src * d, d * sizeof(double));
            train_y[i] = labels[src];
        } else {
            std::memcpy(test_x.data() + (i - n_train) * d, pool.data() + src * d, d * sizeof(double));
            test_y[i - n_train] = labels[src];
        }
    }
    bool has0 = false, has1 = false;
    for (int y : train_y) (y ? has1 : has0) = true;
    if (!has0 || !has1) throw ConfigError("c2st train split is single-class");

    const Standardizer st = Standardizer::fit(train_x);
    const LogisticRegressionModel model =
        fit_logistic_regression(st.apply(train_x), train_y, 2, cfg.classifier);
    return classification_accuracy(model, st.apply(test_x), test_y);
}

void save_diffusion(const std::string& path, const DiffusionModel& m) {
    nlohmann::json j;
    j["timesteps"] = m.cfg.timesteps;
    j["beta_min"] = m.cfg.beta_min;
    j["beta_max"] = m.cfg.beta_max;
    j["hidden_dim"] = m.cfg.hidden_dim;
    j["depth"] = m.cfg.depth;
    j["time_embed_dim"] = m.cfg.time_embed_dim;
    j["input_dim"] = m.input_dim;
    const std::string desc = j.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write("VGD1", 4);
    const std::uint32_t len = static_cast<std::uint32_t>(desc.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(desc.data(), static_cast<std::streamsize>(desc.size()));
    for (const Tensor* t : m.params()) write_tensor(out, *t);
    if (!out) throw IoError("diffusion checkpoint write failed");
}

DiffusionModel load_diffusion(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "VGD1", 4) != 0) throw IoError("bad diffusion magic (expected VGD1)");
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    if (!in || len > (1u << 20)) throw IoError("bad diffusion descriptor length");
    std::string desc(len, '\0');
    in.read(desc.data(), len);
    nlohmann::json j = nlohmann::json::parse(desc);
    DiffusionConfig cfg;
    cfg.timesteps = j.at("timesteps").get<std::size_t>();
    cfg.beta_min = j.at("beta_min").get<double>();
    cfg.beta_max = j.at("beta_max").get<double>();
    cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    cfg.depth = j.at("depth").get<std::size_t>();
    cfg.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
    SeededRng dummy(0);
    DiffusionModel m = DiffusionModel::init(j.at("input_dim").get<std::size_t>(), cfg, dummy);
    for (Tensor* t : m.params()) *t = read_tensor(in);
    return m;
}

}  // namespace vg::diff
