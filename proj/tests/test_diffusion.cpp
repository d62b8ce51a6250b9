#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "oracles.hpp"
#include "vg/diffusion.hpp"

using namespace vg;
using namespace vg::diff;

namespace {

DiffusionConfig tiny_cfg(std::size_t timesteps = 50) {
    DiffusionConfig c;
    c.timesteps = timesteps;
    c.hidden_dim = 32;
    c.depth = 2;
    c.time_embed_dim = 8;
    return c;
}

}  // namespace

TEST_CASE("beta schedule sanity") {
    SeededRng rng(1);
    DiffusionConfig cfg;  // defaults: T=200, beta 1e-4..0.05
    DiffusionModel m = DiffusionModel::init(4, cfg, rng);
    double prev = 1.0;
    for (std::size_t t = 1; t <= cfg.timesteps; ++t) {
        const double ab = m.alpha_bar(t);
        CHECK(ab < prev);  // strictly decreasing
        CHECK(m.betas[t - 1] > 0.0);
        CHECK(m.betas[t - 1] < 1.0);
        prev = ab;
    }
    CHECK(m.alpha_bar(cfg.timesteps) < 0.01);  // terminal distribution near N(0, I)
    CHECK_THROWS_AS(m.alpha_bar(0), ConfigError);
    CHECK_THROWS_AS(m.alpha_bar(cfg.timesteps + 1), ConfigError);
}

TEST_CASE("forward noise moments") {
    SeededRng rng(2);
    DiffusionModel m = DiffusionModel::init(4, tiny_cfg(), rng);
    const Tensor x0({1, 4}, {0.8, -0.5, 0.3, 0.1});

    // t=1: x_t stays within the sqrt(beta_1) scale of x0
    SeededRng nrng(3, 1);
    auto [x1, eps1] = forward_noise(m, x0, 1, nrng);
    const double sb = std::sqrt(m.betas[0]);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(x1[i] - x0[i]) < 6.0 * sb);

    // moment checks at a mid timestep
    const std::size_t t = 25;
    const double ab = m.alpha_bar(t);
    const std::size_t n = 100000;
    double mean_acc = 0.0, var_acc = 0.0;
    SeededRng mrng(4, 2);
    for (std::size_t i = 0; i < n; ++i) {
        auto [xt, eps] = forward_noise(m, x0, t, mrng);
        const double centered = xt[0] - std::sqrt(ab) * x0[0];
        mean_acc += xt[0];
        var_acc += centered * centered;
    }
    const double mean = mean_acc / n;
    const double var = var_acc / n;
    CHECK(std::abs(var - (1.0 - ab)) / (1.0 - ab) < 0.02);
    const double se = std::sqrt((1.0 - ab) / n);
    CHECK(std::abs(mean - std::sqrt(ab) * x0[0]) < 4.0 * se);

    CHECK_THROWS_AS(forward_noise(m, x0, 0, nrng), ConfigError);
}

TEST_CASE("ideal denoising inverts the forward process") {
    SeededRng rng(5);
    DiffusionModel m = DiffusionModel::init(6, tiny_cfg(), rng);
    Tensor x0 = Tensor::uniform({1, 6}, -1, 1, rng);
    SeededRng nrng(6, 3);
    for (std::size_t t : {1ul, 10ul, 50ul}) {
        auto [xt, eps] = forward_noise(m, x0, t, nrng);
        const double ab = m.alpha_bar(t);
        for (std::size_t i = 0; i < 6; ++i) {
            const double rec = (xt[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
            CHECK(rec == doctest::Approx(x0[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("denoising loss gradient matches finite differences") {
    SeededRng rng(7);
    DiffusionConfig cfg = tiny_cfg(10);
    cfg.hidden_dim = 6;
    cfg.time_embed_dim = 4;
    DiffusionModel m = DiffusionModel::init(3, cfg, rng);
    Tensor x0 = Tensor::uniform({2, 3}, -1, 1, rng);
    const std::vector<std::size_t> t_rows = {2, 7};
    std::vector<Tensor> noise_rows;
    SeededRng nrng(8, 4);
    for (int i = 0; i < 2; ++i) noise_rows.push_back(Tensor::normal({3}, 0, 1, nrng));

    std::vector<Tensor> grads;
    denoising_loss(m, x0, t_rows, &noise_rows, nullptr, &grads);

    // finite differences over every predictor parameter
    auto params = m.params();
    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t j = 0; j < params[pi]->size(); ++j) {
            const double orig = (*params[pi])[j];
            (*params[pi])[j] = orig + h;
            const double fp = denoising_loss(m, x0, t_rows, &noise_rows, nullptr, nullptr);
            (*params[pi])[j] = orig - h;
            const double fm = denoising_loss(m, x0, t_rows, &noise_rows, nullptr, nullptr);
            (*params[pi])[j] = orig;
            const double central = (fp - fm) / (2 * h);
            const double a = grads[pi][j];
            worst = std::max(worst, std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12));
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("training reduces held-out denoising loss") {
    SeededRng rng(9);
    data::GmmGenerator gen = data::GmmGenerator::make(4, 4, 2, 31);
    data::Dataset ds = data::make_dataset_from_gmm(gen, 64, SeededRng(10, 1), "train");

    DiffusionConfig cfg = tiny_cfg(50);
    DiffusionTrainConfig tc;
    tc.epochs = 40;
    tc.batch_size = 32;

    // held-out pairs from the init model
    SeededRng init_rng(11);
    DiffusionModel untrained = DiffusionModel::init(16, cfg, init_rng);

    auto heldout_loss = [&](const DiffusionModel& m) {
        Tensor x = Tensor({8, 16});
        SeededRng hrng(12, 2);
        for (std::size_t i = 0; i < 8; ++i) {
            auto [img, label] = gen.sample(hrng);
            for (std::size_t j = 0; j < 16; ++j) x.at2(i, j) = 2.0 * img[j] - 1.0;
        }
        std::vector<std::size_t> t_rows = {3, 11, 19, 27, 35, 41, 45, 49};
        std::vector<Tensor> noise;
        SeededRng nrng(13, 3);
        for (int i = 0; i < 8; ++i) noise.push_back(Tensor::normal({16}, 0, 1, nrng));
        return denoising_loss(m, x, t_rows, &noise, nullptr, nullptr);
    };

    DiffusionTrainResult r = train_diffusion(ds, cfg, tc, SeededRng(14));
    CHECK(heldout_loss(r.model) < heldout_loss(untrained));
    CHECK(r.loss_trace.size() == tc.epochs);
    CHECK(r.loss_trace.back() < r.loss_trace.front());
}

TEST_CASE("sampler concentrates on a single memorized point") {
    // one-point dataset: the sample mean should land near that point
    data::Dataset ds;
    SeededRng rng(15);
    ds.images = Tensor::uniform({1, 8}, 0.2, 0.8, rng);

    DiffusionConfig cfg = tiny_cfg(100);
    cfg.beta_max = 0.1;  // keeps the terminal distribution near N(0, I) at T=100
    cfg.hidden_dim = 48;
    DiffusionTrainConfig tc;
    tc.epochs = 1200;
    tc.batch_size = 1;
    DiffusionTrainResult r = train_diffusion(ds, cfg, tc, SeededRng(16));

    Tensor samples = sample(r.model, 64, SeededRng(17, 1));
    double rms = 0.0;
    for (std::size_t j = 0; j < 8; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < samples.dim(0); ++i) mean += samples.at2(i, j);
        mean /= static_cast<double>(samples.dim(0));
        const double d = mean - ds.images.at2(0, j);
        rms += d * d;
    }
    rms = std::sqrt(rms / 8.0);
    CHECK(rms < 0.1);
}

TEST_CASE("sampling is deterministic and in range") {
    SeededRng rng(18);
    DiffusionModel m = DiffusionModel::init(8, tiny_cfg(20), rng);
    Tensor a = sample(m, 16, SeededRng(19, 2));
    Tensor b = sample(m, 16, SeededRng(19, 2));
    CHECK(a == b);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] >= 0.0);
        CHECK(a[i] <= 1.0);
    }
}

TEST_CASE("banks are prefix-nested, reproducible, and validated") {
    SeededRng rng(20);
    DiffusionModel m = DiffusionModel::init(6, tiny_cfg(15), rng);
    const std::string p1 = "/tmp/vg_bank1.vgb", p10 = "/tmp/vg_bank10.vgb";

    data::SampleBank b1 = build_bank(m, 1, 8, SeededRng(3, 3), p1);
    data::SampleBank b10 = build_bank(m, 10, 8, SeededRng(3, 3), p10);
    CHECK(b1.size() == 8);
    CHECK(b10.size() == 80);
    for (std::size_t i = 0; i < b1.samples.size(); ++i)
        CHECK(b1.samples[i] == b10.samples[i]);  // first n samples agree

    data::SampleBank again = build_bank(m, 1, 8, SeededRng(3, 3), "");
    CHECK(again.samples == b1.samples);  // bit-identical rerun

    data::SampleBank loaded = data::load_bank(p10);
    CHECK(loaded.fingerprint == m.fingerprint());
    CHECK(loaded.k == 10);
    CHECK(loaded.n == 8);
    std::remove(p1.c_str());
    std::remove(p10.c_str());
}

TEST_CASE("diffusion checkpoints round trip") {
    SeededRng rng(21);
    DiffusionModel m = DiffusionModel::init(5, tiny_cfg(12), rng);
    const std::string path = "/tmp/vg_diff.vgd";
    save_diffusion(path, m);
    DiffusionModel back = load_diffusion(path);
    CHECK(back.input_dim == m.input_dim);
    CHECK(back.cfg.timesteps == m.cfg.timesteps);
    CHECK(back.fingerprint() == m.fingerprint());
    std::remove(path.c_str());
}

TEST_CASE("samples of a gmm-trained model match analytic moments loosely") {
    data::GmmGenerator gen = data::GmmGenerator::make(4, 4, 2, 47);
    data::Dataset ds = data::make_dataset_from_gmm(gen, 512, SeededRng(22, 1), "train");

    DiffusionConfig cfg = tiny_cfg(200);
    cfg.hidden_dim = 128;
    DiffusionTrainConfig tc;
    tc.epochs = 800;
    tc.batch_size = 64;
    DiffusionTrainResult r = train_diffusion(ds, cfg, tc, SeededRng(23));

    const std::size_t n = 10000;
    Tensor samples = sample(r.model, n, SeededRng(24, 2));

    const Tensor mu = gen.analytic_mean();
    Tensor sample_mu = Tensor::zeros({16});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 16; ++j) sample_mu[j] += samples.at2(i, j);
    for (std::size_t j = 0; j < 16; ++j) sample_mu[j] /= n;

    double mu_err = 0.0, mu_norm = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
        mu_err += (sample_mu[j] - mu[j]) * (sample_mu[j] - mu[j]);
        mu_norm += mu[j] * mu[j];
    }
    CHECK(std::sqrt(mu_err / mu_norm) < 0.10);

    const Tensor cov = gen.analytic_covariance();
    Tensor sample_cov = Tensor::zeros({16, 16});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < 16; ++a)
            for (std::size_t b = 0; b < 16; ++b)
                sample_cov.at2(a, b) +=
                    (samples.at2(i, a) - sample_mu[a]) * (samples.at2(i, b) - sample_mu[b]);
    double cov_err = 0.0, cov_norm = 0.0;
    for (std::size_t a = 0; a < 16; ++a)
        for (std::size_t b = 0; b < 16; ++b) {
            sample_cov.at2(a, b) /= n;
            cov_err += (sample_cov.at2(a, b) - cov.at2(a, b)) * (sample_cov.at2(a, b) - cov.at2(a, b));
            cov_norm += cov.at2(a, b) * cov.at2(a, b);
        }
    CHECK(std::sqrt(cov_err / cov_norm) < 0.10);
}

TEST_CASE("c2st separates noise and cannot separate identical data") {
    SeededRng rng(25);
    data::GmmGenerator gen = data::GmmGenerator::make(4, 4, 2, 53);
    data::Dataset real = data::make_dataset_from_gmm(gen, 512, SeededRng(26, 1), "train");

    // identical copy: chance accuracy within +-0.05
    data::SampleBank copy;
    copy.samples = real.images;
    copy.k = 1;
    copy.n = 512;
    C2stConfig cfg;
    const double acc_same = c2st_audit(real, copy, cfg, SeededRng(27, 2));
    CHECK(acc_same >= 0.45);
    CHECK(acc_same <= 0.55);

    // pure noise: separable
    data::SampleBank noise;
    noise.samples = Tensor::uniform({512, 16}, 0, 1, rng);
    noise.k = 1;
    noise.n = 512;
    const double acc_noise = c2st_audit(real, noise, cfg, SeededRng(28, 3));
    CHECK(acc_noise > 0.95);
}

TEST_CASE("better-trained diffusion is harder to distinguish from real data") {
    data::GmmGenerator gen = data::GmmGenerator::make(4, 4, 2, 61);
    data::Dataset ds = data::make_dataset_from_gmm(gen, 256, SeededRng(29, 1), "train");

    DiffusionConfig cfg = tiny_cfg(60);
    cfg.hidden_dim = 64;
    DiffusionTrainConfig brief;
    brief.epochs = 1;
    brief.batch_size = 64;
    DiffusionTrainConfig thorough = brief;
    thorough.epochs = 250;

    DiffusionTrainResult weak = train_diffusion(ds, cfg, brief, SeededRng(30));
    DiffusionTrainResult strong = train_diffusion(ds, cfg, thorough, SeededRng(30));

    data::SampleBank weak_bank = build_bank(weak.model, 1, 256, SeededRng(31, 1), "");
    data::SampleBank strong_bank = build_bank(strong.model, 1, 256, SeededRng(31, 1), "");

    C2stConfig ccfg;
    const double weak_acc = c2st_audit(ds, weak_bank, ccfg, SeededRng(32, 2));
    const double strong_acc = c2st_audit(ds, strong_bank, ccfg, SeededRng(32, 2));
    CHECK(strong_acc < weak_acc);
}
