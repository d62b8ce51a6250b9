#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "vg/vae.hpp"

using namespace vg;

namespace {

VaeArchitecture tiny_arch(Likelihood lik = Likelihood::Bernoulli) {
    VaeArchitecture a;
    a.input_dim = 2;
    a.hidden_dim = 3;
    a.latent_base = 1;
    a.latent_multiplier = 2;
    a.depth = 1;
    a.likelihood = lik;
    return a;
}

VaeParameters zero_params(const VaeArchitecture& arch) {
    VaeParameters p;
    p.arch = arch;
    for (auto [in, out] : arch.encoder_layer_dims()) {
        p.enc_w.push_back(Tensor::zeros({in, out}));
        p.enc_b.push_back(Tensor::zeros({out}));
    }
    for (auto [in, out] : arch.decoder_layer_dims()) {
        p.dec_w.push_back(Tensor::zeros({in, out}));
        p.dec_b.push_back(Tensor::zeros({out}));
    }
    return p;
}

}  // namespace

TEST_CASE("zero-weight encoder maps to the prior") {
    VaeParameters p = zero_params(tiny_arch());
    GaussianPosterior q = encode_one(p, Tensor::from_values({0.3, 0.9}));
    for (std::size_t i = 0; i < q.dim(); ++i) {
        CHECK(q.mean[i] == 0.0);
        CHECK(q.log_variance[i] == 0.0);
    }
}

TEST_CASE("encode is deterministic and matches a manual forward pass") {
    SeededRng rng(17);
    VaeArchitecture arch = tiny_arch();
    VaeParameters p = VaeParameters::init(arch, rng);
    Tensor x = Tensor::from_values({0.25, 0.75});

    GaussianPosterior q1 = encode_one(p, x);
    GaussianPosterior q2 = encode_one(p, x);
    CHECK(q1.mean == q2.mean);
    CHECK(q1.log_variance == q2.log_variance);

    // manual arithmetic: h = relu(x W1 + b1); out = h W2 + b2
    std::vector<double> h(3);
    for (int j = 0; j < 3; ++j) {
        double s = p.enc_b[0][j];
        for (int i = 0; i < 2; ++i) s += x[i] * p.enc_w[0].at2(i, j);
        h[j] = std::max(0.0, s);
    }
    for (int j = 0; j < 4; ++j) {
        double s = p.enc_b[1][j];
        for (int i = 0; i < 3; ++i) s += h[i] * p.enc_w[1].at2(i, j);
        const double expect = s;
        if (j < 2) CHECK(q1.mean[j] == doctest::Approx(expect).epsilon(1e-12));
        else CHECK(q1.log_variance[j - 2] == doctest::Approx(std::clamp(expect, -30.0, 20.0)).epsilon(1e-12));
    }
}

TEST_CASE("reparameterized sampling") {
    GaussianPosterior q(Tensor::from_values({1.5, -0.5}), Tensor::from_values({-30.0, -30.0}));
    SeededRng rng(5);
    Tensor z = reparameterized_sample(q, rng);
    CHECK(std::abs(z[0] - 1.5) < 1e-6);
    CHECK(std::abs(z[1] + 0.5) < 1e-6);

    // moment check: mean of many draws approaches mu within 4 standard errors
    GaussianPosterior q2(Tensor::from_values({0.7}), Tensor::from_values({std::log(0.25)}));
    const std::size_t n = 100000;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += reparameterized_sample(q2, rng)[0];
    const double mean = acc / n;
    const double se = 0.5 / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(mean - 0.7) < 4 * se);
}

TEST_CASE("gradient of sum(z) w.r.t. mu is all ones") {
    Tape t;
    Tape::Var mu = t.leaf(Tensor::zeros({1, 3}));
    Tape::Var lv = t.leaf(Tensor::zeros({1, 3}));
    SeededRng rng(2);
    Tape::Var z = reparameterize_tape(t, mu, lv, Tensor::normal({1, 3}, 0, 1, rng));
    t.backward(t.sum(z));
    Tensor g = t.gradient(mu);
    for (std::size_t i = 0; i < 3; ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("closed-form KL values") {
    CHECK(kl_to_standard_normal({Tensor::from_values({0.0}), Tensor::from_values({0.0})}) == 0.0);
    CHECK(kl_to_standard_normal({Tensor::from_values({1.0}), Tensor::from_values({0.0})}) ==
          doctest::Approx(0.5).epsilon(1e-12));
    const double kl = kl_to_standard_normal({Tensor::from_values({0.0}), Tensor::from_values({std::log(4.0)})});
    CHECK(kl == doctest::Approx(0.5 * (4.0 - 1.0 - std::log(4.0))).epsilon(1e-12));

    // Monte-Carlo oracle within 1%
    SeededRng rng(31);
    const double mc = oracles::mc_kl({0.0}, {std::log(4.0)}, {0.0}, {0.0}, 1000000, rng);
    CHECK(std::abs(mc - kl) / kl < 0.01);
}

TEST_CASE("KL is non-negative on random posteriors") {
    SeededRng rng(77);
    for (int i = 0; i < 10000; ++i) {
        Tensor mu = Tensor::uniform({4}, -3, 3, rng);
        Tensor lv = Tensor::uniform({4}, -4, 3, rng);
        CHECK(kl_to_standard_normal({mu, lv}) >= 0.0);
    }
}

TEST_CASE("bernoulli likelihood of the constant-half decoder") {
    VaeArchitecture arch = tiny_arch();
    arch.input_dim = 4;
    VaeParameters p = zero_params(arch);
    const double ll = log_likelihood(p, Tensor::from_values({1, 0, 1, 0}), Tensor::from_values({0.0, 0.0}));
    CHECK(ll == doctest::Approx(4.0 * std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("mol bin probabilities sum to one") {
    SeededRng rng(41);
    for (int rep = 0; rep < 100; ++rep) {
        VaeArchitecture arch;
        arch.input_dim = 1;
        arch.depth = 0;
        arch.latent_base = 1;
        arch.latent_multiplier = 1;
        arch.likelihood = Likelihood::DiscretizedMixtureOfLogistics;
        arch.mol_components = 3;
        VaeParameters p = zero_params(arch);
        p.dec_b[0] = Tensor::uniform({9}, -2.0, 2.0, rng);
        const Tensor z = Tensor::from_values({0.0});
        double total = 0.0;
        for (int level = 0; level < 256; ++level)
            total += std::exp(log_likelihood(p, Tensor::from_values({level / 255.0}), z));
        CHECK(std::abs(total - 1.0) < 1e-6);
    }
}

TEST_CASE("mol single component matches direct cdf arithmetic") {
    VaeArchitecture arch;
    arch.input_dim = 1;
    arch.depth = 0;
    arch.latent_base = 1;
    arch.latent_multiplier = 1;
    arch.likelihood = Likelihood::DiscretizedMixtureOfLogistics;
    arch.mol_components = 1;
    VaeParameters p = zero_params(arch);
    const int level = 100;
    const double center = 2.0 * level / 255.0 - 1.0;
    const double s = 0.1;
    p.dec_b[0] = Tensor::from_values({0.0, center, std::log(s)});

    auto sigma = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const double h = 1.0 / 255.0;
    for (int probe = 60; probe <= 140; probe += 5) {
        const double x01 = probe / 255.0;
        const double xhat = 2.0 * x01 - 1.0;
        const double want = std::log(sigma((xhat + h - center) / s) - sigma((xhat - h - center) / s));
        const double got = log_likelihood(p, Tensor::from_values({x01}), Tensor::from_values({0.0}));
        CHECK(got == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("elbo of the prior-matching model is the likelihood floor") {
    VaeArchitecture arch = tiny_arch();
    arch.input_dim = 4;
    VaeParameters p = zero_params(arch);
    SeededRng rng(3);
    const double v = elbo(p, Tensor::from_values({1, 0, 0, 1}), rng, 8);
    CHECK(v == doctest::Approx(4.0 * std::log(0.5)).epsilon(1e-12));  // KL term is exactly 0
}

TEST_CASE("elbo matches a hand-unrolled computation with frozen noise") {
    VaeArchitecture arch;
    arch.input_dim = 2;
    arch.depth = 0;
    arch.latent_base = 1;
    arch.latent_multiplier = 2;
    arch.likelihood = Likelihood::Bernoulli;
    SeededRng rng(23);
    VaeParameters p = VaeParameters::init(arch, rng);
    const Tensor x({1, 2}, {1.0, 0.0});
    const Tensor eps({1, 2}, {0.37, -1.2});

    const double got = elbo_rows(p, x, {eps})[0];

    // by hand: out = x W + b, mu = out[:2], lv = out[2:], z = mu + exp(lv/2) eps
    double out[4];
    for (int j = 0; j < 4; ++j) {
        out[j] = p.enc_b[0][j];
        for (int i = 0; i < 2; ++i) out[j] += x[i] * p.enc_w[0].at2(i, j);
    }
    double z[2], kl = 0.0;
    for (int i = 0; i < 2; ++i) {
        const double mu = out[i], lv = out[i + 2];
        z[i] = mu + std::exp(0.5 * lv) * eps[i];
        kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    double ll = 0.0;
    for (int j = 0; j < 2; ++j) {
        double logit = p.dec_b[0][j];
        for (int i = 0; i < 2; ++i) logit += z[i] * p.dec_w[0].at2(i, j);
        ll += x[j] * logit - std::log1p(std::exp(logit));
    }
    CHECK(got == doctest::Approx(ll - kl).epsilon(1e-12));
}

TEST_CASE("elbo estimates are self-consistent in n_mc") {
    SeededRng rng(9);
    VaeArchitecture arch = tiny_arch();
    VaeParameters p = VaeParameters::init(arch, rng);
    const Tensor x = Tensor::from_values({0.0, 1.0});
    SeededRng r1(100), r2(200);
    const double e4 = elbo(p, x, r1, 10000);
    const double e5 = elbo(p, x, r2, 100000);
    CHECK(std::abs(e4 - e5) < 0.05);  // both near the true expectation
}

TEST_CASE("elbo variance shrinks with n_mc") {
    SeededRng rng(71);
    VaeArchitecture arch = tiny_arch();
    VaeParameters p = VaeParameters::init(arch, rng);
    const Tensor x = Tensor::from_values({1.0, 0.0});
    auto variance_at = [&](std::size_t n_mc) {
        std::vector<double> vals;
        for (int rep = 0; rep < 200; ++rep) {
            SeededRng r(500 + rep, n_mc);
            vals.push_back(elbo(p, x, r, n_mc));
        }
        auto [mean, se] = oracles::mean_and_se(vals);
        (void)mean;
        return se * se * 200.0;
    };
    const double v1 = variance_at(1), v10 = variance_at(10), v100 = variance_at(100);
    CHECK(v10 < v1);
    CHECK(v100 < v10);
    CHECK(v1 / v10 > 3.0);   // ~10x with Monte-Carlo slack
    CHECK(v1 / v10 < 30.0);
    CHECK(v10 / v100 > 3.0);
    CHECK(v10 / v100 < 30.0);
}

TEST_CASE("elbo gradient matches finite differences on a tiny model") {
    SeededRng rng(271);
    VaeArchitecture arch;
    arch.input_dim = 2;
    arch.hidden_dim = 3;
    arch.latent_base = 1;
    arch.latent_multiplier = 2;
    arch.depth = 1;
    VaeParameters p = VaeParameters::init(arch, rng);
    const Tensor x({1, 2}, {1.0, 0.0});
    const Tensor eps({1, 2}, {0.5, -0.25});

    std::vector<Tensor> leaves;
    for (const Tensor* t : p.all()) leaves.push_back(*t);
    const double err = finite_difference_check(
        [&](Tape& t, const std::vector<Tape::Var>& vs) {
            VaeParameters probe = p;
            auto ptrs = probe.all();
            TapeVae m;
            m.arch = &probe.arch;
            std::size_t idx = 0;
            for (std::size_t i = 0; i < probe.enc_w.size(); ++i) {
                m.enc_w.push_back(vs[idx++]);
                m.enc_b.push_back(vs[idx++]);
            }
            for (std::size_t i = 0; i < probe.dec_w.size(); ++i) {
                m.dec_w.push_back(vs[idx++]);
                m.dec_b.push_back(vs[idx++]);
            }
            (void)ptrs;
            return t.sum(elbo_rows_tape(t, m, x, {eps}));
        },
        leaves, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("count_parameters partitions the weights") {
    VaeArchitecture arch;
    arch.input_dim = 256;
    arch.hidden_dim = 64;
    arch.latent_base = 8;
    arch.depth = 2;

    arch.latent_multiplier = 1;
    ParameterCounts c1 = count_parameters(arch);
    arch.latent_multiplier = 2;
    ParameterCounts c2 = count_parameters(arch);

    // doubling m_z doubles theta_z except for the constant first-decoder bias
    CHECK(c2.theta_z == 2 * c1.theta_z - arch.hidden_dim);
    CHECK(c2.theta_not_z == c1.theta_not_z);
    CHECK(c1.total == c1.theta_z + c1.theta_not_z);
    CHECK(c2.total == c2.theta_z + c2.theta_not_z);

    // manual shape enumeration for m_z=1: enc 256->64->64->16, dec 8->64->64->256
    const std::size_t enc_z = 64 * 16 + 16, dec_z = 8 * 64 + 64;
    const std::size_t not_z = (256 * 64 + 64) + (64 * 64 + 64) + (64 * 64 + 64) + (64 * 256 + 256);
    CHECK(c1.theta_z == enc_z + dec_z);
    CHECK(c1.theta_not_z == not_z);

    // the mask covers every tensor exactly once
    SeededRng rng(1);
    VaeParameters p = VaeParameters::init(arch, rng);
    auto mask = p.theta_z_mask();
    auto tensors = p.all();
    REQUIRE(mask.size() == tensors.size());
    std::size_t in_z = 0, out_z = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] ? in_z : out_z) += tensors[i]->size();
    CHECK(in_z == c2.theta_z);
    CHECK(out_z == c2.theta_not_z);
}

TEST_CASE("decode_and_reconstruct") {
    VaeArchitecture arch = tiny_arch();
    VaeParameters p = zero_params(arch);
    Tensor rec = decode_and_reconstruct(p, Tensor::from_values({0.0, 0.0}));
    for (std::size_t i = 0; i < rec.size(); ++i) CHECK(rec[i] == 0.5);

    SeededRng rng(12);
    VaeParameters pr = VaeParameters::init(arch, rng);
    Tensor z = Tensor::uniform({4, 2}, -2, 2, rng);
    Tensor out = decode_and_reconstruct(pr, z);
    CHECK(out.dim(0) == 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] >= 0.0);
        CHECK(out[i] <= 1.0);
    }

    // manual forward for one row
    std::vector<double> h(3);
    for (int j = 0; j < 3; ++j) {
        double s = pr.dec_b[0][j];
        for (int i = 0; i < 2; ++i) s += z.at2(0, i) * pr.dec_w[0].at2(i, j);
        h[j] = std::max(0.0, s);
    }
    for (int j = 0; j < 2; ++j) {
        double s = pr.dec_b[1][j];
        for (int i = 0; i < 3; ++i) s += h[i] * pr.dec_w[1].at2(i, j);
        const double want = 1.0 / (1.0 + std::exp(-s));
        CHECK(out.at2(0, j) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("checkpoint round trip is bit-identical") {
    SeededRng rng(88);
    VaeArchitecture arch = tiny_arch(Likelihood::FixedVarianceGaussian);
    VaeParameters p = VaeParameters::init(arch, rng);
    const std::string path = "/tmp/vg_test_ckpt.vgw";
    save_checkpoint(path, p);
    VaeParameters q = load_checkpoint(path);
    CHECK(q.arch == p.arch);
    CHECK(p.same_values(q));
    std::remove(path.c_str());
}
