#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "vg/downstream.hpp"

using namespace vg;
using namespace vg::down;

namespace {

VaeArchitecture probe_arch() {
    VaeArchitecture a;
    a.input_dim = 8;
    a.hidden_dim = 6;
    a.latent_base = 2;
    a.latent_multiplier = 1;
    a.depth = 1;
    a.likelihood = Likelihood::Bernoulli;
    return a;
}

data::Dataset labeled_dataset(std::size_t n, std::uint64_t seed) {
    SeededRng rng(seed);
    data::Dataset ds;
    ds.images = Tensor::uniform({n, 8}, 0, 1, rng);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % 3);
    ds.width = 8;
    ds.height = 1;
    return ds;
}

// brute-force kNN over all pairs, the independent check for knn_predict
int brute_knn(const LatentDataset& train, const Tensor& q, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> all;
    const std::size_t d = train.means.dim(1);
    for (std::size_t i = 0; i < train.size(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = train.means.at2(i, j) - q[j];
            s += diff * diff;
        }
        all.emplace_back(std::sqrt(s), i);
    }
    std::sort(all.begin(), all.end());
    std::map<int, std::pair<std::size_t, double>> votes;
    for (std::size_t i = 0; i < k; ++i) {
        auto& v = votes[train.labels[all[i].second]];
        v.first += 1;
        v.second += all[i].first;
    }
    int best = -1;
    std::size_t bc = 0;
    double bs = 0;
    for (auto& [label, v] : votes)
        if (v.first > bc || (v.first == bc && v.second < bs)) {
            best = label;
            bc = v.first;
            bs = v.second;
        }
    return best;
}

}  // namespace

TEST_CASE("latent extraction") {
    data::Dataset ds = labeled_dataset(10, 1);

    // zero-weight encoder maps everything to the origin
    VaeParameters zero;
    zero.arch = probe_arch();
    for (auto [in, out] : zero.arch.encoder_layer_dims()) {
        zero.enc_w.push_back(Tensor::zeros({in, out}));
        zero.enc_b.push_back(Tensor::zeros({out}));
    }
    for (auto [in, out] : zero.arch.decoder_layer_dims()) {
        zero.dec_w.push_back(Tensor::zeros({in, out}));
        zero.dec_b.push_back(Tensor::zeros({out}));
    }
    LatentDataset lz = extract_latents(zero, ds);
    for (std::size_t i = 0; i < lz.means.size(); ++i) CHECK(lz.means[i] == 0.0);

    SeededRng rng(2);
    VaeParameters p = VaeParameters::init(probe_arch(), rng);
    LatentDataset l1 = extract_latents(p, ds);
    LatentDataset l2 = extract_latents(p, ds);
    CHECK(l1.means == l2.means);

    // pointwise cross-check against encode_one
    for (std::size_t i = 0; i < 10; ++i) {
        const GaussianPosterior q = encode_one(p, ds.images.row(i));
        for (std::size_t j = 0; j < q.dim(); ++j)
            CHECK(l1.means.at2(i, j) == doctest::Approx(q.mean[j]).epsilon(1e-12));
    }

    data::Dataset unlabeled = ds;
    unlabeled.labels.clear();
    CHECK_THROWS_AS(extract_latents(p, unlabeled), ConfigError);
}

TEST_CASE("split halves are disjoint and exhaustive") {
    LatentDataset l;
    SeededRng rng(3);
    l.means = Tensor::uniform({11, 2}, -1, 1, rng);
    l.labels.resize(11);
    for (int i = 0; i < 11; ++i) l.labels[i] = i;  // unique labels as identifiers
    auto [a, b] = split_halves(l, SeededRng(4, 1));
    CHECK(a.size() + b.size() == 11);
    std::set<int> seen;
    for (int y : a.labels) seen.insert(y);
    for (int y : b.labels) seen.insert(y);
    CHECK(seen.size() == 11);
}

TEST_CASE("logistic regression separates separable latents") {
    LatentDataset train, test;
    SeededRng rng(5);
    train.means = Tensor({40, 2});
    test.means = Tensor({40, 2});
    train.labels.resize(40);
    test.labels.resize(40);
    for (int i = 0; i < 40; ++i) {
        const int label = i % 2;
        const double cx = label == 0 ? -2.0 : 2.0;
        train.means.at2(i, 0) = cx + 0.3 * rng.normal();
        train.means.at2(i, 1) = 0.3 * rng.normal();
        train.labels[i] = label;
        test.means.at2(i, 0) = cx + 0.3 * rng.normal();
        test.means.at2(i, 1) = 0.3 * rng.normal();
        test.labels[i] = label;
    }
    LogRegConfig cfg;
    CHECK(logistic_regression_accuracy(train, test, cfg) == 1.0);

    // label shuffle gives chance accuracy
    LatentDataset shuffled = train;
    SeededRng perm(6, 1);
    for (std::size_t i = shuffled.labels.size(); i > 1; --i)
        std::swap(shuffled.labels[i - 1], shuffled.labels[perm.uniform_index(i)]);
    double null_acc = 0.0;
    const int reps = 10;
    for (int rep = 0; rep < reps; ++rep) {
        LatentDataset s = train;
        SeededRng r(7 + rep, 2);
        for (std::size_t i = s.labels.size(); i > 1; --i)
            std::swap(s.labels[i - 1], s.labels[r.uniform_index(i)]);
        null_acc += logistic_regression_accuracy(s, test, cfg);
    }
    null_acc /= reps;
    CHECK(std::abs(null_acc - 0.5) < 0.1);

    LatentDataset single = train;
    for (int& y : single.labels) y = 0;
    CHECK_THROWS_AS(logistic_regression_accuracy(single, test, cfg), ConfigError);
}

TEST_CASE("knn basics and oracle agreement") {
    LatentDataset train;
    SeededRng rng(8);
    train.means = Tensor::uniform({200, 3}, -1, 1, rng);
    train.labels.resize(200);
    for (int i = 0; i < 200; ++i) train.labels[i] = static_cast<int>(rng.uniform_index(4));

    // k=1 on an exact training point returns that point's label
    CHECK(knn_predict(train, train.means.row(17), 1) == train.labels[17]);

    // duplicated clusters are perfectly separable
    LatentDataset clusters, probes;
    clusters.means = Tensor({20, 2});
    probes.means = Tensor({20, 2});
    clusters.labels.resize(20);
    probes.labels.resize(20);
    for (int i = 0; i < 20; ++i) {
        const int label = i % 2;
        clusters.means.at2(i, 0) = label == 0 ? -1 : 1;
        clusters.means.at2(i, 1) = label;
        clusters.labels[i] = label;
        probes.means.at2(i, 0) = (label == 0 ? -1 : 1) + 0.01;
        probes.means.at2(i, 1) = label;
        probes.labels[i] = label;
    }
    CHECK(knn_accuracy(clusters, probes, 5) == 1.0);

    // brute-force all-pairs oracle on 200 points
    for (int probe = 0; probe < 50; ++probe) {
        Tensor q = Tensor::uniform({3}, -1, 1, rng);
        for (std::size_t k : {1ul, 3ul, 5ul})
            CHECK(knn_predict(train, q, k) == brute_knn(train, q, k));
    }

    CHECK_THROWS_AS(knn_predict(train, train.means.row(0), 201), ConfigError);
}

TEST_CASE("reconstruction report") {
    // Gaussian decoder whose bias reproduces the single test image exactly
    VaeArchitecture arch;
    arch.input_dim = 8;
    arch.depth = 0;
    arch.latent_base = 2;
    arch.latent_multiplier = 1;
    arch.likelihood = Likelihood::FixedVarianceGaussian;
    SeededRng rng(9);
    Tensor point = Tensor::uniform({8}, 0.2, 0.8, rng);

    VaeParameters perfect;
    perfect.arch = arch;
    perfect.enc_w.push_back(Tensor::zeros({8, 4}));
    perfect.enc_b.push_back(Tensor::zeros({4}));
    perfect.dec_w.push_back(Tensor::zeros({2, 8}));
    perfect.dec_b.push_back(point);

    data::Dataset single;
    single.images = point.reshaped({1, 8});
    single.labels = {0};
    CHECK(std::isinf(reconstruction_report(perfect, single)));

    // constant-half Bernoulli decoder on binary data: MSE 0.25 -> ~6.02 dB
    VaeArchitecture barch = probe_arch();
    VaeParameters half;
    half.arch = barch;
    for (auto [in, out] : barch.encoder_layer_dims()) {
        half.enc_w.push_back(Tensor::zeros({in, out}));
        half.enc_b.push_back(Tensor::zeros({out}));
    }
    for (auto [in, out] : barch.decoder_layer_dims()) {
        half.dec_w.push_back(Tensor::zeros({in, out}));
        half.dec_b.push_back(Tensor::zeros({out}));
    }
    data::Dataset binary;
    SeededRng brng(10);
    binary.images = Tensor({6, 8});
    for (std::size_t i = 0; i < binary.images.size(); ++i) binary.images[i] = brng.bernoulli(0.5) ? 1.0 : 0.0;
    binary.labels.assign(6, 0);
    CHECK(reconstruction_report(half, binary) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-9));
}
