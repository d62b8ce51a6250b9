#include "vg/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "vg/metrics.hpp"

namespace vg::down {

LatentDataset extract_latents(const VaeParameters& p, const data::Dataset& dataset) {
    if (dataset.labels.empty()) throw ConfigError("extract_latents needs a labeled dataset");
    if (dataset.size() == 0) throw ConfigError("extract_latents needs a non-empty dataset");
    LatentDataset out;
    out.labels = dataset.labels;
    out.means = Tensor({dataset.size(), p.arch.latent_dim()});
    constexpr std::size_t kBatch = 128;
    for (std::size_t begin = 0; begin < dataset.size(); begin += kBatch) {
        const std::size_t m = std::min(kBatch, dataset.size() - begin);
        const data::Dataset chunk = dataset.slice(begin, begin + m);
        const PosteriorBatch q = encode(p, chunk.images);
        std::memcpy(out.means.data() + begin * p.arch.latent_dim(), q.mean.data(),
                    m * p.arch.latent_dim() * sizeof(double));
    }
    return out;
}

std::pair<LatentDataset, LatentDataset> split_halves(const LatentDataset& latents, SeededRng rng) {
    const std::size_t n = latents.size();
    if (n < 2) throw ConfigError("split needs at least two examples");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    const std::size_t half = n / 2;
    const std::size_t d = latents.means.dim(1);
    LatentDataset a, b;
    a.means = Tensor({half, d});
    b.means = Tensor({n - half, d});
    a.labels.resize(half);
    b.labels.resize(n - half);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t src = order[i];
        if (i < half) {
            std::memcpy(a.means.data() + i * d, latents.means.data() + src * d, d * sizeof(double));
            a.labels[i] = latents.labels[src];
        } else {
            std::memcpy(b.means.data() + (i - half) * d, latents.means.data() + src * d, d * sizeof(double));
            b.labels[i - half] = latents.labels[src];
        }
    }
    return {std::move(a), std::move(b)};
}

double logistic_regression_accuracy(const LatentDataset& train, const LatentDataset& test,
                                    const LogRegConfig& cfg) {
    if (train.size() == 0 || test.size() == 0) throw ConfigError("classifier needs non-empty splits");
    int max_label = 0;
    for (int y : train.labels) max_label = std::max(max_label, y);
    for (int y : test.labels) max_label = std::max(max_label, y);
    const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
    const Standardizer st = Standardizer::fit(train.means);
    const LogisticRegressionModel model =
        fit_logistic_regression(st.apply(train.means), train.labels, std::max<std::size_t>(classes, 2), cfg);
    return classification_accuracy(model, st.apply(test.means), test.labels);
}

int knn_predict(const LatentDataset& train, const Tensor& query, std::size_t k) {
    const std::size_t n = train.size();
    if (k == 0 || k > n) throw ConfigError("knn: k must be in [1, train size]");
    const std::size_t d = train.means.dim(1);
    std::vector<std::pair<double, std::size_t>> dist(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = train.means.at2(i, j) - query[j];
            s += diff * diff;
        }
        dist[i] = {s, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::map<int, std::pair<std::size_t, double>> votes;  // label -> (count, summed distance)
    for (std::size_t i = 0; i < k; ++i) {
        auto& v = votes[train.labels[dist[i].second]];
        v.first += 1;
        v.second += std::sqrt(dist[i].first);
    }
    int best = -1;
    std::size_t best_count = 0;
    double best_sum = 0.0;
    for (const auto& [label, v] : votes) {
        if (v.first > best_count || (v.first == best_count && v.second < best_sum)) {
            best = label;
            best_count = v.first;
            best_sum = v.second;
        }
    }
    return best;
}

double knn_accuracy(const LatentDataset& train, const LatentDataset& test, std::size_t k) {
    if (test.size() == 0) throw ConfigError("knn needs a non-empty test half");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i)
        if (knn_predict(train, test.means.row(i), k) == test.labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

double reconstruction_report(const VaeParameters& p, const data::Dataset& test) {
    if (test.size() == 0) throw ConfigError("reconstruction_report needs a non-empty test set");
    const PosteriorBatch q = encode(p, test.images);
    const Tensor recon = decode_and_reconstruct(p, q.mean);
    double acc = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const double v = metrics::psnr(test.images.row(i), recon.row(i), 1.0);
        if (std::isinf(v)) return v;  // the sentinel dominates the mean
        acc += v;
    }
    return acc / static_cast<double>(test.size());
}

}  // namespace vg::down
