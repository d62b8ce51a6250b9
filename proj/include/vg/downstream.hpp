#pragma once

#include <utility>
#include <vector>

#include "vg/data.hpp"
#include "vg/linear_model.hpp"
#include "vg/vae.hpp"

namespace vg::down {

struct LatentDataset {
    Tensor means;             // [N x d_z]
    std::vector<int> labels;
    std::size_t size() const { return means.rank() == 2 ? means.dim(0) : 0; }
};

// posterior means per example; requires labels
LatentDataset extract_latents(const VaeParameters& p, const data::Dataset& dataset);

// disjoint, exhaustive 50/50 split in shuffled order
std::pair<LatentDataset, LatentDataset> split_halves(const LatentDataset& latents, SeededRng rng);

// multinomial logistic regression on standardized latents (statistics from
// the train half), held-out accuracy
double logistic_regression_accuracy(const LatentDataset& train, const LatentDataset& test,
                                    const LogRegConfig& cfg);

// Euclidean k-NN majority vote; ties broken by smallest summed distance
double knn_accuracy(const LatentDataset& train, const LatentDataset& test, std::size_t k);
int knn_predict(const LatentDataset& train, const Tensor& query, std::size_t k);

// mean PSNR of posterior-mean reconstructions over the test set
double reconstruction_report(const VaeParameters& p, const data::Dataset& test);

}  // namespace vg::down
