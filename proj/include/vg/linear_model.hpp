#pragma once

#include <vector>

#include "vg/tensor.hpp"

namespace vg {

struct LogRegConfig {
    std::size_t epochs = 300;
    double learning_rate = 0.05;
    double l2 = 1e-4;
};

// Multinomial logistic regression fit by full-batch Adam on the softmax
// cross-entropy with an L2 penalty. Deterministic given the inputs.
struct LogisticRegressionModel {
    Tensor weights;  // [D x C]
    Tensor bias;     // [C]
    std::size_t classes = 0;

    int predict(const Tensor& features, std::size_t row) const;
};

LogisticRegressionModel fit_logistic_regression(const Tensor& x, const std::vector<int>& y,
                                                std::size_t classes, const LogRegConfig& cfg);

double classification_accuracy(const LogisticRegressionModel& model, const Tensor& x,
                               const std::vector<int>& y);

// per-dimension standardization statistics
struct Standardizer {
    Tensor mean, inv_std;
    static Standardizer fit(const Tensor& x);
    Tensor apply(const Tensor& x) const;
};

}  // namespace vg
