#include "vg/linear_model.hpp"

#include <algorithm>
#include <cmath>

#include "vg/optim.hpp"

namespace vg {

int LogisticRegressionModel::predict(const Tensor& features, std::size_t row) const {
    const std::size_t d = weights.dim(0);
    int best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < classes; ++c) {
        double s = bias[c];
        for (std::size_t j = 0; j < d; ++j) s += features.at2(row, j) * weights.at2(j, c);
        if (s > best_score) {
            best_score = s;
            best = static_cast<int>(c);
        }
    }
    return best;
}

LogisticRegressionModel fit_logistic_regression(const Tensor& x, const std::vector<int>& y,
                                                std::size_t classes, const LogRegConfig& cfg) {
    if (x.rank() != 2 || x.dim(0) != y.size()) throw ShapeError("logistic regression inputs misaligned");
    if (classes < 2) throw ConfigError("logistic regression needs >= 2 classes");
    std::vector<bool> present(classes, false);
    for (int label : y) {
        if (label < 0 || static_cast<std::size_t>(label) >= classes)
            throw ConfigError("label out of range for logistic regression");
        present[label] = true;
    }
    std::size_t distinct = 0;
    for (bool b : present) distinct += b ? 1 : 0;
    if (distinct < 2) throw ConfigError("logistic regression needs >= 2 classes present in training data");

    const std::size_t n = x.dim(0), d = x.dim(1);
    LogisticRegressionModel model;
    model.classes = classes;
    model.weights = Tensor::zeros({d, classes});
    model.bias = Tensor::zeros({classes});

    Optimizer opt(OptimizerKind::Adam, cfg.learning_rate);
    std::vector<double> probs(classes);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Tensor gw = Tensor::zeros({d, classes});
        Tensor gb = Tensor::zeros({classes});
        for (std::size_t i = 0; i < n; ++i) {
            double m = -1e300;
            for (std::size_t c = 0; c < classes; ++c) {
                double s = model.bias[c];
                for (std::size_t j = 0; j < d; ++j) s += x.at2(i, j) * model.weights.at2(j, c);
                probs[c] = s;
                m = std::max(m, s);
            }
            double z = 0.0;
            for (std::size_t c = 0; c < classes; ++c) {
                probs[c] = std::exp(probs[c] - m);
                z += probs[c];
            }
            for (std::size_t c = 0; c < classes; ++c) {
                const double err = probs[c] / z - (static_cast<int>(c) == y[i] ? 1.0 : 0.0);
                gb[c] += err;
                for (std::size_t j = 0; j < d; ++j) gw.at2(j, c) += err * x.at2(i, j);
            }
        }
        const double scale = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] = gw[i] * scale + cfg.l2 * model.weights[i];
        for (std::size_t c = 0; c < classes; ++c) gb[c] *= scale;
        std::vector<Tensor*> params = {&model.weights, &model.bias};
        std::vector<Tensor> grads = {gw, gb};
        opt.step(params, grads);
    }
    return model;
}

double classification_accuracy(const LogisticRegressionModel& model, const Tensor& x,
                               const std::vector<int>& y) {
    if (x.dim(0) != y.size() || y.empty()) throw ShapeError("accuracy inputs misaligned");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (model.predict(x, i) == y[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(y.size());
}

Standardizer Standardizer::fit(const Tensor& x) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    Standardizer s;
    s.mean = Tensor::zeros({d});
    s.inv_std = Tensor::zeros({d});
    for (std::size_t j = 0; j < d; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += x.at2(i, j);
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) v += (x.at2(i, j) - m) * (x.at2(i, j) - m);
        v /= static_cast<double>(n);
        s.mean[j] = m;
        s.inv_std[j] = 1.0 / std::sqrt(v + 1e-8);
    }
    return s;
}

Tensor Standardizer::apply(const Tensor& x) const {
    Tensor out(x.shape());
    const std::size_t n = x.dim(0), d = x.dim(1);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at2(i, j) = (x.at2(i, j) - mean[j]) * inv_std[j];
    return out;
}

}  // namespace vg
