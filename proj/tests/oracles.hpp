// Independent reference computations used as test oracles. These stay
// deliberately naive and separate from the library implementation paths they
// check.
#pragma once

#include <cmath>
#include <vector>

#include "vg/rng.hpp"
#include "vg/tensor.hpp"

namespace oracles {

// O(n^3) triple-loop matrix product
inline vg::Tensor naive_matmul(const vg::Tensor& a, const vg::Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    vg::Tensor c({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a.at2(i, p) * b.at2(p, j);
            c.at2(i, j) = s;
        }
    return c;
}

// Monte-Carlo estimate of KL(q1 || q2) for factorized Gaussians
inline double mc_kl(const std::vector<double>& mu1, const std::vector<double>& lv1,
                    const std::vector<double>& mu2, const std::vector<double>& lv2, std::size_t samples,
                    vg::SeededRng& rng) {
    const std::size_t d = mu1.size();
    double acc = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        double log_q1 = 0.0, log_q2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double z = mu1[i] + std::exp(0.5 * lv1[i]) * rng.normal();
            const double a1 = z - mu1[i], a2 = z - mu2[i];
            log_q1 += -0.5 * (lv1[i] + a1 * a1 * std::exp(-lv1[i]));
            log_q2 += -0.5 * (lv2[i] + a2 * a2 * std::exp(-lv2[i]));
        }
        acc += log_q1 - log_q2;
    }
    return acc / static_cast<double>(samples);
}

// mean and standard error of a sample
inline std::pair<double, double> mean_and_se(const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= static_cast<double>(xs.size() - 1);
    return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

// least-squares slope of y against x
inline double linear_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (x[i] - mx) * (y[i] - my);
        den += (x[i] - mx) * (x[i] - mx);
    }
    return num / den;
}

}  // namespace oracles
