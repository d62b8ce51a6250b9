#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "vg/tensor.hpp"

// ---------------------------------------------------------------------------
// Reference MS-SSIM, written independently of the library implementation:
// brute-force 2D window loops, no separable filtering, its own kernel and
// downsampling code. Follows the published multi-scale construction with the
// same small-image conventions (adaptive window span, truncated renormalized
// weights, luminance at the coarsest scale, per-scale means floored at zero).
namespace reference {

struct Img {
    std::size_t w, h;
    std::vector<double> px;
};

double gauss(double d, double sigma) { return std::exp(-0.5 * d * d / (sigma * sigma)); }

std::pair<double, double> scale_means(const Img& a, const Img& b) {
    std::size_t span = std::min<std::size_t>(11, std::min(a.w, a.h));
    if (span % 2 == 0) span -= 1;
    const double sigma = 1.5;
    std::vector<double> kernel(span * span);
    double ksum = 0;
    for (std::size_t y = 0; y < span; ++y)
        for (std::size_t x = 0; x < span; ++x) {
            const double c = 0.5 * (span - 1);
            kernel[y * span + x] = gauss(y - c, sigma) * gauss(x - c, sigma);
            ksum += kernel[y * span + x];
        }
    for (double& k : kernel) k /= ksum;

    const double c1 = 1e-4, c2 = 9e-4;
    double cs_total = 0, ssim_total = 0;
    std::size_t windows = 0;
    for (std::size_t oy = 0; oy + span <= a.h; ++oy)
        for (std::size_t ox = 0; ox + span <= a.w; ++ox) {
            double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
            for (std::size_t y = 0; y < span; ++y)
                for (std::size_t x = 0; x < span; ++x) {
                    const double k = kernel[y * span + x];
                    const double va = a.px[(oy + y) * a.w + ox + x];
                    const double vb = b.px[(oy + y) * b.w + ox + x];
                    ma += k * va;
                    mb += k * vb;
                    maa += k * va * va;
                    mbb += k * vb * vb;
                    mab += k * va * vb;
                }
            const double var_a = maa - ma * ma, var_b = mbb - mb * mb, cov = mab - ma * mb;
            const double cs = (2 * cov + c2) / (var_a + var_b + c2);
            const double lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            cs_total += cs;
            ssim_total += lum * cs;
            ++windows;
        }
    return {cs_total / windows, ssim_total / windows};
}

Img half(const Img& in) {
    Img out{in.w / 2, in.h / 2, {}};
    out.px.resize(out.w * out.h);
    for (std::size_t y = 0; y < out.h; ++y)
        for (std::size_t x = 0; x < out.w; ++x)
            out.px[y * out.w + x] = (in.px[2 * y * in.w + 2 * x] + in.px[2 * y * in.w + 2 * x + 1] +
                                     in.px[(2 * y + 1) * in.w + 2 * x] + in.px[(2 * y + 1) * in.w + 2 * x + 1]) /
                                    4.0;
    return out;
}

double ms_ssim(const vg::Tensor& ta, const vg::Tensor& tb, std::size_t w, std::size_t h, std::size_t scales) {
    Img a{w, h, std::vector<double>(ta.data(), ta.data() + ta.size())};
    Img b{w, h, std::vector<double>(tb.data(), tb.data() + tb.size())};
    const double all[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double wsum = 0;
    for (std::size_t s = 0; s < scales; ++s) wsum += all[s];
    double result = 1.0;
    for (std::size_t s = 0; s < scales; ++s) {
        auto [mcs, mssim] = scale_means(a, b);
        const double weight = all[s] / wsum;
        const double factor = std::max(s + 1 == scales ? mssim : mcs, 0.0);
        result *= std::pow(factor, weight);
        if (s + 1 < scales) {
            a = half(a);
            b = half(b);
        }
    }
    return result;
}

}  // namespace reference
