#include "vg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace vg::data {

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) throw ShapeError("dataset slice out of range");
    const std::size_t d = input_dim();
    Tensor img({end - begin, d});
    std::memcpy(img.data(), images.data() + begin * d, (end - begin) * d * sizeof(double));
    Dataset out;
    out.images = std::move(img);
    if (!labels.empty()) out.labels.assign(labels.begin() + begin, labels.begin() + end);
    out.split = split;
    out.width = width;
    out.height = height;
    out.channels = channels;
    return out;
}

void SampleBank::validate() const {
    if (samples.rank() != 2) throw ShapeError("bank samples must be [count x input_dim]");
    if (k == 0 || n == 0) throw ShapeError("bank k and n must be positive");
    if (samples.dim(0) != k * n)
        throw ShapeError("bank sample count " + std::to_string(samples.dim(0)) + " != k*n = " +
                         std::to_string(k * n));
}

SampleBank SampleBank::prefix(std::size_t k_prime) const {
    validate();
    if (k_prime == 0 || k_prime > k) throw ShapeError("prefix k out of range");
    const std::size_t d = samples.dim(1);
    Tensor sub({k_prime * n, d});
    std::memcpy(sub.data(), samples.data(), sub.size() * sizeof(double));
    SampleBank out;
    out.samples = std::move(sub);
    out.k = k_prime;
    out.n = n;
    out.fingerprint = fingerprint;
    out.seed = seed;
    return out;
}

void save_bank(const std::string& path, const SampleBank& bank) {
    bank.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write("VGB1", 4);
    const std::uint64_t k = bank.k, n = bank.n, fp = bank.fingerprint, seed = bank.seed;
    out.write(reinterpret_cast<const char*>(&k), 8);
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(&fp), 8);
    out.write(reinterpret_cast<const char*>(&seed), 8);
    write_tensor(out, bank.samples);
    if (!out) throw IoError("bank write failed: " + path);
}

SampleBank load_bank(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "VGB1", 4) != 0) throw IoError("bad bank magic (expected VGB1)");
    SampleBank bank;
    std::uint64_t k = 0, n = 0;
    in.read(reinterpret_cast<char*>(&k), 8);
    in.read(reinterpret_cast<char*>(&n), 8);
    in.read(reinterpret_cast<char*>(&bank.fingerprint), 8);
    in.read(reinterpret_cast<char*>(&bank.seed), 8);
    if (!in) throw IoError("truncated bank header");
    bank.k = static_cast<std::size_t>(k);
    bank.n = static_cast<std::size_t>(n);
    bank.samples = read_tensor(in);
    bank.validate();
    return bank;
}

Tensor quantize_256(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = std::round(std::clamp(x[i], 0.0, 1.0) * 255.0) / 255.0;
    return out;
}

Tensor binarize(const Tensor& x, double threshold) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= threshold ? 1.0 : 0.0;
    return out;
}

// ----------------------------------------------------------------- sources

FiniteSource::FiniteSource(Dataset dataset, SeededRng rng, bool shuffle)
    : dataset_(std::move(dataset)), rng_(rng), shuffle_(shuffle) {
    if (dataset_.size() == 0) throw ConfigError("finite source needs a non-empty dataset");
    order_.resize(dataset_.size());
    start_epoch();
}

void FiniteSource::start_epoch() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle_) {
        for (std::size_t i = order_.size(); i > 1; --i)
            std::swap(order_[i - 1], order_[rng_.uniform_index(i)]);
    }
    pos_ = 0;
}

Batch FiniteSource::next_batch(std::size_t m) {
    if (m == 0 || m > order_.size()) throw ConfigError("batch size must be in [1, N]");
    if (pos_ + m > order_.size()) start_epoch();
    const std::size_t d = dataset_.input_dim();
    Batch b;
    b.images = Tensor({m, d});
    b.provenance.assign(m, 1);
    b.indices.resize(m);
    if (!dataset_.labels.empty()) b.labels.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t src = order_[pos_ + i];
        std::memcpy(b.images.data() + i * d, dataset_.images.data() + src * d, d * sizeof(double));
        b.indices[i] = src;
        if (!dataset_.labels.empty()) b.labels[i] = dataset_.labels[src];
    }
    pos_ += m;
    return b;
}

BankSource::BankSource(SampleBank bank, bool replay, std::size_t epoch_n)
    : bank_(std::move(bank)), replay_(replay), epoch_n_(epoch_n ? epoch_n : bank_.n) {
    bank_.validate();
}

Batch BankSource::next_batch(std::size_t m) {
    const std::size_t total = bank_.size();
    if (m == 0 || m > total) throw ConfigError("batch size must be in [1, bank size]");
    if (pos_ + m > total) {
        if (!replay_) throw ConfigError("bank exhausted after " + std::to_string(consumed_) +
                                        " samples and replay is disabled");
        pos_ = 0;  // drop the trailing partial window, wrap to the fixed replay order
    }
    const std::size_t d = bank_.samples.dim(1);
    Batch b;
    b.images = Tensor({m, d});
    b.provenance.assign(m, 0);
    b.indices.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        std::memcpy(b.images.data() + i * d, bank_.samples.data() + (pos_ + i) * d, d * sizeof(double));
        b.indices[i] = pos_ + i;
    }
    pos_ += m;
    consumed_ += m;
    return b;
}

GenerativeSource::GenerativeSource(Generator gen, std::size_t input_dim, std::size_t epoch_n, SeededRng rng)
    : gen_(std::move(gen)), input_dim_(input_dim), epoch_n_(epoch_n), rng_(rng) {
    if (!gen_) throw ConfigError("generative source needs a generator");
}

Batch GenerativeSource::next_batch(std::size_t m) {
    Batch b;
    b.images = Tensor({m, input_dim_});
    b.labels.resize(m);
    b.provenance.assign(m, 0);
    b.indices.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        SeededRng draw = rng_.child(draw_count_);
        auto [img, label] = gen_(draw);
        if (img.size() != input_dim_) throw ShapeError("generator emitted wrong image size");
        std::memcpy(b.images.data() + i * input_dim_, img.data(), input_dim_ * sizeof(double));
        b.labels[i] = label;
        b.indices[i] = static_cast<std::size_t>(draw_count_);
        ++draw_count_;
    }
    return b;
}

MixedSource::MixedSource(std::unique_ptr<DataSource> real, std::unique_ptr<DataSource> synthetic, double x_percent)
    : real_(std::move(real)), synthetic_(std::move(synthetic)), x_percent_(x_percent) {
    if (x_percent_ < 0.0 || x_percent_ > 100.0) throw ConfigError("mix percentage must be in [0,100]");
    if (x_percent_ > 0.0 && !real_) throw ConfigError("mixed source needs a real stream");
    if (x_percent_ < 100.0 && !synthetic_) throw ConfigError("mixed source needs a synthetic stream");
}

std::size_t MixedSource::epoch_size() const { return real_ ? real_->epoch_size() : synthetic_->epoch_size(); }

Batch MixedSource::next_batch(std::size_t m) {
    const std::size_t n_real = static_cast<std::size_t>(std::ceil(m * x_percent_ / 100.0));
    const std::size_t n_synth = m - n_real;
    Batch real = n_real ? real_->next_batch(n_real) : Batch{};
    Batch synth = n_synth ? synthetic_->next_batch(n_synth) : Batch{};
    if (n_real == 0) return synth;
    if (n_synth == 0) return real;
    const std::size_t d = real.images.dim(1);
    if (synth.images.dim(1) != d) throw ShapeError("mixed source input dims differ");
    Batch b;
    b.images = Tensor({m, d});
    std::memcpy(b.images.data(), real.images.data(), n_real * d * sizeof(double));
    std::memcpy(b.images.data() + n_real * d, synth.images.data(), n_synth * d * sizeof(double));
    b.provenance.assign(m, 0);
    for (std::size_t i = 0; i < n_real; ++i) b.provenance[i] = 1;
    b.indices.resize(m);
    for (std::size_t i = 0; i < n_real; ++i) b.indices[i] = real.indices[i];
    for (std::size_t i = 0; i < n_synth; ++i) b.indices[n_real + i] = synth.indices[i];
    return b;
}

// ------------------------------------------------------- oracle generators

GmmGenerator GmmGenerator::make(std::size_t width, std::size_t height, std::size_t components,
                                std::uint64_t build_seed) {
    if (components == 0) throw ConfigError("gmm needs at least one component");
    GmmGenerator g;
    g.width = width;
    g.height = height;
    SeededRng rng(build_seed, 0x6d6d67);
    double wsum = 0.0;
    for (std::size_t c = 0; c < components; ++c) {
        const double w = 0.5 + rng.uniform();
        g.weights.push_back(w);
        wsum += w;
        // smooth blob pattern, means comfortably inside [0.2, 0.8]
        const double cx = rng.uniform(0.25, 0.75) * (width - 1);
        const double cy = rng.uniform(0.25, 0.75) * (height - 1);
        const double rad = rng.uniform(0.15, 0.35) * std::min(width, height);
        Tensor mean({width * height});
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const double dx = (x - cx) / rad, dy = (y - cy) / rad;
                mean[y * width + x] = 0.2 + 0.6 * std::exp(-0.5 * (dx * dx + dy * dy));
            }
        g.means.push_back(std::move(mean));
        g.stddevs.push_back(rng.uniform(0.02, 0.05));
    }
    for (double& w : g.weights) w /= wsum;
    return g;
}

std::pair<Tensor, int> GmmGenerator::sample(SeededRng& rng) const {
    const double u = rng.uniform();
    std::size_t c = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) {
            c = i;
            break;
        }
        c = i;
    }
    Tensor img({input_dim()});
    for (std::size_t i = 0; i < img.size(); ++i)
        img[i] = std::clamp(means[c][i] + stddevs[c] * rng.normal(), 0.0, 1.0);
    return {std::move(img), static_cast<int>(c)};
}

Tensor GmmGenerator::analytic_mean() const {
    Tensor mu({input_dim()});
    for (std::size_t c = 0; c < weights.size(); ++c)
        for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += weights[c] * means[c][i];
    return mu;
}

Tensor GmmGenerator::analytic_covariance() const {
    const std::size_t d = input_dim();
    const Tensor mu = analytic_mean();
    Tensor cov({d, d});
    for (std::size_t c = 0; c < weights.size(); ++c) {
        const double w = weights[c], var = stddevs[c] * stddevs[c];
        for (std::size_t i = 0; i < d; ++i) {
            cov.at2(i, i) += w * var;
            for (std::size_t j = 0; j < d; ++j) cov.at2(i, j) += w * means[c][i] * means[c][j];
        }
    }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) cov.at2(i, j) -= mu[i] * mu[j];
    return cov;
}

std::uint64_t GmmGenerator::fingerprint() const {
    std::uint64_t h = fnv1a64("gmm", 3);
    h = fnv1a64(&width, sizeof(width), h);
    h = fnv1a64(&height, sizeof(height), h);
    for (std::size_t c = 0; c < weights.size(); ++c) {
        h = fnv1a64(&weights[c], sizeof(double), h);
        h = fnv1a64(means[c].data(), means[c].size() * sizeof(double), h);
        h = fnv1a64(&stddevs[c], sizeof(double), h);
    }
    return h;
}

std::pair<Tensor, int> ShapesGenerator::sample(SeededRng& rng) const {
    const int kind = static_cast<int>(rng.uniform_index(kClasses));
    const double w = static_cast<double>(width), h = static_cast<double>(height);
    const double cx = rng.uniform(0.35, 0.65) * w;
    const double cy = rng.uniform(0.35, 0.65) * h;
    const double rx = rng.uniform(0.20, 0.34) * w;
    const double ry = rng.uniform(0.20, 0.34) * h;
    const double bar = std::max(2.0, rng.uniform(0.14, 0.24) * w);
    Tensor img({input_dim()});
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            bool on = false;
            switch (kind) {
                case 0:  // rectangle
                    on = std::abs(px - cx) <= rx && std::abs(py - cy) <= ry;
                    break;
                case 1: {  // ellipse
                    const double dx = (px - cx) / rx, dy = (py - cy) / ry;
                    on = dx * dx + dy * dy <= 1.0;
                    break;
                }
                case 2:  // cross
                    on = (std::abs(px - cx) <= 0.5 * bar && std::abs(py - cy) <= ry) ||
                         (std::abs(py - cy) <= 0.5 * bar && std::abs(px - cx) <= rx);
                    break;
                case 3: {  // upward triangle
                    const double t = (py - (cy - ry)) / (2.0 * ry);
                    on = t >= 0.0 && t <= 1.0 && std::abs(px - cx) <= t * rx;
                    break;
                }
            }
            img[y * width + x] = on ? 1.0 : 0.0;
        }
    return {std::move(img), kind};
}

std::uint64_t ShapesGenerator::fingerprint() const {
    std::uint64_t h = fnv1a64("shapes", 6);
    h = fnv1a64(&width, sizeof(width), h);
    h = fnv1a64(&height, sizeof(height), h);
    return h;
}

template <class Gen>
static Dataset make_dataset_impl(const Gen& gen, std::size_t n, SeededRng rng, const std::string& split,
                                 std::size_t width, std::size_t height) {
    Dataset d;
    d.images = Tensor({n, gen.input_dim()});
    d.labels.resize(n);
    d.split = split;
    d.width = width;
    d.height = height;
    for (std::size_t i = 0; i < n; ++i) {
        SeededRng draw = rng.child(i);
        auto [img, label] = gen.sample(draw);
        std::memcpy(d.images.data() + i * gen.input_dim(), img.data(), gen.input_dim() * sizeof(double));
        d.labels[i] = label;
    }
    return d;
}

Dataset make_dataset_from_gmm(const GmmGenerator& gen, std::size_t n, SeededRng rng, const std::string& split) {
    return make_dataset_impl(gen, n, rng, split, gen.width, gen.height);
}

Dataset make_dataset_from_shapes(const ShapesGenerator& gen, std::size_t n, SeededRng rng, const std::string& split) {
    return make_dataset_impl(gen, n, rng, split, gen.width, gen.height);
}

// ------------------------------------------------------------ augmentation

std::string transform_name(TransformKind k) {
    switch (k) {
        case TransformKind::HorizontalFlip: return "horizontal_flip";
        case TransformKind::VerticalFlip: return "vertical_flip";
        case TransformKind::Translation: return "translation";
        case TransformKind::Scaling: return "scaling";
        case TransformKind::Rotation: return "rotation";
        case TransformKind::AnisotropicScaling: return "anisotropic_scaling";
        case TransformKind::AnisotropicRotation: return "anisotropic_rotation";
        case TransformKind::Brightness: return "brightness";
        case TransformKind::Contrast: return "contrast";
        case TransformKind::Hue: return "hue";
        case TransformKind::Saturation: return "saturation";
    }
    throw ConfigError("unknown transform");
}

TransformKind transform_from_name(const std::string& s) {
    for (int k = 0; k <= static_cast<int>(TransformKind::Saturation); ++k)
        if (transform_name(static_cast<TransformKind>(k)) == s) return static_cast<TransformKind>(k);
    throw ConfigError("unknown transform: " + s);
}

void AugmentationPipeline::validate() const {
    for (const Transform& t : transforms) {
        if (t.prob < 0.0 || t.prob > 1.0) throw ConfigError("transform probability must be in [0,1]");
        if (t.hi < t.lo) throw ConfigError("transform range inverted");
    }
}

AugmentationPipeline AugmentationPipeline::naive() {
    AugmentationPipeline p;
    p.preset = "naive";
    const double b = 0.1;
    p.transforms = {
        {TransformKind::HorizontalFlip, b},
        {TransformKind::Translation, b, 0.0, 3.0},
        {TransformKind::Scaling, b, 0.0, 0.2},
        {TransformKind::Rotation, b, 0.0, 10.0},
        {TransformKind::AnisotropicScaling, b, 0.0, 0.2},
        {TransformKind::AnisotropicRotation, 0.5},
        {TransformKind::Brightness, b, 0.0, 0.2},
        {TransformKind::Contrast, b, 0.0, 0.25},
        {TransformKind::Hue, b, 0.0, 0.25 * 3.14159265358979323846},
        {TransformKind::Saturation, b, 0.0, 0.5},
    };
    return p;
}

AugmentationPipeline AugmentationPipeline::tuned_mnist() {
    AugmentationPipeline p;
    p.preset = "tuned_mnist";
    const double b = 0.12;
    p.transforms = {
        {TransformKind::Translation, b, 0.0, 3.0},
        {TransformKind::Scaling, b, 0.0, 0.15},
        {TransformKind::Rotation, b, 0.0, 10.0},
        {TransformKind::AnisotropicScaling, b, 0.0, 0.15},
        {TransformKind::AnisotropicRotation, 0.4},
    };
    return p;
}

AugmentationPipeline AugmentationPipeline::tuned_cifar() {
    AugmentationPipeline p;
    p.preset = "tuned_cifar";
    const double b = 0.12;
    p.transforms = {
        {TransformKind::HorizontalFlip, 1.0},
        {TransformKind::VerticalFlip, b},
        {TransformKind::Scaling, b, 0.0, 0.2},
        {TransformKind::Rotation, b, 0.0, 360.0},
        {TransformKind::AnisotropicScaling, b, 0.0, 0.2},
        {TransformKind::AnisotropicRotation, 0.5},
    };
    return p;
}

AugmentationPipeline AugmentationPipeline::without_color_transforms() const {
    AugmentationPipeline p;
    p.preset = preset;
    for (const Transform& t : transforms)
        if (t.kind != TransformKind::Hue && t.kind != TransformKind::Saturation) p.transforms.push_back(t);
    return p;
}

void save_pipeline(const std::string& path, const AugmentationPipeline& p) {
    nlohmann::json j;
    j["preset"] = p.preset;
    j["transforms"] = nlohmann::json::array();
    for (const Transform& t : p.transforms)
        j["transforms"].push_back({{"kind", transform_name(t.kind)},
                                   {"probability", t.prob},
                                   {"range_lo", t.lo},
                                   {"range_hi", t.hi}});
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << j.dump(2) << "\n";
}

AugmentationPipeline load_pipeline(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for read: " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    AugmentationPipeline p;
    p.preset = j.value("preset", "custom");
    for (const auto& tj : j.at("transforms"))
        p.transforms.push_back({transform_from_name(tj.at("kind").get<std::string>()),
                                tj.at("probability").get<double>(), tj.value("range_lo", 0.0),
                                tj.value("range_hi", 0.0)});
    p.validate();
    return p;
}

namespace {

struct Affine {
    // inverse-map coefficients: source = A * dest + t, about the center
    double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;
};

Tensor warp_bilinear(const Tensor& img, std::size_t width, std::size_t height, std::size_t channels,
                     const Affine& m) {
    Tensor out(img.shape());
    const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
    for (std::size_t ch = 0; ch < channels; ++ch) {
        const double* src = img.data() + ch * width * height;
        double* dst = out.data() + ch * width * height;
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const double dx = x - cx, dy = y - cy;
                const double sx = m.a * dx + m.b * dy + m.tx + cx;
                const double sy = m.c * dx + m.d * dy + m.ty + cy;
                const double fx = std::floor(sx), fy = std::floor(sy);
                const double wx = sx - fx, wy = sy - fy;
                double v = 0.0;
                for (int oy = 0; oy <= 1; ++oy)
                    for (int ox = 0; ox <= 1; ++ox) {
                        const long px = static_cast<long>(fx) + ox;
                        const long py = static_cast<long>(fy) + oy;
                        if (px < 0 || py < 0 || px >= static_cast<long>(width) || py >= static_cast<long>(height))
                            continue;  // zero padding
                        const double w = (ox ? wx : 1.0 - wx) * (oy ? wy : 1.0 - wy);
                        v += w * src[py * width + px];
                    }
                dst[y * width + x] = v;
            }
    }
    return out;
}

Affine rotation_affine(double degrees) {
    const double r = degrees * 3.14159265358979323846 / 180.0;
    // inverse map of a rotation by r
    return {std::cos(r), std::sin(r), -std::sin(r), std::cos(r), 0, 0};
}

Affine scale_affine(double sx, double sy) { return {1.0 / sx, 0, 0, 1.0 / sy, 0, 0}; }

Affine compose(const Affine& f, const Affine& g) {
    // source = f(g(dest))
    return {f.a * g.a + f.b * g.c, f.a * g.b + f.b * g.d,
            f.c * g.a + f.d * g.c, f.c * g.b + f.d * g.d,
            f.a * g.tx + f.b * g.ty + f.tx, f.c * g.tx + f.d * g.ty + f.ty};
}

double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace

Tensor apply_augmentation(const Tensor& image, std::size_t width, std::size_t height, std::size_t channels,
                          const AugmentationPipeline& pipeline, SeededRng& rng) {
    pipeline.validate();
    if (image.size() != width * height * channels) throw ShapeError("augmentation image size mismatch");
    Tensor img = image;

    // anisotropic rotation (when triggered) tilts the axes of the anisotropic
    // scaling that follows in the same draw
    double aniso_axis = 0.0;
    bool aniso_axis_set = false;
    for (const Transform& t : pipeline.transforms)
        if (t.kind == TransformKind::AnisotropicRotation && rng.bernoulli(t.prob)) {
            aniso_axis = rng.uniform(0.0, 3.14159265358979323846);
            aniso_axis_set = true;
        }

    for (const Transform& t : pipeline.transforms) {
        if (t.kind == TransformKind::AnisotropicRotation) continue;  // folded into aniso scaling
        if (!rng.bernoulli(t.prob)) continue;
        switch (t.kind) {
            case TransformKind::HorizontalFlip: {
                Tensor flipped(img.shape());
                for (std::size_t ch = 0; ch < channels; ++ch)
                    for (std::size_t y = 0; y < height; ++y)
                        for (std::size_t x = 0; x < width; ++x)
                            flipped[ch * width * height + y * width + x] =
                                img[ch * width * height + y * width + (width - 1 - x)];
                img = std::move(flipped);
                break;
            }
            case TransformKind::VerticalFlip: {
                Tensor flipped(img.shape());
                for (std::size_t ch = 0; ch < channels; ++ch)
                    for (std::size_t y = 0; y < height; ++y)
                        for (std::size_t x = 0; x < width; ++x)
                            flipped[ch * width * height + y * width + x] =
                                img[ch * width * height + (height - 1 - y) * width + x];
                img = std::move(flipped);
                break;
            }
            case TransformKind::Translation: {
                const long max_t = static_cast<long>(t.hi);
                const long tx = static_cast<long>(rng.uniform_index(max_t + 1)) * (rng.bernoulli(0.5) ? 1 : -1);
                const long ty = static_cast<long>(rng.uniform_index(max_t + 1)) * (rng.bernoulli(0.5) ? 1 : -1);
                Affine m;
                m.tx = -static_cast<double>(tx);
                m.ty = -static_cast<double>(ty);
                img = warp_bilinear(img, width, height, channels, m);
                break;
            }
            case TransformKind::Scaling: {
                const double sigma = rng.uniform(t.lo, t.hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
                const double s = std::pow(2.0, sigma);
                img = warp_bilinear(img, width, height, channels, scale_affine(s, s));
                break;
            }
            case TransformKind::Rotation: {
                const double deg = rng.uniform(t.lo, t.hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
                img = warp_bilinear(img, width, height, channels, rotation_affine(deg));
                break;
            }
            case TransformKind::AnisotropicScaling: {
                const double sigma = rng.uniform(t.lo, t.hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
                const double s = std::pow(2.0, sigma);
                Affine m = scale_affine(s, 1.0 / s);
                if (aniso_axis_set) {
                    const double deg = aniso_axis * 180.0 / 3.14159265358979323846;
                    m = compose(rotation_affine(-deg), compose(m, rotation_affine(deg)));
                }
                img = warp_bilinear(img, width, height, channels, m);
                break;
            }
            case TransformKind::Brightness: {
                const double delta = rng.uniform(t.lo, t.hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
                for (std::size_t i = 0; i < img.size(); ++i) img[i] += delta;
                break;
            }
            case TransformKind::Contrast: {
                const double sigma = rng.uniform(t.lo, t.hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
                const double f = std::pow(2.0, sigma);
                for (std::size_t i = 0; i < img.size(); ++i) img[i] = (img[i] - 0.5) * f + 0.5;
                break;
            }
            case TransformKind::Hue: {
                if (channels != 3) throw ConfigError("hue transform requires 3 channels");
                const double a = rng.uniform(t.lo, t.hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
                // rotation about the gray axis
                const double cosa = std::cos(a), sina = std::sin(a);
                const double third = 1.0 / 3.0, rt = std::sqrt(third);
                const std::size_t plane = width * height;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double r = img[i], g = img[plane + i], b = img[2 * plane + i];
                    img[i] = (cosa + (1 - cosa) * third) * r + (third * (1 - cosa) - rt * sina) * g +
                             (third * (1 - cosa) + rt * sina) * b;
                    img[plane + i] = (third * (1 - cosa) + rt * sina) * r + (cosa + third * (1 - cosa)) * g +
                                     (third * (1 - cosa) - rt * sina) * b;
                    img[2 * plane + i] = (third * (1 - cosa) - rt * sina) * r +
                                         (third * (1 - cosa) + rt * sina) * g + (cosa + third * (1 - cosa)) * b;
                }
                break;
            }
            case TransformKind::Saturation: {
                if (channels != 3) throw ConfigError("saturation transform requires 3 channels");
                const double sigma = rng.uniform(t.lo, t.hi) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
                const double f = std::pow(2.0, sigma);
                const std::size_t plane = width * height;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double gray = luminance(img[i], img[plane + i], img[2 * plane + i]);
                    img[i] = gray + f * (img[i] - gray);
                    img[plane + i] = gray + f * (img[plane + i] - gray);
                    img[2 * plane + i] = gray + f * (img[2 * plane + i] - gray);
                }
                break;
            }
            case TransformKind::AnisotropicRotation: break;
        }
    }
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::clamp(img[i], 0.0, 1.0);
    return img;
}

AugmentedSource::AugmentedSource(std::unique_ptr<DataSource> inner, AugmentationPipeline pipeline,
                                 std::size_t width, std::size_t height, std::size_t channels, SeededRng rng,
                                 bool binarize_output)
    : inner_(std::move(inner)), pipeline_(std::move(pipeline)), width_(width), height_(height),
      channels_(channels), rng_(rng), binarize_(binarize_output) {}

Batch AugmentedSource::next_batch(std::size_t m) {
    Batch b = inner_->next_batch(m);
    const std::size_t d = b.images.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
        Tensor img({d});
        std::memcpy(img.data(), b.images.data() + i * d, d * sizeof(double));
        img = apply_augmentation(img, width_, height_, channels_, pipeline_, rng_);
        if (binarize_) img = binarize(img);
        std::memcpy(b.images.data() + i * d, img.data(), d * sizeof(double));
    }
    return b;
}

// ------------------------------------------------------------ mollification

double mollification_stddev(std::size_t epoch_t, std::size_t total_t, double sigma_max) {
    if (total_t == 0 || epoch_t >= total_t) throw ConfigError("mollification epoch out of range");
    const double half = 0.5 * static_cast<double>(total_t);
    if (static_cast<double>(epoch_t) >= half) return 0.0;
    return sigma_max * (1.0 - static_cast<double>(epoch_t) / half);
}

Tensor mollified_batch(const Tensor& x, std::size_t epoch_t, std::size_t total_t, double sigma_max,
                       SeededRng& rng) {
    const double sd = mollification_stddev(epoch_t, total_t, sigma_max);
    if (sd == 0.0) return x;
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + sd * rng.normal();
    out.require_finite("mollified_batch");
    return out;
}

// ------------------------------------------------------------------- files

static std::uint32_t read_be32(std::istream& in, const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError(std::string("truncated idx file reading ") + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

static void write_be32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

Tensor load_idx_images(const std::string& path, std::size_t& rows, std::size_t& cols) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    const std::uint32_t magic = read_be32(in, "magic");
    if (magic != 0x00000803u)
        throw IoError("bad idx image magic " + std::to_string(magic) + " (expected 2051)");
    const std::uint32_t n = read_be32(in, "count");
    rows = read_be32(in, "rows");
    cols = read_be32(in, "cols");
    if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096) throw IoError("idx dimension overflow");
    const std::size_t expected = static_cast<std::size_t>(n) * rows * cols;
    std::vector<unsigned char> bytes(expected);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
    const std::size_t got = static_cast<std::size_t>(in.gcount());
    if (got != expected)
        throw IoError("truncated idx payload: expected " + std::to_string(expected) + " bytes, had " +
                      std::to_string(got));
    Tensor images({n, rows * cols});
    for (std::size_t i = 0; i < expected; ++i) images[i] = bytes[i] / 255.0;
    return images;
}

std::vector<int> load_idx_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    const std::uint32_t magic = read_be32(in, "magic");
    if (magic != 0x00000801u)
        throw IoError("bad idx label magic " + std::to_string(magic) + " (expected 2049)");
    const std::uint32_t n = read_be32(in, "count");
    std::vector<unsigned char> bytes(n);
    in.read(reinterpret_cast<char*>(bytes.data()), n);
    if (static_cast<std::uint32_t>(in.gcount()) != n) throw IoError("truncated idx label payload");
    return std::vector<int>(bytes.begin(), bytes.end());
}

void save_idx_images(const std::string& path, const Tensor& images, std::size_t rows, std::size_t cols) {
    if (images.rank() != 2 || images.dim(1) != rows * cols) throw ShapeError("idx image shape mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    write_be32(out, 0x00000803u);
    write_be32(out, static_cast<std::uint32_t>(images.dim(0)));
    write_be32(out, static_cast<std::uint32_t>(rows));
    write_be32(out, static_cast<std::uint32_t>(cols));
    for (std::size_t i = 0; i < images.size(); ++i) {
        const unsigned char b =
            static_cast<unsigned char>(std::lround(std::clamp(images[i], 0.0, 1.0) * 255.0));
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!out) throw IoError("idx write failed: " + path);
}

void save_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    write_be32(out, 0x00000801u);
    write_be32(out, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) {
        const unsigned char b = static_cast<unsigned char>(l);
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!out) throw IoError("idx write failed: " + path);
}

Dataset load_dataset(const std::string& images_path, const std::string& labels_path, FileFormat format,
                     bool binarize_for_bernoulli, std::size_t width, std::size_t height) {
    Dataset d;
    if (format == FileFormat::Idx) {
        std::size_t rows = 0, cols = 0;
        d.images = load_idx_images(images_path, rows, cols);
        d.width = cols;
        d.height = rows;
    } else {
        d.images = load_tensor(images_path);
        if (d.images.rank() != 2) throw IoError("dataset tensor must be [N x input_dim]");
        d.width = width;
        d.height = height;
    }
    if (!labels_path.empty()) d.labels = load_idx_labels(labels_path);
    if (!d.labels.empty() && d.labels.size() != d.size()) throw IoError("label count does not match image count");
    if (binarize_for_bernoulli) d.images = binarize(d.images);
    return d;
}

}  // namespace vg::data
