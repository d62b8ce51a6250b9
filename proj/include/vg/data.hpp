#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vg/tensor.hpp"

namespace vg::data {

struct Dataset {
    Tensor images;            // [N x input_dim], values in [0,1] ({0,1} for Bernoulli data)
    std::vector<int> labels;  // empty when unlabeled
    std::string split = "train";
    std::size_t width = 0, height = 0, channels = 1;

    std::size_t size() const { return images.rank() == 2 ? images.dim(0) : 0; }
    std::size_t input_dim() const { return images.rank() == 2 ? images.dim(1) : 0; }
    Dataset slice(std::size_t begin, std::size_t end) const;
};

struct SampleBank {
    Tensor samples;  // [(k*n) x input_dim]
    std::size_t k = 1;
    std::size_t n = 0;  // |D_train|
    std::uint64_t fingerprint = 0;  // generator identity
    std::uint64_t seed = 0;

    std::size_t size() const { return samples.rank() == 2 ? samples.dim(0) : 0; }
    void validate() const;
    // first k_prime * n samples; prefix-nested by construction
    SampleBank prefix(std::size_t k_prime) const;
};

// ---- bank file: "VGB1" | u64 k | u64 n | u64 fingerprint | u64 seed | VGT1 samples ----
void save_bank(const std::string& path, const SampleBank& bank);
SampleBank load_bank(const std::string& path);

// quantize pixel values to the 256-level grid used by the MoL likelihood
Tensor quantize_256(const Tensor& x);
Tensor binarize(const Tensor& x, double threshold = 0.5);

// ---------------------------------------------------------------- batches

struct Batch {
    Tensor images;                        // [M x input_dim]
    std::vector<int> labels;              // empty when unavailable
    std::vector<std::uint8_t> provenance; // 1 = real, 0 = synthetic (when meaningful)
    std::vector<std::size_t> indices;     // source indices (when meaningful)
    std::size_t size() const { return images.rank() == 2 ? images.dim(0) : 0; }
};

// Single-consumer batch iterator. epoch_size() is the number of samples that
// counts as one effective epoch (|D_train| regardless of where batches come
// from). Batches always hold exactly the requested count; a trailing partial
// window is dropped.
class DataSource {
public:
    virtual ~DataSource() = default;
    virtual Batch next_batch(std::size_t m) = 0;
    virtual std::size_t epoch_size() const = 0;
};

class FiniteSource : public DataSource {
public:
    FiniteSource(Dataset dataset, SeededRng rng, bool shuffle = true);
    Batch next_batch(std::size_t m) override;
    std::size_t epoch_size() const override { return dataset_.size(); }
    const Dataset& dataset() const { return dataset_; }

private:
    void start_epoch();
    Dataset dataset_;
    SeededRng rng_;
    bool shuffle_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

class BankSource : public DataSource {
public:
    // epoch_n: samples per effective epoch (defaults to bank.n)
    BankSource(SampleBank bank, bool replay, std::size_t epoch_n = 0);
    Batch next_batch(std::size_t m) override;
    std::size_t epoch_size() const override { return epoch_n_; }
    std::size_t consumed() const { return consumed_; }

private:
    SampleBank bank_;
    bool replay_;
    std::size_t epoch_n_;
    std::size_t pos_ = 0;
    std::size_t consumed_ = 0;
};

// Unlimited fresh i.i.d. draws from a generator (oracle or model sampler).
class GenerativeSource : public DataSource {
public:
    using Generator = std::function<std::pair<Tensor, int>(SeededRng&)>;  // one image row + label
    GenerativeSource(Generator gen, std::size_t input_dim, std::size_t epoch_n, SeededRng rng);
    Batch next_batch(std::size_t m) override;
    std::size_t epoch_size() const override { return epoch_n_; }

private:
    Generator gen_;
    std::size_t input_dim_;
    std::size_t epoch_n_;
    SeededRng rng_;
    std::uint64_t draw_count_ = 0;
};

// Each batch takes ceil(m*x/100) rows from the real stream, remainder from
// the synthetic stream. x=100 is stream-equal to the pure finite source,
// x=0 to the pure bank source.
class MixedSource : public DataSource {
public:
    MixedSource(std::unique_ptr<DataSource> real, std::unique_ptr<DataSource> synthetic, double x_percent);
    Batch next_batch(std::size_t m) override;
    std::size_t epoch_size() const override;

private:
    std::unique_ptr<DataSource> real_, synthetic_;
    double x_percent_;
};

// -------------------------------------------------------- oracle generators

// Pixel-space Gaussian mixture with analytic moments; pixels are clipped to
// [0,1] but component stddevs are small enough that clipping is negligible
// for moment checks.
struct GmmGenerator {
    std::size_t width = 16, height = 16;
    std::vector<double> weights;        // per component
    std::vector<Tensor> means;          // per component, [width*height]
    std::vector<double> stddevs;        // per component

    static GmmGenerator make(std::size_t width, std::size_t height, std::size_t components,
                             std::uint64_t build_seed);
    std::size_t input_dim() const { return width * height; }
    std::pair<Tensor, int> sample(SeededRng& rng) const;
    Tensor analytic_mean() const;
    // full covariance [D x D]
    Tensor analytic_covariance() const;
    std::uint64_t fingerprint() const;
};

// Procedural binary shapes; label is the shape kind.
struct ShapesGenerator {
    std::size_t width = 16, height = 16;
    static constexpr std::size_t kClasses = 4;  // rectangle, ellipse, cross, triangle

    std::size_t input_dim() const { return width * height; }
    std::pair<Tensor, int> sample(SeededRng& rng) const;
    std::uint64_t fingerprint() const;
};

Dataset make_dataset_from_gmm(const GmmGenerator& gen, std::size_t n, SeededRng rng, const std::string& split);
Dataset make_dataset_from_shapes(const ShapesGenerator& gen, std::size_t n, SeededRng rng, const std::string& split);

// ------------------------------------------------------------ augmentation

enum class TransformKind {
    HorizontalFlip,
    VerticalFlip,
    Translation,
    Scaling,
    Rotation,
    AnisotropicScaling,
    AnisotropicRotation,
    Brightness,
    Contrast,
    Hue,
    Saturation,
};

std::string transform_name(TransformKind k);
TransformKind transform_from_name(const std::string& s);

struct Transform {
    TransformKind kind;
    double prob;       // application probability b
    double lo = 0.0;   // parameter range (meaning depends on kind)
    double hi = 0.0;
};

struct AugmentationPipeline {
    std::string preset = "custom";
    std::vector<Transform> transforms;

    static AugmentationPipeline naive();        // image-generic set
    static AugmentationPipeline tuned_mnist();  // grayscale-digit set
    static AugmentationPipeline tuned_cifar();
    // drops transforms that need 3 channels (hue/saturation)
    AugmentationPipeline without_color_transforms() const;
    void validate() const;
};

void save_pipeline(const std::string& path, const AugmentationPipeline& p);
AugmentationPipeline load_pipeline(const std::string& path);

// Applies each transform independently with its probability. Geometric
// transforms resample bilinearly around the image center with zero padding;
// the result is re-clipped to [0,1]. Channel planes are stored contiguously.
Tensor apply_augmentation(const Tensor& image, std::size_t width, std::size_t height, std::size_t channels,
                          const AugmentationPipeline& pipeline, SeededRng& rng);

// Augmenting source: wraps a finite source, transforming every emitted image.
class AugmentedSource : public DataSource {
public:
    AugmentedSource(std::unique_ptr<DataSource> inner, AugmentationPipeline pipeline, std::size_t width,
                    std::size_t height, std::size_t channels, SeededRng rng, bool binarize_output);
    Batch next_batch(std::size_t m) override;
    std::size_t epoch_size() const override { return inner_->epoch_size(); }

private:
    std::unique_ptr<DataSource> inner_;
    AugmentationPipeline pipeline_;
    std::size_t width_, height_, channels_;
    SeededRng rng_;
    bool binarize_;
};

// ------------------------------------------------------------ mollification

// Scheduled additive Gaussian noise: stddev anneals linearly from sigma_max
// at t=0 to zero at t=T/2; the second half of training sees clean data.
double mollification_stddev(std::size_t epoch_t, std::size_t total_t, double sigma_max);
Tensor mollified_batch(const Tensor& x, std::size_t epoch_t, std::size_t total_t, double sigma_max, SeededRng& rng);

// ------------------------------------------------------------------- files

// IDX (big-endian): 0x00000803 images / 0x00000801 labels
Tensor load_idx_images(const std::string& path, std::size_t& rows, std::size_t& cols);
std::vector<int> load_idx_labels(const std::string& path);
void save_idx_images(const std::string& path, const Tensor& images, std::size_t rows, std::size_t cols);
void save_idx_labels(const std::string& path, const std::vector<int>& labels);

enum class FileFormat { Idx, Vgt };

// Loads images (+ optional labels), normalizes to [0,1], binarizes at 0.5
// when the consumer uses a Bernoulli likelihood.
Dataset load_dataset(const std::string& images_path, const std::string& labels_path, FileFormat format,
                     bool binarize_for_bernoulli, std::size_t width = 0, std::size_t height = 0);

}  // namespace vg::data
