#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vg/tape.hpp"
#include "vg/tensor.hpp"

namespace vg {

enum class Likelihood { Bernoulli, FixedVarianceGaussian, DiscretizedMixtureOfLogistics };

std::string likelihood_name(Likelihood l);
Likelihood likelihood_from_name(const std::string& name);

// Fully-connected encoder/decoder family. Width is controlled by two axes:
// hidden_dim (n_c) and latent_multiplier (m_z), with d_z = m_z * latent_base.
struct VaeArchitecture {
    std::size_t input_dim = 256;
    std::size_t hidden_dim = 64;         // n_c
    std::size_t latent_base = 8;
    std::size_t latent_multiplier = 1;   // m_z
    std::size_t depth = 2;               // hidden layers per half
    Likelihood likelihood = Likelihood::Bernoulli;
    double gaussian_sigma = 0.1;
    std::size_t mol_components = 3;

    std::size_t latent_dim() const { return latent_base * latent_multiplier; }
    std::size_t decoder_output_dim() const;
    // layer dims as (in, out) pairs
    std::vector<std::pair<std::size_t, std::size_t>> encoder_layer_dims() const;
    std::vector<std::pair<std::size_t, std::size_t>> decoder_layer_dims() const;
    void validate() const;

    bool operator==(const VaeArchitecture&) const = default;
};

struct ParameterCounts {
    std::size_t theta_z = 0;      // last encoder layer + first decoder layer
    std::size_t theta_not_z = 0;  // everything else
    std::size_t total = 0;
};

// Weight matrices are [in x out]; forward is x * W + b.
struct VaeParameters {
    VaeArchitecture arch;
    std::vector<Tensor> enc_w, enc_b, dec_w, dec_b;

    // uniform +-1/sqrt(fan_in) weights, zero biases
    static VaeParameters init(const VaeArchitecture& arch, SeededRng& rng);

    std::vector<Tensor*> all();                // fixed order: enc layers then dec layers
    std::vector<const Tensor*> all() const;
    std::vector<bool> theta_z_mask() const;    // aligned with all(): true for theta_z tensors
    bool same_values(const VaeParameters& o) const;
};

ParameterCounts count_parameters(const VaeArchitecture& arch);

// log_variance is clamped to [-30, 20] on construction.
struct GaussianPosterior {
    Tensor mean;
    Tensor log_variance;
    GaussianPosterior() = default;
    GaussianPosterior(Tensor mu, Tensor logvar);
    std::size_t dim() const { return mean.size(); }
};

// Batched posteriors, rows are examples.
struct PosteriorBatch {
    Tensor mean;      // [B x d_z]
    Tensor log_var;   // [B x d_z], clamped
    GaussianPosterior row(std::size_t i) const { return {mean.row(i), log_var.row(i)}; }
};

// ---- tape-side model ----

// Parameter handles registered on one tape. Encoder and decoder can be
// registered with different trainability (frozen-decoder training, SVI).
struct TapeVae {
    const VaeArchitecture* arch = nullptr;
    std::vector<Tape::Var> enc_w, enc_b, dec_w, dec_b;
    static TapeVae make(Tape& t, const VaeParameters& p, bool train_encoder, bool train_decoder);
};

// q_phi(z|x): returns (mu, logvar) with logvar clamped to [-30, 20]
std::pair<Tape::Var, Tape::Var> encode_tape(Tape& t, const TapeVae& m, Tape::Var x);
// raw likelihood head (logits / mean / MoL params)
Tape::Var decode_tape(Tape& t, const TapeVae& m, Tape::Var z);
// log p_theta(x|z) per example, summed over pixels
Tape::Var log_likelihood_rows_tape(Tape& t, const VaeArchitecture& arch, Tape::Var head, const Tensor& x);
// z = mu + sigma (.) eps
Tape::Var reparameterize_tape(Tape& t, Tape::Var mu, Tape::Var logvar, const Tensor& eps);

// Monte-Carlo ELBO per example with closed-form KL. noise holds n_mc
// tensors of shape [B x d_z].
Tape::Var elbo_rows_tape(Tape& t, const TapeVae& m, const Tensor& x, const std::vector<Tensor>& noise);

// ---- plain evaluation (no gradients) ----

PosteriorBatch encode(const VaeParameters& p, const Tensor& x);
GaussianPosterior encode_one(const VaeParameters& p, const Tensor& x_row);
Tensor reparameterized_sample(const GaussianPosterior& q, SeededRng& rng);
double kl_to_standard_normal(const GaussianPosterior& q);
// likelihood-appropriate point estimate in [0, 1]; z is [B x d_z] or [d_z]
Tensor decode_and_reconstruct(const VaeParameters& p, const Tensor& z);
double log_likelihood(const VaeParameters& p, const Tensor& x_row, const Tensor& z_row);
// single-example ELBO estimate with n_mc samples
double elbo(const VaeParameters& p, const Tensor& x_row, SeededRng& rng, std::size_t n_mc);
// per-example ELBO over a batch under the given frozen noise
Tensor elbo_rows(const VaeParameters& p, const Tensor& x, const std::vector<Tensor>& noise);

// per-pixel MoL bin log-probability table for one pixel's parameters, all
// 256 levels (used by tests and the mixture mean)
std::vector<double> mol_bin_log_probs(const std::vector<double>& logit_pi, const std::vector<double>& mu,
                                      const std::vector<double>& log_s);

// ---- checkpoints: "VGW1" | u32 json_len | arch json | tensors in all() order ----
void save_checkpoint(const std::string& path, const VaeParameters& p);
VaeParameters load_checkpoint(const std::string& path);

}  // namespace vg
