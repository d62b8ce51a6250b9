#include "vg/vae.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace vg {

std::string likelihood_name(Likelihood l) {
    switch (l) {
        case Likelihood::Bernoulli: return "bernoulli";
        case Likelihood::FixedVarianceGaussian: return "gaussian";
        case Likelihood::DiscretizedMixtureOfLogistics: return "mol";
    }
    throw ConfigError("unknown likelihood");
}

Likelihood likelihood_from_name(const std::string& name) {
    if (name == "bernoulli") return Likelihood::Bernoulli;
    if (name == "gaussian") return Likelihood::FixedVarianceGaussian;
    if (name == "mol") return Likelihood::DiscretizedMixtureOfLogistics;
    throw ConfigError("unknown likelihood: " + name);
}

std::size_t VaeArchitecture::decoder_output_dim() const {
    switch (likelihood) {
        case Likelihood::Bernoulli:
        case Likelihood::FixedVarianceGaussian: return input_dim;
        case Likelihood::DiscretizedMixtureOfLogistics: return 3 * mol_components * input_dim;
    }
    throw ConfigError("unknown likelihood");
}

void VaeArchitecture::validate() const {
    if (input_dim == 0 || latent_base == 0 || latent_multiplier == 0) throw ConfigError("architecture dims must be positive");
    if (depth > 0 && hidden_dim == 0) throw ConfigError("hidden_dim must be positive when depth > 0");
    if (likelihood == Likelihood::DiscretizedMixtureOfLogistics && mol_components == 0)
        throw ConfigError("mol_components must be positive");
    if (likelihood == Likelihood::FixedVarianceGaussian && gaussian_sigma <= 0)
        throw ConfigError("gaussian_sigma must be positive");
}

std::vector<std::pair<std::size_t, std::size_t>> VaeArchitecture::encoder_layer_dims() const {
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    const std::size_t out = 2 * latent_dim();
    if (depth == 0) {
        dims.emplace_back(input_dim, out);
        return dims;
    }
    dims.emplace_back(input_dim, hidden_dim);
    for (std::size_t i = 1; i < depth; ++i) dims.emplace_back(hidden_dim, hidden_dim);
    dims.emplace_back(hidden_dim, out);
    return dims;
}

std::vector<std::pair<std::size_t, std::size_t>> VaeArchitecture::decoder_layer_dims() const {
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    const std::size_t out = decoder_output_dim();
    if (depth == 0) {
        dims.emplace_back(latent_dim(), out);
        return dims;
    }
    dims.emplace_back(latent_dim(), hidden_dim);
    for (std::size_t i = 1; i < depth; ++i) dims.emplace_back(hidden_dim, hidden_dim);
    dims.emplace_back(hidden_dim, out);
    return dims;
}

VaeParameters VaeParameters::init(const VaeArchitecture& arch, SeededRng& rng) {
    arch.validate();
    VaeParameters p;
    p.arch = arch;
    SeededRng enc_rng = rng.child(1);
    SeededRng dec_rng = rng.child(2);
    for (auto [in, out] : arch.encoder_layer_dims()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        p.enc_w.push_back(Tensor::uniform({in, out}, -bound, bound, enc_rng));
        p.enc_b.push_back(Tensor::zeros({out}));
    }
    for (auto [in, out] : arch.decoder_layer_dims()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        p.dec_w.push_back(Tensor::uniform({in, out}, -bound, bound, dec_rng));
        p.dec_b.push_back(Tensor::zeros({out}));
    }
    return p;
}

std::vector<Tensor*> VaeParameters::all() {
    std::vector<Tensor*> v;
    for (std::size_t i = 0; i < enc_w.size(); ++i) {
        v.push_back(&enc_w[i]);
        v.push_back(&enc_b[i]);
    }
    for (std::size_t i = 0; i < dec_w.size(); ++i) {
        v.push_back(&dec_w[i]);
        v.push_back(&dec_b[i]);
    }
    return v;
}

std::vector<const Tensor*> VaeParameters::all() const {
    std::vector<const Tensor*> v;
    for (std::size_t i = 0; i < enc_w.size(); ++i) {
        v.push_back(&enc_w[i]);
        v.push_back(&enc_b[i]);
    }
    for (std::size_t i = 0; i < dec_w.size(); ++i) {
        v.push_back(&dec_w[i]);
        v.push_back(&dec_b[i]);
    }
    return v;
}

std::vector<bool> VaeParameters::theta_z_mask() const {
    // theta_z: every weight touching z, i.e. the full last encoder layer and
    // the full first decoder layer (including their biases)
    std::vector<bool> mask;
    for (std::size_t i = 0; i < enc_w.size(); ++i) {
        const bool last = (i + 1 == enc_w.size());
        mask.push_back(last);
        mask.push_back(last);
    }
    for (std::size_t i = 0; i < dec_w.size(); ++i) {
        const bool first = (i == 0);
        mask.push_back(first);
        mask.push_back(first);
    }
    return mask;
}

bool VaeParameters::same_values(const VaeParameters& o) const {
    auto a = all();
    auto b = o.all();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!(*a[i] == *b[i])) return false;
    return true;
}

ParameterCounts count_parameters(const VaeArchitecture& arch) {
    arch.validate();
    ParameterCounts c;
    const auto enc = arch.encoder_layer_dims();
    const auto dec = arch.decoder_layer_dims();
    for (std::size_t i = 0; i < enc.size(); ++i) {
        const std::size_t n = enc[i].first * enc[i].second + enc[i].second;
        if (i + 1 == enc.size()) c.theta_z += n; else c.theta_not_z += n;
    }
    for (std::size_t i = 0; i < dec.size(); ++i) {
        const std::size_t n = dec[i].first * dec[i].second + dec[i].second;
        if (i == 0) c.theta_z += n; else c.theta_not_z += n;
    }
    c.total = c.theta_z + c.theta_not_z;
    return c;
}

GaussianPosterior::GaussianPosterior(Tensor mu, Tensor logvar) : mean(std::move(mu)) {
    if (!mean.same_shape(logvar)) throw ShapeError("posterior mean/log_variance shapes differ");
    log_variance = kernels::clamp(logvar, -30.0, 20.0);
}

// ------------------------------------------------------------- tape model

TapeVae TapeVae::make(Tape& t, const VaeParameters& p, bool train_encoder, bool train_decoder) {
    TapeVae m;
    m.arch = &p.arch;
    for (std::size_t i = 0; i < p.enc_w.size(); ++i) {
        m.enc_w.push_back(train_encoder ? t.leaf(p.enc_w[i]) : t.constant(p.enc_w[i]));
        m.enc_b.push_back(train_encoder ? t.leaf(p.enc_b[i]) : t.constant(p.enc_b[i]));
    }
    for (std::size_t i = 0; i < p.dec_w.size(); ++i) {
        m.dec_w.push_back(train_decoder ? t.leaf(p.dec_w[i]) : t.constant(p.dec_w[i]));
        m.dec_b.push_back(train_decoder ? t.leaf(p.dec_b[i]) : t.constant(p.dec_b[i]));
    }
    return m;
}

static Tape::Var mlp_forward(Tape& t, Tape::Var x, const std::vector<Tape::Var>& ws,
                             const std::vector<Tape::Var>& bs) {
    Tape::Var h = x;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        h = t.add_bias(t.matmul(h, ws[i]), bs[i]);
        if (i + 1 < ws.size()) h = t.relu(h);
    }
    return h;
}

std::pair<Tape::Var, Tape::Var> encode_tape(Tape& t, const TapeVae& m, Tape::Var x) {
    const std::size_t d = m.arch->latent_dim();
    if (t.value(x).rank() != 2 || t.value(x).dim(1) != m.arch->input_dim)
        throw ShapeError("encode: input must be [B x input_dim]");
    Tape::Var out = mlp_forward(t, x, m.enc_w, m.enc_b);
    Tape::Var mu = t.slice_cols(out, 0, d);
    Tape::Var logvar = t.clamp(t.slice_cols(out, d, 2 * d), -30.0, 20.0);
    return {mu, logvar};
}

Tape::Var decode_tape(Tape& t, const TapeVae& m, Tape::Var z) {
    if (t.value(z).rank() != 2 || t.value(z).dim(1) != m.arch->latent_dim())
        throw ShapeError("decode: latent must be [B x d_z]");
    return mlp_forward(t, z, m.dec_w, m.dec_b);
}

Tape::Var reparameterize_tape(Tape& t, Tape::Var mu, Tape::Var logvar, const Tensor& eps) {
    Tape::Var sigma = t.exp(t.scale(logvar, 0.5));
    return t.add(mu, t.mul(sigma, t.constant(eps)));
}

// Discretized mixture of logistics over 256 levels. Pixels in [0,1] are
// mapped to [-1,1] where levels are spaced 2/255 apart with half-bin 1/255;
// the lowest bin integrates from -inf and the highest to +inf.
static Tape::Var mol_log_prob_rows(Tape& t, Tape::Var head, const Tensor& x, std::size_t K) {
    const std::size_t B = x.dim(0), D = x.dim(1);
    const std::size_t KD = K * D;
    if (t.value(head).dim(1) != 3 * KD) throw ShapeError("mol head width must be 3*K*input_dim");
    const double h = 1.0 / 255.0;

    Tensor xrep({B, KD}), mask_bot({B, KD}), mask_top({B, KD});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) {
            const double xh = 2.0 * x.at2(b, d) - 1.0;
            const bool bot = xh < -1.0 + 0.5 * h;
            const bool top = xh > 1.0 - 0.5 * h;
            for (std::size_t k = 0; k < K; ++k) {
                const std::size_t j = d * K + k;
                xrep.at2(b, j) = xh;
                mask_bot.at2(b, j) = bot ? 1.0 : 0.0;
                mask_top.at2(b, j) = top ? 1.0 : 0.0;
            }
        }

    Tape::Var logits = t.slice_cols(head, 0, KD);
    Tape::Var means = t.slice_cols(head, KD, 2 * KD);
    Tape::Var log_s = t.clamp(t.slice_cols(head, 2 * KD, 3 * KD), -7.0, 7.0);

    Tape::Var inv_s = t.exp(t.scale(log_s, -1.0));
    Tape::Var centered = t.sub(t.constant(xrep), means);
    Tape::Var plus_in = t.mul(t.add_scalar(centered, h), inv_s);
    Tape::Var min_in = t.mul(t.add_scalar(centered, -h), inv_s);
    Tape::Var mid_in = t.mul(centered, inv_s);

    Tape::Var log_cdf_plus = t.scale(t.softplus(t.scale(plus_in, -1.0)), -1.0);
    Tape::Var log_one_minus_cdf_min = t.scale(t.softplus(min_in), -1.0);
    Tape::Var cdf_delta = t.sub(t.sigmoid(plus_in), t.sigmoid(min_in));

    // interior bins: exact log CDF difference, falling back to the density
    // approximation where the difference underflows
    Tape::Var log_delta = t.log(t.clamp(cdf_delta, 1e-12, 2.0));
    Tape::Var log_pdf_mid = t.sub(t.sub(mid_in, log_s), t.scale(t.softplus(mid_in), 2.0));
    Tape::Var approx = t.add_scalar(log_pdf_mid, std::log(2.0 * h));
    const Tensor& delta_vals = t.value(cdf_delta);
    Tensor mask_small(delta_vals.shape());
    for (std::size_t i = 0; i < mask_small.size(); ++i) mask_small[i] = delta_vals[i] <= 1e-5 ? 1.0 : 0.0;
    Tape::Var interior = t.select(mask_small, approx, log_delta);

    Tape::Var per_comp = t.select(mask_bot, log_cdf_plus, t.select(mask_top, log_one_minus_cdf_min, interior));
    Tape::Var weighted = t.add(t.group_log_softmax(logits, K), per_comp);
    Tape::Var per_pixel = t.group_logsumexp(weighted, K);  // [B x D]
    return t.row_sum(per_pixel);
}

Tape::Var log_likelihood_rows_tape(Tape& t, const VaeArchitecture& arch, Tape::Var head, const Tensor& x) {
    if (x.rank() != 2 || x.dim(1) != arch.input_dim) throw ShapeError("log_likelihood: x must be [B x input_dim]");
    switch (arch.likelihood) {
        case Likelihood::Bernoulli: return t.bernoulli_log_prob_rows(head, x);
        case Likelihood::FixedVarianceGaussian: return t.gaussian_log_prob_rows(head, x, arch.gaussian_sigma);
        case Likelihood::DiscretizedMixtureOfLogistics: return mol_log_prob_rows(t, head, x, arch.mol_components);
    }
    throw ConfigError("unknown likelihood");
}

Tape::Var elbo_rows_tape(Tape& t, const TapeVae& m, const Tensor& x, const std::vector<Tensor>& noise) {
    if (noise.empty()) throw ConfigError("elbo needs n_mc >= 1");
    Tape::Var xin = t.constant(x);
    auto [mu, logvar] = encode_tape(t, m, xin);
    Tape::Var ll_acc{};
    for (std::size_t j = 0; j < noise.size(); ++j) {
        Tape::Var z = reparameterize_tape(t, mu, logvar, noise[j]);
        Tape::Var head = decode_tape(t, m, z);
        Tape::Var ll = log_likelihood_rows_tape(t, *m.arch, head, x);
        ll_acc = j == 0 ? ll : t.add(ll_acc, ll);
    }
    Tape::Var mean_ll = noise.size() == 1 ? ll_acc : t.scale(ll_acc, 1.0 / static_cast<double>(noise.size()));
    return t.sub(mean_ll, t.kl_std_normal_rows(mu, logvar));
}

// ------------------------------------------------------- plain evaluation

static Tensor as_matrix(const Tensor& x, std::size_t cols) {
    if (x.rank() == 1) {
        if (x.size() != cols) throw ShapeError("vector length does not match expected width");
        return x.reshaped({1, cols});
    }
    if (x.rank() != 2 || x.dim(1) != cols) throw ShapeError("matrix width mismatch");
    return x;
}

PosteriorBatch encode(const VaeParameters& p, const Tensor& x) {
    Tape t(false);
    TapeVae m = TapeVae::make(t, p, false, false);
    auto [mu, lv] = encode_tape(t, m, t.constant(as_matrix(x, p.arch.input_dim)));
    return {t.value(mu), t.value(lv)};
}

GaussianPosterior encode_one(const VaeParameters& p, const Tensor& x_row) {
    PosteriorBatch b = encode(p, as_matrix(x_row, p.arch.input_dim));
    return b.row(0);
}

Tensor reparameterized_sample(const GaussianPosterior& q, SeededRng& rng) {
    Tensor z(q.mean.shape());
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = q.mean[i] + std::exp(0.5 * q.log_variance[i]) * rng.normal();
    z.require_finite("reparameterized_sample");
    return z;
}

double kl_to_standard_normal(const GaussianPosterior& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < q.dim(); ++i) {
        const double mu = q.mean[i], lv = q.log_variance[i];
        s += mu * mu + std::exp(lv) - 1.0 - lv;
    }
    return 0.5 * s;
}

Tensor decode_and_reconstruct(const VaeParameters& p, const Tensor& z) {
    const Tensor zm = as_matrix(z, p.arch.latent_dim());
    Tape t(false);
    TapeVae m = TapeVae::make(t, p, false, false);
    Tensor head = t.value(decode_tape(t, m, t.constant(zm)));
    const std::size_t B = zm.dim(0), D = p.arch.input_dim;
    Tensor out({B, D});
    switch (p.arch.likelihood) {
        case Likelihood::Bernoulli: out = kernels::sigmoid(head); break;
        case Likelihood::FixedVarianceGaussian: out = kernels::clamp(head, 0.0, 1.0); break;
        case Likelihood::DiscretizedMixtureOfLogistics: {
            const std::size_t K = p.arch.mol_components, KD = K * D;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t d = 0; d < D; ++d) {
                    double wmax = -1e300;
                    for (std::size_t k = 0; k < K; ++k) wmax = std::max(wmax, head.at2(b, d * K + k));
                    double wsum = 0.0, mean = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        const double w = std::exp(head.at2(b, d * K + k) - wmax);
                        wsum += w;
                        mean += w * head.at2(b, KD + d * K + k);
                    }
                    out.at2(b, d) = std::clamp(0.5 * (mean / wsum + 1.0), 0.0, 1.0);
                }
            break;
        }
    }
    if (z.rank() == 1) return out.reshaped({D});
    return out;
}

double log_likelihood(const VaeParameters& p, const Tensor& x_row, const Tensor& z_row) {
    const Tensor x = as_matrix(x_row, p.arch.input_dim);
    const Tensor z = as_matrix(z_row, p.arch.latent_dim());
    Tape t(false);
    TapeVae m = TapeVae::make(t, p, false, false);
    Tape::Var head = decode_tape(t, m, t.constant(z));
    return t.value(log_likelihood_rows_tape(t, p.arch, head, x))[0];
}

Tensor elbo_rows(const VaeParameters& p, const Tensor& x, const std::vector<Tensor>& noise) {
    Tape t(false);
    TapeVae m = TapeVae::make(t, p, false, false);
    return t.value(elbo_rows_tape(t, m, x, noise));
}

double elbo(const VaeParameters& p, const Tensor& x_row, SeededRng& rng, std::size_t n_mc) {
    if (n_mc == 0) throw ConfigError("elbo needs n_mc >= 1");
    const Tensor x = as_matrix(x_row, p.arch.input_dim);
    std::vector<Tensor> noise;
    noise.reserve(n_mc);
    for (std::size_t j = 0; j < n_mc; ++j) noise.push_back(Tensor::normal({1, p.arch.latent_dim()}, 0.0, 1.0, rng));
    return elbo_rows(p, x, noise)[0];
}

// ------------------------------------------------------------ checkpoints

void save_checkpoint(const std::string& path, const VaeParameters& p) {
    nlohmann::json j;
    j["input_dim"] = p.arch.input_dim;
    j["hidden_dim"] = p.arch.hidden_dim;
    j["latent_base"] = p.arch.latent_base;
    j["latent_multiplier"] = p.arch.latent_multiplier;
    j["depth"] = p.arch.depth;
    j["likelihood"] = likelihood_name(p.arch.likelihood);
    j["gaussian_sigma"] = p.arch.gaussian_sigma;
    j["mol_components"] = p.arch.mol_components;
    const std::string desc = j.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write("VGW1", 4);
    const std::uint32_t len = static_cast<std::uint32_t>(desc.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(desc.data(), static_cast<std::streamsize>(desc.size()));
    for (const Tensor* t : p.all()) write_tensor(out, *t);
    if (!out) throw IoError("checkpoint write failed: " + path);
}

VaeParameters load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "VGW1", 4) != 0) throw IoError("bad checkpoint magic (expected VGW1)");
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    if (!in || len > (1u << 20)) throw IoError("bad checkpoint descriptor length");
    std::string desc(len, '\0');
    in.read(desc.data(), len);
    if (!in) throw IoError("truncated checkpoint descriptor");

    nlohmann::json j = nlohmann::json::parse(desc);
    VaeArchitecture arch;
    arch.input_dim = j.at("input_dim").get<std::size_t>();
    arch.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    arch.latent_base = j.at("latent_base").get<std::size_t>();
    arch.latent_multiplier = j.at("latent_multiplier").get<std::size_t>();
    arch.depth = j.at("depth").get<std::size_t>();
    arch.likelihood = likelihood_from_name(j.at("likelihood").get<std::string>());
    arch.gaussian_sigma = j.at("gaussian_sigma").get<double>();
    arch.mol_components = j.at("mol_components").get<std::size_t>();
    arch.validate();

    VaeParameters p;
    p.arch = arch;
    for (std::size_t i = 0; i < arch.encoder_layer_dims().size(); ++i) {
        p.enc_w.push_back(read_tensor(in));
        p.enc_b.push_back(read_tensor(in));
    }
    for (std::size_t i = 0; i < arch.decoder_layer_dims().size(); ++i) {
        p.dec_w.push_back(read_tensor(in));
        p.dec_b.push_back(read_tensor(in));
    }
    return p;
}

}  // namespace vg
