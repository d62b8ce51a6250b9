#include "vg/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "vg/downstream.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vg::harness {

std::string method_name(Method m) {
    switch (m) {
        case Method::Normal: return "normal";
        case Method::DMaaPx: return "dmaapx";
        case Method::AugNaive: return "aug_naive";
        case Method::AugTuned: return "aug_tuned";
        case Method::Mollify: return "mollify";
        case Method::Mixed: return "mixed";
        case Method::Oracle: return "oracle";
        case Method::RHA: return "rha";
    }
    throw ConfigError("unknown method");
}

Method method_from_name(const std::string& s) {
    for (int i = 0; i <= static_cast<int>(Method::RHA); ++i)
        if (method_name(static_cast<Method>(i)) == s) return static_cast<Method>(i);
    throw ConfigError("unknown method: " + s);
}

// ------------------------------------------------------------------- data

BuiltData build_data(const DatasetSpec& spec, Likelihood likelihood) {
    BuiltData out;
    if (spec.kind == "shapes") {
        out.shapes.width = spec.width;
        out.shapes.height = spec.height;
        out.has_generator = true;
        out.is_gmm = false;
        SeededRng train_rng(spec.generator_seed, 0x5521);
        SeededRng test_rng(spec.generator_seed, 0x5522);
        out.train = data::make_dataset_from_shapes(out.shapes, spec.train_size, train_rng, "train");
        out.test = data::make_dataset_from_shapes(out.shapes, spec.test_size, test_rng, "test");
        out.fingerprint = out.shapes.fingerprint() ^ spec.generator_seed;
    } else if (spec.kind == "gmm") {
        out.gmm = data::GmmGenerator::make(spec.width, spec.height, spec.gmm_components, spec.generator_seed);
        out.has_generator = true;
        out.is_gmm = true;
        SeededRng train_rng(spec.generator_seed, 0x5521);
        SeededRng test_rng(spec.generator_seed, 0x5522);
        out.train = data::make_dataset_from_gmm(out.gmm, spec.train_size, train_rng, "train");
        out.test = data::make_dataset_from_gmm(out.gmm, spec.test_size, test_rng, "test");
        out.fingerprint = out.gmm.fingerprint() ^ spec.generator_seed;
    } else if (spec.kind == "idx") {
        const bool binarize = likelihood == Likelihood::Bernoulli;
        out.train = data::load_dataset(spec.idx_train_images, spec.idx_train_labels, data::FileFormat::Idx,
                                       binarize);
        out.test = data::load_dataset(spec.idx_test_images, spec.idx_test_labels, data::FileFormat::Idx,
                                      binarize);
        out.test.split = "test";
        if (spec.train_size && spec.train_size < out.train.size())
            out.train = out.train.slice(0, spec.train_size);
        if (spec.test_size && spec.test_size < out.test.size()) out.test = out.test.slice(0, spec.test_size);
        out.fingerprint = fnv1a64(spec.idx_train_images) ^ fnv1a64(out.train.images.data(),
                                                                   out.train.images.size() * sizeof(double));
    } else {
        throw ConfigError("unknown dataset kind: " + spec.kind);
    }
    if (likelihood == Likelihood::Bernoulli && spec.kind == "gmm") {
        out.train.images = data::binarize(out.train.images);
        out.test.images = data::binarize(out.test.images);
    }
    if (likelihood == Likelihood::DiscretizedMixtureOfLogistics) {
        out.train.images = data::quantize_256(out.train.images);
        out.test.images = data::quantize_256(out.test.images);
    }
    return out;
}

// ------------------------------------------------------------------ config

void ExperimentConfig::validate() const {
    arch.validate();
    train_cfg.validate();
    if (seeds.empty()) throw ConfigError("config needs a non-empty seed list");
    if (name.empty()) throw ConfigError("config needs a name");
    if (mix_percent < 0 || mix_percent > 100) throw ConfigError("mix_percent must be in [0,100]");
    if (bank_k == 0) throw ConfigError("bank_k must be >= 1");
    if (arch.input_dim != dataset.width * dataset.height && dataset.kind != "idx")
        throw ConfigError("arch.input_dim must equal dataset width*height");
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    j["method"] = method_name(method);
    j["dataset"] = {{"kind", dataset.kind},
                    {"width", dataset.width},
                    {"height", dataset.height},
                    {"train_size", dataset.train_size},
                    {"test_size", dataset.test_size},
                    {"generator_seed", dataset.generator_seed},
                    {"gmm_components", dataset.gmm_components},
                    {"idx_train_images", dataset.idx_train_images},
                    {"idx_train_labels", dataset.idx_train_labels},
                    {"idx_test_images", dataset.idx_test_images},
                    {"idx_test_labels", dataset.idx_test_labels}};
    j["arch"] = {{"input_dim", arch.input_dim},
                 {"hidden_dim", arch.hidden_dim},
                 {"latent_base", arch.latent_base},
                 {"latent_multiplier", arch.latent_multiplier},
                 {"depth", arch.depth},
                 {"likelihood", likelihood_name(arch.likelihood)},
                 {"gaussian_sigma", arch.gaussian_sigma},
                 {"mol_components", arch.mol_components}};
    j["train"] = {{"effective_epochs", train_cfg.effective_epochs},
                  {"batch_size", train_cfg.batch_size},
                  {"learning_rate", train_cfg.learning_rate},
                  {"optimizer", train_cfg.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
                  {"grad_clip_norm", train_cfg.grad_clip_norm},
                  {"shuffle", train_cfg.shuffle}};
    j["eval"] = {{"cadence", eval_cadence},
                 {"eval_n_mc", eval_n_mc},
                 {"final_n_mc", final_n_mc},
                 {"amortization", eval_amortization},
                 {"attack", eval_attack},
                 {"downstream", eval_downstream},
                 {"svi_steps", svi.steps},
                 {"svi_step_size", svi.step_size},
                 {"svi_n_mc", svi.n_mc},
                 {"svi_eval_examples", svi_eval_examples}};
    j["attack"] = {{"delta", attack_cfg.delta},
                   {"eta", attack_cfg.eta},
                   {"steps", attack_cfg.steps},
                   {"n_images", attack_cfg.n_images},
                   {"n_seeds", attack_cfg.n_seeds},
                   {"msssim_scales", attack_cfg.msssim_scales}};
    j["diffusion"] = {{"timesteps", diffusion.timesteps},
                      {"beta_min", diffusion.beta_min},
                      {"beta_max", diffusion.beta_max},
                      {"hidden_dim", diffusion.hidden_dim},
                      {"depth", diffusion.depth},
                      {"time_embed_dim", diffusion.time_embed_dim},
                      {"train_epochs", diffusion_train.epochs},
                      {"train_batch", diffusion_train.batch_size},
                      {"train_lr", diffusion_train.learning_rate},
                      {"train_lr_floor", diffusion_train.lr_floor_fraction},
                      {"train_ema_decay", diffusion_train.ema_decay},
                      {"bank_k", bank_k}};
    j["mix_percent"] = mix_percent;
    j["mollify_sigma_max"] = mollify_sigma_max;
    j["rha_prior_samples"] = rha_prior_samples;
    j["seeds"] = seeds;
    j["output_dir"] = output_dir;
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ExperimentConfig c;
    c.name = j.at("name").get<std::string>();
    c.method = method_from_name(j.at("method").get<std::string>());
    const json& d = j.at("dataset");
    c.dataset.kind = d.at("kind").get<std::string>();
    c.dataset.width = d.at("width").get<std::size_t>();
    c.dataset.height = d.at("height").get<std::size_t>();
    c.dataset.train_size = d.at("train_size").get<std::size_t>();
    c.dataset.test_size = d.at("test_size").get<std::size_t>();
    c.dataset.generator_seed = d.at("generator_seed").get<std::uint64_t>();
    c.dataset.gmm_components = d.at("gmm_components").get<std::size_t>();
    c.dataset.idx_train_images = d.at("idx_train_images").get<std::string>();
    c.dataset.idx_train_labels = d.at("idx_train_labels").get<std::string>();
    c.dataset.idx_test_images = d.at("idx_test_images").get<std::string>();
    c.dataset.idx_test_labels = d.at("idx_test_labels").get<std::string>();
    const json& a = j.at("arch");
    c.arch.input_dim = a.at("input_dim").get<std::size_t>();
    c.arch.hidden_dim = a.at("hidden_dim").get<std::size_t>();
    c.arch.latent_base = a.at("latent_base").get<std::size_t>();
    c.arch.latent_multiplier = a.at("latent_multiplier").get<std::size_t>();
    c.arch.depth = a.at("depth").get<std::size_t>();
    c.arch.likelihood = likelihood_from_name(a.at("likelihood").get<std::string>());
    c.arch.gaussian_sigma = a.at("gaussian_sigma").get<double>();
    c.arch.mol_components = a.at("mol_components").get<std::size_t>();
    const json& t = j.at("train");
    c.train_cfg.effective_epochs = t.at("effective_epochs").get<std::size_t>();
    c.train_cfg.batch_size = t.at("batch_size").get<std::size_t>();
    c.train_cfg.learning_rate = t.at("learning_rate").get<double>();
    c.train_cfg.optimizer =
        t.at("optimizer").get<std::string>() == "adam" ? OptimizerKind::Adam : OptimizerKind::Sgd;
    c.train_cfg.grad_clip_norm = t.at("grad_clip_norm").get<double>();
    c.train_cfg.shuffle = t.at("shuffle").get<bool>();
    const json& e = j.at("eval");
    c.eval_cadence = e.at("cadence").get<std::size_t>();
    c.eval_n_mc = e.at("eval_n_mc").get<std::size_t>();
    c.final_n_mc = e.at("final_n_mc").get<std::size_t>();
    c.eval_amortization = e.at("amortization").get<bool>();
    c.eval_attack = e.at("attack").get<bool>();
    c.eval_downstream = e.at("downstream").get<bool>();
    c.svi.steps = e.at("svi_steps").get<std::size_t>();
    c.svi.step_size = e.at("svi_step_size").get<double>();
    c.svi.n_mc = e.at("svi_n_mc").get<std::size_t>();
    c.svi_eval_examples = e.at("svi_eval_examples").get<std::size_t>();
    const json& at = j.at("attack");
    c.attack_cfg.delta = at.at("delta").get<double>();
    c.attack_cfg.eta = at.at("eta").get<double>();
    c.attack_cfg.steps = at.at("steps").get<std::size_t>();
    c.attack_cfg.n_images = at.at("n_images").get<std::size_t>();
    c.attack_cfg.n_seeds = at.at("n_seeds").get<std::size_t>();
    c.attack_cfg.msssim_scales = at.at("msssim_scales").get<std::size_t>();
    const json& di = j.at("diffusion");
    c.diffusion.timesteps = di.at("timesteps").get<std::size_t>();
    c.diffusion.beta_min = di.at("beta_min").get<double>();
    c.diffusion.beta_max = di.at("beta_max").get<double>();
    c.diffusion.hidden_dim = di.at("hidden_dim").get<std::size_t>();
    c.diffusion.depth = di.at("depth").get<std::size_t>();
    c.diffusion.time_embed_dim = di.at("time_embed_dim").get<std::size_t>();
    c.diffusion_train.epochs = di.at("train_epochs").get<std::size_t>();
    c.diffusion_train.batch_size = di.at("train_batch").get<std::size_t>();
    c.diffusion_train.learning_rate = di.at("train_lr").get<double>();
    c.diffusion_train.lr_floor_fraction = di.at("train_lr_floor").get<double>();
    c.diffusion_train.ema_decay = di.at("train_ema_decay").get<double>();
    c.bank_k = di.at("bank_k").get<std::size_t>();
    c.mix_percent = j.at("mix_percent").get<double>();
    c.mollify_sigma_max = j.at("mollify_sigma_max").get<double>();
    c.rha_prior_samples = j.at("rha_prior_samples").get<bool>();
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.output_dir = j.at("output_dir").get<std::string>();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

void ExperimentConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for write: " + path);
    out << to_json() << "\n";
}

std::uint64_t ExperimentConfig::config_hash() const { return fnv1a64(to_json()); }

// ------------------------------------------------------- shared artifacts

namespace {

std::string shared_dir_of(const ExperimentConfig& cfg) { return cfg.output_dir + "/" + cfg.name + "/shared"; }

bool needs_bank(const ExperimentConfig& cfg) {
    return cfg.method == Method::DMaaPx || cfg.method == Method::Mixed;
}

// Train-once diffusion model and bank files shared by every seed of an
// experiment; callers serialize access (workers only start after this).
struct SharedArtifacts {
    std::string diffusion_path;
    std::string bank_path;
};

SharedArtifacts ensure_shared_artifacts(const ExperimentConfig& cfg, const BuiltData& built) {
    SharedArtifacts out;
    if (!needs_bank(cfg)) return out;
    const std::string dir = shared_dir_of(cfg);
    fs::create_directories(dir);
    out.diffusion_path = dir + "/diffusion.vgd";
    out.bank_path = dir + "/bank_k" + std::to_string(cfg.bank_k) + ".vgb";

    if (fs::exists(out.bank_path)) return out;
    if (!fs::exists(out.diffusion_path)) {
        SeededRng rng(cfg.dataset.generator_seed, 0xdd);
        diff::DiffusionTrainResult r = diff::train_diffusion(built.train, cfg.diffusion, cfg.diffusion_train, rng);
        diff::save_diffusion(out.diffusion_path, r.model);
    }
    diff::DiffusionModel model = diff::load_diffusion(out.diffusion_path);
    SeededRng rng(cfg.dataset.generator_seed, 0xbb);
    diff::build_bank(model, cfg.bank_k, built.train.size(), rng, out.bank_path);
    return out;
}

// bank samples adjusted to the likelihood's pixel convention
data::SampleBank bank_for_likelihood(data::SampleBank bank, Likelihood lik) {
    if (lik == Likelihood::Bernoulli) bank.samples = data::binarize(bank.samples);
    if (lik == Likelihood::DiscretizedMixtureOfLogistics) bank.samples = data::quantize_256(bank.samples);
    return bank;
}

double now_seconds(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void write_manifest(const std::string& path, const ExperimentConfig& cfg, std::uint64_t seed,
                    std::uint64_t data_fingerprint, const std::string& status, const std::string& stage,
                    const std::string& error, std::size_t steps) {
    json j;
    j["config"] = json::parse(cfg.to_json());
    j["config_hash"] = cfg.config_hash();
    j["seed"] = seed;
    j["dataset_fingerprint"] = data_fingerprint;
    j["status"] = status;
    j["stage"] = stage;
    j["error"] = error;
    j["steps_executed"] = steps;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

template <class Fn>
void parallel_cells(std::size_t count, std::size_t workers, Fn fn) {
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

// -------------------------------------------------------------- single run

SeedRunResult run_single_seed(const ExperimentConfig& cfg, std::uint64_t seed, bool resume) {
    cfg.validate();
    const std::string run_dir = cfg.output_dir + "/" + cfg.name + "/seed_" + std::to_string(seed);
    fs::create_directories(run_dir);
    const std::string manifest_path = run_dir + "/manifest.json";

    SeedRunResult result;
    result.seed = seed;
    result.run_dir = run_dir;

    if (resume && fs::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        json m = json::parse(in);
        if (m.value("status", "") == "complete" && m.value("config_hash", 0ull) == cfg.config_hash()) {
            std::ifstream gin(run_dir + "/gaps.json");
            if (gin) {
                json g = json::parse(gin);
                result.final_report.epoch = g.at("epoch").get<std::size_t>();
                result.final_report.seed = seed;
                result.final_report.elbo_train = g.at("elbo_train").get<double>();
                result.final_report.elbo_test = g.at("elbo_test").get<double>();
                result.final_report.elbo_star = g.at("elbo_star").get<double>();
                result.final_report.gap_generalization = g.at("gap_generalization").get<double>();
                result.final_report.gap_amortization = g.at("gap_amortization").get<double>();
                result.final_report.gap_robustness = g.at("gap_robustness").get<double>();
                result.final_report.has_amortization = g.at("has_amortization").get<bool>();
                result.final_report.has_robustness = g.at("has_robustness").get<bool>();
                result.downstream_logreg = g.value("downstream_logreg", -1.0);
                result.downstream_knn = g.value("downstream_knn", -1.0);
                result.downstream_psnr = g.value("downstream_psnr", 0.0);
                result.steps_executed = 0;
                result.resumed = true;
                return result;
            }
        }
    }

    std::string stage = "build_data";
    BuiltData built;
    try {
        built = build_data(cfg.dataset, cfg.arch.likelihood);
        if (cfg.arch.input_dim != built.train.input_dim())
            throw ConfigError("arch.input_dim does not match dataset");

        stage = "shared_artifacts";
        const SharedArtifacts shared = ensure_shared_artifacts(cfg, built);

        const auto start = std::chrono::steady_clock::now();
        const SeededRng eval_base(seed, 0xe7a1);
        SeededRng root(seed, 0x0a11);

        train::TrainConfig tc = cfg.train_cfg;
        tc.seed = seed;

        train::EvalHook hook;
        if (cfg.eval_cadence > 0) {
            hook = [&](std::size_t epoch, const VaeParameters& params, train::TrainTrace& trace) {
                if (epoch % cfg.eval_cadence != 0 && epoch != tc.effective_epochs) return;
                metrics::GapReport r;
                r.epoch = epoch;
                r.seed = seed;
                r.elbo_train = metrics::dataset_elbo(params, built.train, cfg.eval_n_mc, eval_base);
                r.elbo_test = metrics::dataset_elbo(params, built.test, cfg.eval_n_mc, eval_base);
                r.gap_generalization = r.elbo_train - r.elbo_test;
                trace.reports.push_back(r);
                trace.wall_seconds.push_back(now_seconds(start));
            };
        }

        stage = "train";
        VaeParameters params;
        train::TrainTrace trace;
        switch (cfg.method) {
            case Method::Normal: {
                std::tie(params, trace) = train::train_normal(built.train, cfg.arch, tc, root, hook);
                break;
            }
            case Method::Oracle: {
                const bool binarize = cfg.arch.likelihood == Likelihood::Bernoulli;
                const bool quantize = cfg.arch.likelihood == Likelihood::DiscretizedMixtureOfLogistics;
                data::GenerativeSource::Generator gen;
                if (built.is_gmm) {
                    const data::GmmGenerator g = built.gmm;
                    gen = [g, binarize, quantize](SeededRng& r) {
                        auto [img, label] = g.sample(r);
                        if (binarize) img = data::binarize(img);
                        if (quantize) img = data::quantize_256(img);
                        return std::make_pair(std::move(img), label);
                    };
                } else {
                    const data::ShapesGenerator g = built.shapes;
                    gen = [g](SeededRng& r) { return g.sample(r); };
                }
                data::GenerativeSource source(gen, built.train.input_dim(), built.train.size(), root.child(21));
                std::tie(params, trace) = train::train_dmaapx(source, cfg.arch, tc, root, hook);
                break;
            }
            case Method::DMaaPx: {
                data::SampleBank bank =
                    bank_for_likelihood(data::load_bank(shared.bank_path), cfg.arch.likelihood);
                data::BankSource source(std::move(bank), true);
                std::tie(params, trace) = train::train_dmaapx(source, cfg.arch, tc, root, hook);
                break;
            }
            case Method::Mixed: {
                data::SampleBank bank =
                    bank_for_likelihood(data::load_bank(shared.bank_path), cfg.arch.likelihood);
                auto real = std::make_unique<data::FiniteSource>(built.train, root.child(2), tc.shuffle);
                auto synth = std::make_unique<data::BankSource>(std::move(bank), true);
                data::MixedSource source(std::move(real), std::move(synth), cfg.mix_percent);
                std::tie(params, trace) = train::train_dmaapx(source, cfg.arch, tc, root, hook);
                break;
            }
            case Method::AugNaive:
            case Method::AugTuned: {
                data::AugmentationPipeline pipeline = cfg.method == Method::AugNaive
                                                          ? data::AugmentationPipeline::naive()
                                                          : data::AugmentationPipeline::tuned_mnist();
                if (built.train.channels == 1) pipeline = pipeline.without_color_transforms();
                auto inner = std::make_unique<data::FiniteSource>(built.train, root.child(2), tc.shuffle);
                data::AugmentedSource source(std::move(inner), pipeline, built.train.width, built.train.height,
                                             built.train.channels, root.child(23),
                                             cfg.arch.likelihood == Likelihood::Bernoulli);
                std::tie(params, trace) = train::train_dmaapx(source, cfg.arch, tc, root, hook);
                break;
            }
            case Method::Mollify: {
                std::tie(params, trace) =
                    train::train_mollified(built.train, cfg.arch, tc, cfg.mollify_sigma_max, root, hook);
                break;
            }
            case Method::RHA: {
                std::tie(params, trace) = train::train_rha(
                    built.train, cfg.arch, tc, root,
                    cfg.rha_prior_samples ? train::RhaPhase2Data::PriorSamples
                                          : train::RhaPhase2Data::TrainReconstructions,
                    hook);
                break;
            }
        }
        result.steps_executed = trace.steps_executed;

        stage = "final_eval";
        metrics::GapReport final_report;
        final_report.epoch = tc.effective_epochs;
        final_report.seed = seed;
        final_report.elbo_train = metrics::dataset_elbo(params, built.train, cfg.final_n_mc, eval_base);
        final_report.elbo_test = metrics::dataset_elbo(params, built.test, cfg.final_n_mc, eval_base);
        final_report.gap_generalization = final_report.elbo_train - final_report.elbo_test;

        if (cfg.eval_amortization) {
            stage = "amortization";
            data::Dataset subset = built.test.slice(0, std::min(cfg.svi_eval_examples, built.test.size()));
            final_report.gap_amortization =
                metrics::amortization_gap(params, subset, cfg.svi, cfg.svi.n_mc, eval_base.child(1));
            final_report.elbo_star = final_report.elbo_test + final_report.gap_amortization;
            final_report.has_amortization = true;
        }
        if (cfg.eval_attack) {
            stage = "attack";
            attack::RobustnessReport rep =
                attack::robustness_gap(params, built.test, cfg.attack_cfg, eval_base.child(2));
            final_report.gap_robustness = rep.gap;
            final_report.has_robustness = true;
            std::ofstream out(run_dir + "/attack.csv");
            out << rep.csv();
        }
        if (cfg.eval_downstream && !built.test.labels.empty()) {
            stage = "downstream";
            down::LatentDataset latents = down::extract_latents(params, built.test);
            auto [train_half, test_half] = down::split_halves(latents, eval_base.child(3));
            LogRegConfig lrc;
            result.downstream_logreg = down::logistic_regression_accuracy(train_half, test_half, lrc);
            result.downstream_knn = down::knn_accuracy(train_half, test_half, 5);
            result.downstream_psnr = down::reconstruction_report(params, built.test);
            std::ofstream out(run_dir + "/downstream.csv");
            out << "method,classifier,seed,accuracy\n";
            out << method_name(cfg.method) << ",logreg," << seed << "," << format_real(result.downstream_logreg)
                << "\n";
            out << method_name(cfg.method) << ",knn5," << seed << "," << format_real(result.downstream_knn)
                << "\n";
            out << method_name(cfg.method) << ",psnr," << seed << "," << format_real(result.downstream_psnr)
                << "\n";
        }

        stage = "persist";
        save_checkpoint(run_dir + "/checkpoint.vgw", params);
        {
            std::ofstream out(run_dir + "/trace.csv");
            out << metrics::GapReport::csv_header() << "\n";
            for (std::size_t i = 0; i < trace.reports.size(); ++i)
                out << trace.reports[i].csv_row(trace.wall_seconds[i]) << "\n";
            out << final_report.csv_row(now_seconds(start)) << "\n";
        }
        {
            json g;
            g["epoch"] = final_report.epoch;
            g["elbo_train"] = final_report.elbo_train;
            g["elbo_test"] = final_report.elbo_test;
            g["elbo_star"] = final_report.elbo_star;
            g["gap_generalization"] = final_report.gap_generalization;
            g["gap_amortization"] = final_report.gap_amortization;
            g["gap_robustness"] = final_report.gap_robustness;
            g["has_amortization"] = final_report.has_amortization;
            g["has_robustness"] = final_report.has_robustness;
            g["downstream_logreg"] = result.downstream_logreg;
            g["downstream_knn"] = result.downstream_knn;
            g["downstream_psnr"] = result.downstream_psnr;
            std::ofstream out(run_dir + "/gaps.json");
            out << g.dump(2) << "\n";
        }
        write_manifest(manifest_path, cfg, seed, built.fingerprint, "complete", "done", "",
                       result.steps_executed);
        result.final_report = final_report;
        return result;
    } catch (const std::exception& e) {
        write_manifest(manifest_path, cfg, seed, built.fingerprint, "failed", stage, e.what(),
                       result.steps_executed);
        throw;
    }
}

std::pair<std::string, std::string> prepare_bank(const ExperimentConfig& cfg) {
    ExperimentConfig c = cfg;
    c.method = Method::DMaaPx;
    c.validate();
    BuiltData built = build_data(c.dataset, c.arch.likelihood);
    const SharedArtifacts shared = ensure_shared_artifacts(c, built);
    return {shared.diffusion_path, shared.bank_path};
}

std::vector<SeedRunResult> run_experiment(const ExperimentConfig& cfg, bool resume, std::size_t workers) {
    cfg.validate();
    if (needs_bank(cfg)) {
        // build shared artifacts up front so workers never race
        BuiltData built = build_data(cfg.dataset, cfg.arch.likelihood);
        ensure_shared_artifacts(cfg, built);
    }
    std::vector<SeedRunResult> results(cfg.seeds.size());
    parallel_cells(cfg.seeds.size(), workers,
                   [&](std::size_t i) { results[i] = run_single_seed(cfg, cfg.seeds[i], resume); });
    return results;
}

// ------------------------------------------------------------------ sweeps

std::string SweepResult::csv_header() {
    return "axis,value,phase,m_z,n_c,seed,theta_z,theta_not_z,total_params,failed,failure," +
           metrics::GapReport::csv_header();
}

std::string SweepResult::csv() const {
    std::string out = csv_header() + "\n";
    for (const SweepCell& c : cells) {
        out += c.axis + ',' + std::to_string(c.value) + ',' + c.phase + ',' + std::to_string(c.m_z) + ',' +
               std::to_string(c.n_c) + ',' + std::to_string(c.seed) + ',' + std::to_string(c.counts.theta_z) +
               ',' + std::to_string(c.counts.theta_not_z) + ',' + std::to_string(c.counts.total) + ',' +
               (c.failed ? "1" : "0") + ',' + c.failure + ',' + c.report.csv_row(0.0) + '\n';
    }
    return out;
}

namespace {

ExperimentConfig cell_config(const ExperimentConfig& base, const std::string& tag, std::size_t m_z,
                             std::size_t n_c) {
    ExperimentConfig c = base;
    c.name = base.name + "/" + tag;
    c.arch.latent_multiplier = m_z;
    c.arch.hidden_dim = n_c;
    return c;
}

SweepResult run_cells(const ExperimentConfig& base, const std::vector<std::tuple<std::string, std::string, std::size_t, std::size_t>>& specs,
                      bool resume, std::size_t workers) {
    // specs: (axis, phase, m_z, n_c)
    std::vector<SweepCell> cells;
    std::vector<ExperimentConfig> configs;
    for (const auto& [axis, phase, m_z, n_c] : specs) {
        for (std::uint64_t seed : base.seeds) {
            SweepCell cell;
            cell.axis = axis;
            cell.phase = phase;
            cell.m_z = m_z;
            cell.n_c = n_c;
            cell.value = axis == "m_z" ? m_z : n_c;
            cell.seed = seed;
            try {
                VaeArchitecture a = base.arch;
                a.latent_multiplier = m_z;
                a.hidden_dim = n_c;
                cell.counts = count_parameters(a);
            } catch (const std::exception& e) {
                cell.failed = true;
                cell.failure = e.what();
            }
            cells.push_back(cell);
            configs.push_back(cell_config(base, axis + std::to_string(cell.value) + "_mz" + std::to_string(m_z) +
                                                    "_nc" + std::to_string(n_c),
                                          m_z, n_c));
        }
    }
    parallel_cells(cells.size(), workers, [&](std::size_t i) {
        if (cells[i].failed) return;
        try {
            SeedRunResult r = run_single_seed(configs[i], cells[i].seed, resume);
            cells[i].report = r.final_report;
        } catch (const std::exception& e) {
            cells[i].failed = true;
            cells[i].failure = e.what();
        }
    });
    SweepResult out;
    out.cells = std::move(cells);
    return out;
}

}  // namespace

SweepResult run_axis_sweep(const ExperimentConfig& base, const std::string& axis,
                           const std::vector<std::size_t>& values, bool resume, std::size_t workers) {
    if (axis != "m_z" && axis != "n_c") throw ConfigError("sweep axis must be m_z or n_c");
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::vector<std::tuple<std::string, std::string, std::size_t, std::size_t>> specs;
    for (std::size_t v : values) {
        const std::size_t m_z = axis == "m_z" ? v : base.arch.latent_multiplier;
        const std::size_t n_c = axis == "n_c" ? v : base.arch.hidden_dim;
        specs.emplace_back(axis, "", m_z, n_c);
    }
    return run_cells(base, specs, resume, workers);
}

SweepResult run_double_descent_trajectory(const ExperimentConfig& base, const TrajectorySpec& spec,
                                          bool resume, std::size_t workers) {
    if (spec.phase1_n_c.empty() || spec.phase2_m_z.empty() || spec.phase3_n_c.empty())
        throw ConfigError("trajectory needs non-empty phase value lists");
    std::vector<std::tuple<std::string, std::string, std::size_t, std::size_t>> specs;
    const std::size_t m_z_start = base.arch.latent_multiplier;
    for (std::size_t v : spec.phase1_n_c) specs.emplace_back("n_c", "phase1", m_z_start, v);
    const std::size_t n_c_mid = spec.phase1_n_c.back();
    for (std::size_t v : spec.phase2_m_z) specs.emplace_back("m_z", "phase2", v, n_c_mid);
    const std::size_t m_z_end = spec.phase2_m_z.back();
    for (std::size_t v : spec.phase3_n_c) specs.emplace_back("n_c", "phase3", m_z_end, v);

    SweepResult result = run_cells(base, specs, resume, workers);
    // emitted order must be non-decreasing in total parameters
    for (std::size_t i = base.seeds.size(); i < result.cells.size(); ++i) {
        if (result.cells[i].counts.total < result.cells[i - base.seeds.size()].counts.total)
            throw ConfigError("trajectory parameter counts are not non-decreasing");
    }
    return result;
}

std::string KStudyResult::csv() const {
    std::string out = "k,seed," + metrics::GapReport::csv_header() + "\n";
    for (const KStudyCell& c : cells)
        out += std::to_string(c.k) + ',' + std::to_string(c.seed) + ',' + c.report.csv_row(0.0) + '\n';
    return out;
}

KStudyResult run_k_bank_study(const ExperimentConfig& base, const std::vector<std::size_t>& k_values,
                              bool resume, std::size_t workers) {
    if (k_values.empty()) throw ConfigError("k study needs at least one k");
    BuiltData built = build_data(base.dataset, base.arch.likelihood);

    // master bank at max(k); each smaller k is a byte-wise prefix
    const std::size_t k_max = *std::max_element(k_values.begin(), k_values.end());
    ExperimentConfig master_cfg = base;
    master_cfg.method = Method::DMaaPx;
    master_cfg.bank_k = k_max;
    const SharedArtifacts shared = ensure_shared_artifacts(master_cfg, built);
    data::SampleBank master = data::load_bank(shared.bank_path);

    KStudyResult out;
    out.master_bank_path = shared.bank_path;
    const std::string dir = shared_dir_of(base);
    for (std::size_t k : k_values) {
        const std::string path = dir + "/bank_k" + std::to_string(k) + ".vgb";
        if (!fs::exists(path)) data::save_bank(path, master.prefix(k));
    }

    std::vector<KStudyCell> cells;
    std::vector<ExperimentConfig> configs;
    for (std::size_t k : k_values)
        for (std::uint64_t seed : base.seeds) {
            KStudyCell cell;
            cell.k = k;
            cell.seed = seed;
            cells.push_back(cell);
            ExperimentConfig c = base;
            c.method = Method::DMaaPx;
            c.bank_k = k;
            c.name = base.name + "/k" + std::to_string(k);
            configs.push_back(c);
        }
    parallel_cells(cells.size(), workers, [&](std::size_t i) {
        // the prefix bank already exists under the *base* shared dir; copy it
        // into the cell's shared dir so run_single_seed finds it
        const std::string cell_dir = shared_dir_of(configs[i]);
        fs::create_directories(cell_dir);
        const std::string want = cell_dir + "/bank_k" + std::to_string(cells[i].k) + ".vgb";
        if (!fs::exists(want))
            fs::copy_file(dir + "/bank_k" + std::to_string(cells[i].k) + ".vgb", want);
        SeedRunResult r = run_single_seed(configs[i], cells[i].seed, resume);
        cells[i].report = r.final_report;
    });
    out.cells = std::move(cells);
    return out;
}

// ------------------------------------------------------------------ report

std::vector<AggregateRow> report(const std::vector<std::string>& run_dirs, const std::string& report_dir) {
    if (run_dirs.empty()) throw ConfigError("report needs at least one run directory");
    struct Entry {
        std::string name;
        std::uint64_t fingerprint;
        metrics::GapReport gaps;
    };
    std::vector<Entry> entries;
    for (const std::string& dir : run_dirs) {
        std::ifstream min(dir + "/manifest.json");
        if (!min) throw IoError("missing manifest in " + dir);
        json m = json::parse(min);
        if (m.value("status", "") != "complete") throw ConfigError("run not complete: " + dir);
        std::ifstream gin(dir + "/gaps.json");
        if (!gin) throw IoError("missing gaps.json in " + dir);
        json g = json::parse(gin);
        Entry e;
        e.name = m.at("config").at("name").get<std::string>();
        e.fingerprint = m.at("dataset_fingerprint").get<std::uint64_t>();
        e.gaps.elbo_test = g.at("elbo_test").get<double>();
        e.gaps.gap_generalization = g.at("gap_generalization").get<double>();
        e.gaps.gap_amortization = g.at("gap_amortization").get<double>();
        e.gaps.gap_robustness = g.at("gap_robustness").get<double>();
        entries.push_back(std::move(e));
    }
    for (const Entry& e : entries)
        if (e.fingerprint != entries.front().fingerprint)
            throw ConfigError("refusing to aggregate runs with different dataset fingerprints");

    std::map<std::string, std::vector<const Entry*>> groups;
    for (const Entry& e : entries) groups[e.name].push_back(&e);

    auto mean_std = [](const std::vector<double>& xs) {
        double m = 0;
        for (double x : xs) m += x;
        m /= xs.size();
        double v = 0;
        for (double x : xs) v += (x - m) * (x - m);
        v = xs.size() > 1 ? v / (xs.size() - 1) : 0.0;
        return std::make_pair(m, std::sqrt(v));
    };

    std::vector<AggregateRow> rows;
    for (const auto& [name, group] : groups) {
        std::vector<double> elbo, gg, ga, gr;
        for (const Entry* e : group) {
            elbo.push_back(e->gaps.elbo_test);
            gg.push_back(e->gaps.gap_generalization);
            ga.push_back(e->gaps.gap_amortization);
            gr.push_back(e->gaps.gap_robustness);
        }
        AggregateRow row;
        row.name = name;
        row.count = group.size();
        std::tie(row.mean_elbo_test, row.std_elbo_test) = mean_std(elbo);
        std::tie(row.mean_gap_g, row.std_gap_g) = mean_std(gg);
        std::tie(row.mean_gap_a, row.std_gap_a) = mean_std(ga);
        std::tie(row.mean_gap_r, row.std_gap_r) = mean_std(gr);
        rows.push_back(std::move(row));
    }

    if (!report_dir.empty()) {
        fs::create_directories(report_dir);
        std::ofstream out(report_dir + "/summary.csv");
        out << "name,count,mean_elbo_test,std_elbo_test,mean_gap_g,std_gap_g,mean_gap_a,std_gap_a,"
               "mean_gap_r,std_gap_r\n";
        for (const AggregateRow& r : rows)
            out << r.name << ',' << r.count << ',' << format_real(r.mean_elbo_test) << ','
                << format_real(r.std_elbo_test) << ',' << format_real(r.mean_gap_g) << ','
                << format_real(r.std_gap_g) << ',' << format_real(r.mean_gap_a) << ','
                << format_real(r.std_gap_a) << ',' << format_real(r.mean_gap_r) << ','
                << format_real(r.std_gap_r) << "\n";
    }
    return rows;
}

std::string summary_table(const std::vector<AggregateRow>& rows) {
    std::string out = "experiment                           elbo_test        G_g        G_a        G_r\n";
    char buf[256];
    for (const AggregateRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-36s %9.3f %10.3f %10.3f %10.4f\n", r.name.c_str(),
                      r.mean_elbo_test, r.mean_gap_g, r.mean_gap_a, r.mean_gap_r);
        out += buf;
    }
    return out;
}

}  // namespace vg::harness
