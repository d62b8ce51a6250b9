#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vg/attack.hpp"
#include "vg/data.hpp"
#include "vg/diffusion.hpp"
#include "vg/metrics.hpp"
#include "vg/train.hpp"

namespace vg::harness {

enum class Method { Normal, DMaaPx, AugNaive, AugTuned, Mollify, Mixed, Oracle, RHA };

std::string method_name(Method m);
Method method_from_name(const std::string& s);

struct DatasetSpec {
    std::string kind = "shapes";  // shapes | gmm | idx
    std::size_t width = 16, height = 16;
    std::size_t train_size = 512;
    std::size_t test_size = 512;
    std::uint64_t generator_seed = 1234;
    std::size_t gmm_components = 2;
    // used when kind == "idx"
    std::string idx_train_images, idx_train_labels, idx_test_images, idx_test_labels;
};

struct BuiltData {
    data::Dataset train, test;
    std::uint64_t fingerprint = 0;
    // oracle generators when kind is procedural
    bool has_generator = false;
    data::GmmGenerator gmm;
    data::ShapesGenerator shapes;
    bool is_gmm = false;
};

BuiltData build_data(const DatasetSpec& spec, Likelihood likelihood);

struct ExperimentConfig {
    std::string name = "experiment";
    Method method = Method::Normal;
    DatasetSpec dataset;
    VaeArchitecture arch;
    train::TrainConfig train_cfg;

    std::size_t eval_cadence = 10;  // effective epochs between gap evaluations
    std::size_t eval_n_mc = 8;
    std::size_t final_n_mc = 64;

    bool eval_amortization = true;
    bool eval_attack = true;
    bool eval_downstream = true;
    metrics::SviConfig svi;
    std::size_t svi_eval_examples = 128;  // amortization-gap subsample
    attack::AttackConfig attack_cfg;

    std::size_t bank_k = 10;
    diff::DiffusionConfig diffusion;
    diff::DiffusionTrainConfig diffusion_train;
    double mix_percent = 50.0;     // Mixed
    double mollify_sigma_max = 0.5;
    bool rha_prior_samples = true;

    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::string output_dir = "runs";

    void validate() const;
    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;
    std::uint64_t config_hash() const;
};

struct SeedRunResult {
    std::uint64_t seed = 0;
    std::string run_dir;
    metrics::GapReport final_report;
    double downstream_logreg = -1.0;
    double downstream_knn = -1.0;
    double downstream_psnr = 0.0;
    std::size_t steps_executed = 0;  // steps run in this invocation (0 when resumed)
    bool resumed = false;
};

// Executes one (config, seed) pair end to end, writing trace.csv, gaps.json,
// checkpoint.vgw, attack.csv / downstream.csv when enabled, and manifest.json.
SeedRunResult run_single_seed(const ExperimentConfig& cfg, std::uint64_t seed, bool resume);

// All seeds; cells run in a worker pool (each seed fully isolated on disk).
std::vector<SeedRunResult> run_experiment(const ExperimentConfig& cfg, bool resume = false,
                                          std::size_t workers = 1);

// Trains the diffusion model if needed and persists the sample bank without
// running any VAE training. Returns (diffusion checkpoint, bank path).
std::pair<std::string, std::string> prepare_bank(const ExperimentConfig& cfg);

struct SweepCell {
    std::string axis;  // "m_z" or "n_c"
    std::size_t value = 0;
    std::size_t m_z = 0, n_c = 0;
    std::uint64_t seed = 0;
    ParameterCounts counts;
    metrics::GapReport report;
    bool failed = false;
    std::string failure;
    std::string phase;  // used by the trajectory
};

struct SweepResult {
    std::vector<SweepCell> cells;
    static std::string csv_header();
    std::string csv() const;
};

SweepResult run_axis_sweep(const ExperimentConfig& base, const std::string& axis,
                           const std::vector<std::size_t>& values, bool resume = false,
                           std::size_t workers = 1);

// Three concatenated sweeps ordered by total parameter count: grow n_c at
// m_z=1, then m_z at the largest n_c, then n_c again at the largest m_z.
struct TrajectorySpec {
    std::vector<std::size_t> phase1_n_c = {4, 16, 64, 128, 256};
    std::vector<std::size_t> phase2_m_z = {2, 4, 8, 16};
    std::vector<std::size_t> phase3_n_c = {384, 512};
};
SweepResult run_double_descent_trajectory(const ExperimentConfig& base, const TrajectorySpec& spec,
                                          bool resume = false, std::size_t workers = 1);

struct KStudyCell {
    std::size_t k = 0;
    std::uint64_t seed = 0;
    metrics::GapReport report;
};
struct KStudyResult {
    std::vector<KStudyCell> cells;
    std::string master_bank_path;
    std::string csv() const;
};
// One master bank at max(k); smaller k use byte-wise prefixes of it.
KStudyResult run_k_bank_study(const ExperimentConfig& base, const std::vector<std::size_t>& k_values,
                              bool resume = false, std::size_t workers = 1);

struct AggregateRow {
    std::string name;
    std::size_t count = 0;
    double mean_elbo_test = 0, std_elbo_test = 0;
    double mean_gap_g = 0, std_gap_g = 0;
    double mean_gap_a = 0, std_gap_a = 0;
    double mean_gap_r = 0, std_gap_r = 0;
};

// Aggregates completed run directories (mean/std over seeds); refuses to mix
// runs whose dataset fingerprints differ. Also writes a gap-vs-epoch CSV per
// experiment name into report_dir.
std::vector<AggregateRow> report(const std::vector<std::string>& run_dirs, const std::string& report_dir);

std::string summary_table(const std::vector<AggregateRow>& rows);

}  // namespace vg::harness
