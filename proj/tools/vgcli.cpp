// Command-line front end: train / eval / attack / bank / sweep / trajectory /
// kstudy / report. Configs are JSON files (see ExperimentConfig); figure data
// is emitted as CSV. Exit codes: 0 ok, 2 config error, 3 numeric failure.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "vg/downstream.hpp"
#include "vg/harness.hpp"

using namespace vg;

namespace {

harness::ExperimentConfig load_config(const std::string& path) {
    harness::ExperimentConfig cfg = harness::ExperimentConfig::load(path);
    if (const char* root = std::getenv("VG_OUTPUT_ROOT"); root && *root) {
        std::filesystem::path p(cfg.output_dir);
        if (p.is_relative()) cfg.output_dir = (std::filesystem::path(root) / p).string();
    }
    return cfg;
}

std::vector<std::size_t> parse_sizes(const std::vector<std::string>& items) {
    std::vector<std::size_t> out;
    for (const std::string& s : items) out.push_back(static_cast<std::size_t>(std::stoull(s)));
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"desk-scale VAE generalization laboratory"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, out_path, axis = "n_c", report_dir = "report";
    std::vector<std::string> values, run_dirs;
    std::size_t workers = 1, count = 64;
    std::uint64_t seed = 1;
    bool resume = false;

    CLI::App* train_cmd = app.add_subcommand("train", "run an experiment for every configured seed");
    train_cmd->add_option("--config", config_path, "experiment config JSON")->required();
    train_cmd->add_option("--workers", workers, "parallel seed workers");
    train_cmd->add_flag("--resume", resume, "skip seeds whose manifests are complete");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate gaps for a saved checkpoint");
    eval_cmd->add_option("--config", config_path)->required();
    eval_cmd->add_option("--checkpoint", checkpoint_path)->required();
    eval_cmd->add_option("--seed", seed, "evaluation noise seed");

    CLI::App* attack_cmd = app.add_subcommand("attack", "run the encoder attack on a checkpoint");
    attack_cmd->add_option("--config", config_path)->required();
    attack_cmd->add_option("--checkpoint", checkpoint_path)->required();
    attack_cmd->add_option("--seed", seed);
    attack_cmd->add_option("--out", out_path, "diagnostics CSV path");
    double attack_delta = -1, attack_eta = -1;
    std::int64_t attack_steps = -1, attack_images = -1, attack_seeds = -1;
    attack_cmd->add_option("--attack-delta", attack_delta, "L-inf radius");
    attack_cmd->add_option("--attack-eta", attack_eta, "step size");
    attack_cmd->add_option("--attack-steps", attack_steps, "PGD iterations");
    attack_cmd->add_option("--attack-images", attack_images, "number of test images");
    attack_cmd->add_option("--attack-seeds", attack_seeds, "attack seeds per image");

    CLI::App* bank_cmd = app.add_subcommand("bank", "train the diffusion model and persist a sample bank");
    bank_cmd->add_option("--config", config_path)->required();

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "sweep one parameter axis");
    sweep_cmd->add_option("--config", config_path)->required();
    sweep_cmd->add_option("--axis", axis, "m_z or n_c");
    sweep_cmd->add_option("--values", values, "axis values")->required();
    sweep_cmd->add_option("--workers", workers);
    sweep_cmd->add_option("--out", out_path, "sweep CSV path");
    sweep_cmd->add_flag("--resume", resume);

    CLI::App* traj_cmd = app.add_subcommand("trajectory", "double-descent trajectory over both axes");
    traj_cmd->add_option("--config", config_path)->required();
    traj_cmd->add_option("--workers", workers);
    traj_cmd->add_option("--out", out_path, "trajectory CSV path");
    traj_cmd->add_flag("--resume", resume);

    CLI::App* kstudy_cmd = app.add_subcommand("kstudy", "bounded-bank study over k");
    kstudy_cmd->add_option("--config", config_path)->required();
    kstudy_cmd->add_option("--values", values, "k values")->required();
    kstudy_cmd->add_option("--workers", workers);
    kstudy_cmd->add_option("--out", out_path, "k-study CSV path");
    kstudy_cmd->add_flag("--resume", resume);

    CLI::App* report_cmd = app.add_subcommand("report", "aggregate completed runs");
    report_cmd->add_option("--runs", run_dirs, "run directories (.../seed_N)")->required();
    report_cmd->add_option("--out", report_dir, "report output directory");

    CLI::App* sample_cmd = app.add_subcommand("sample", "draw images from a saved diffusion model");
    sample_cmd->add_option("--model", checkpoint_path, "diffusion checkpoint")->required();
    sample_cmd->add_option("--count", count);
    sample_cmd->add_option("--seed", seed);
    sample_cmd->add_option("--out", out_path, "output tensor path")->required();

    CLI11_PARSE(app, argc, argv);

    if (train_cmd->parsed()) {
        harness::ExperimentConfig cfg = load_config(config_path);
        auto results = harness::run_experiment(cfg, resume, workers);
        for (const auto& r : results)
            std::cout << "seed " << r.seed << (r.resumed ? " (resumed)" : "") << ": test ELBO "
                      << format_real(r.final_report.elbo_test) << ", G_g "
                      << format_real(r.final_report.gap_generalization) << " -> " << r.run_dir << "\n";
        return 0;
    }
    if (eval_cmd->parsed()) {
        harness::ExperimentConfig cfg = load_config(config_path);
        harness::BuiltData built = harness::build_data(cfg.dataset, cfg.arch.likelihood);
        VaeParameters params = load_checkpoint(checkpoint_path);
        const SeededRng eval_base(seed, 0xe7a1);
        const double train_elbo = metrics::dataset_elbo(params, built.train, cfg.final_n_mc, eval_base);
        const double test_elbo = metrics::dataset_elbo(params, built.test, cfg.final_n_mc, eval_base);
        std::cout << "elbo_train," << format_real(train_elbo) << "\n";
        std::cout << "elbo_test," << format_real(test_elbo) << "\n";
        std::cout << "gap_generalization," << format_real(train_elbo - test_elbo) << "\n";
        if (cfg.eval_amortization) {
            data::Dataset subset = built.test.slice(0, std::min(cfg.svi_eval_examples, built.test.size()));
            const double ga = metrics::amortization_gap(params, subset, cfg.svi, cfg.svi.n_mc,
                                                        eval_base.child(1));
            std::cout << "gap_amortization," << format_real(ga) << "\n";
        }
        return 0;
    }
    if (attack_cmd->parsed()) {
        harness::ExperimentConfig cfg = load_config(config_path);
        if (attack_delta >= 0) cfg.attack_cfg.delta = attack_delta;
        if (attack_eta > 0) cfg.attack_cfg.eta = attack_eta;
        if (attack_steps > 0) cfg.attack_cfg.steps = static_cast<std::size_t>(attack_steps);
        if (attack_images > 0) cfg.attack_cfg.n_images = static_cast<std::size_t>(attack_images);
        if (attack_seeds > 0) cfg.attack_cfg.n_seeds = static_cast<std::size_t>(attack_seeds);
        harness::BuiltData built = harness::build_data(cfg.dataset, cfg.arch.likelihood);
        VaeParameters params = load_checkpoint(checkpoint_path);
        attack::RobustnessReport rep =
            attack::robustness_gap(params, built.test, cfg.attack_cfg, SeededRng(seed, 0xa77a));
        std::cout << "gap_robustness," << format_real(rep.gap) << "\n";
        if (!out_path.empty()) {
            std::ofstream out(out_path);
            out << rep.csv();
        }
        return 0;
    }
    if (bank_cmd->parsed()) {
        harness::ExperimentConfig cfg = load_config(config_path);
        auto [diffusion_path, bank_path] = harness::prepare_bank(cfg);
        std::cout << "diffusion: " << diffusion_path << "\nbank: " << bank_path << "\n";
        return 0;
    }
    if (sweep_cmd->parsed()) {
        harness::ExperimentConfig cfg = load_config(config_path);
        harness::SweepResult result = harness::run_axis_sweep(cfg, axis, parse_sizes(values), resume, workers);
        const std::string path = out_path.empty() ? cfg.output_dir + "/" + cfg.name + "_sweep.csv" : out_path;
        std::ofstream out(path);
        out << result.csv();
        std::cout << "sweep CSV: " << path << "\n";
        return 0;
    }
    if (traj_cmd->parsed()) {
        harness::ExperimentConfig cfg = load_config(config_path);
        harness::TrajectorySpec spec;
        harness::SweepResult result = harness::run_double_descent_trajectory(cfg, spec, resume, workers);
        const std::string path =
            out_path.empty() ? cfg.output_dir + "/" + cfg.name + "_trajectory.csv" : out_path;
        std::ofstream out(path);
        out << result.csv();
        std::cout << "trajectory CSV: " << path << "\n";
        return 0;
    }
    if (kstudy_cmd->parsed()) {
        harness::ExperimentConfig cfg = load_config(config_path);
        harness::KStudyResult result = harness::run_k_bank_study(cfg, parse_sizes(values), resume, workers);
        const std::string path = out_path.empty() ? cfg.output_dir + "/" + cfg.name + "_kstudy.csv" : out_path;
        std::ofstream out(path);
        out << result.csv();
        std::cout << "k-study CSV: " << path << "\n";
        return 0;
    }
    if (report_cmd->parsed()) {
        auto rows = harness::report(run_dirs, report_dir);
        std::cout << harness::summary_table(rows);
        return 0;
    }
    if (sample_cmd->parsed()) {
        diff::DiffusionModel model = diff::load_diffusion(checkpoint_path);
        Tensor samples = diff::sample(model, count, SeededRng(seed, 0x5a));
        save_tensor(out_path, samples);
        std::cout << "wrote " << count << " samples to " << out_path << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
