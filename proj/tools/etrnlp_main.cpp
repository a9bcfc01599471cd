#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "etrnlp/cli.hpp"
#include "etrnlp/config.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    std::optional<std::uint64_t> seed_override;
    bool force = false;
    int threads = 1;
};

etrnlp::ExperimentConfig load_cfg(const CommonArgs& args) {
    auto cfg = etrnlp::load_experiment_config(args.config_path);
    if (!args.out_override.empty()) cfg.output_dir = args.out_override;
    if (args.seed_override) cfg.seeds = {*args.seed_override};
    return cfg;
}

void add_common(CLI::App* sub, CommonArgs& args, bool needs_config = true) {
    auto* opt = sub->add_option("--config", args.config_path, "experiment config (JSON)");
    if (needs_config) opt->required();
    sub->add_option("--out", args.out_override, "override output directory");
    sub->add_option("--seed", args.seed_override, "override the seeds list with one seed");
    sub->add_flag("--force", args.force, "allow overwriting existing outputs");
    sub->add_option("--threads", args.threads, "worker threads (search-primitives)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ETR-NLP multi-task learning engine"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, sweep_args, search_args, cka_args, report_args;
    bool resume = false;
    std::string eval_checkpoint, cka_checkpoint, report_baseline;
    std::vector<std::string> report_dirs;

    auto* gen = app.add_subcommand("generate", "render the synthetic dataset");
    add_common(gen, gen_args);

    auto* train = app.add_subcommand("train", "train one run per seed");
    add_common(train, train_args);
    train->add_flag("--resume", resume, "resume from the rolling epoch state");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval, eval_args);
    eval->add_option("checkpoint", eval_checkpoint, "checkpoint file")->required();

    auto* sweep = app.add_subcommand("sweep-gamma", "train across the sharing-ratio grid");
    add_common(sweep, sweep_args);

    auto* search = app.add_subcommand("search-primitives",
                                      "rank all 31 primitive subsets against the conv baseline");
    add_common(search, search_args);

    auto* cka = app.add_subcommand("cka", "per-layer task-pair gradient CKA matrices");
    add_common(cka, cka_args);
    cka->add_option("checkpoint", cka_checkpoint, "checkpoint file")->required();

    auto* report = app.add_subcommand("report", "comparison table over completed runs");
    add_common(report, report_args, /*needs_config=*/false);
    report->add_option("--baseline", report_baseline, "baseline run directory")->required();
    report->add_option("runs", report_dirs, "run directories")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return etrnlp::cli::cmd_generate(load_cfg(gen_args), gen_args.force);
        if (train->parsed())
            return etrnlp::cli::cmd_train(load_cfg(train_args), train_args.force, resume);
        if (eval->parsed()) return etrnlp::cli::cmd_eval(load_cfg(eval_args), eval_checkpoint);
        if (sweep->parsed())
            return etrnlp::cli::cmd_sweep_gamma(load_cfg(sweep_args), sweep_args.force);
        if (search->parsed())
            return etrnlp::cli::cmd_search_primitives(load_cfg(search_args), search_args.force,
                                                      search_args.threads);
        if (cka->parsed())
            return etrnlp::cli::cmd_cka(load_cfg(cka_args), cka_checkpoint, cka_args.force);
        if (report->parsed()) {
            std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
            return etrnlp::cli::cmd_report(dirs, report_baseline, report_args.out_override,
                                           report_args.force);
        }
    } catch (const etrnlp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
