// gaffect: group affect dynamics toolkit.
//
// Subcommands cover the full pipeline on a synthetic or real corpus:
//   simulate -> features -> agreement -> fuse -> analyze -> train -> eval
//
// Exit codes: 0 success, 2 validation/contract error, 1 anything else.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ga/pipeline.hpp"

namespace {

struct CommonOptions {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool config_required = true) {
    auto* c = cmd->add_option("--config", opts.config, "run configuration (JSON)");
    if (config_required) c->required();
    cmd->add_option("--out", opts.out, "output directory (overrides config)");
    cmd->add_option("--seed", opts.seed, "seed override");
    cmd->add_option("--threads", opts.threads, "worker threads");
}

ga::pipeline::RunConfig resolve(const CommonOptions& opts) {
    ga::pipeline::Overrides overrides;
    if (!opts.out.empty()) overrides.out = opts.out;
    overrides.seed = opts.seed;
    overrides.threads = opts.threads;
    return ga::pipeline::load_config(opts.config, overrides);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"group affect dynamics toolkit"};
    app.require_subcommand(1);

    // simulate
    std::string preset = "smoke";
    std::string sim_out;
    std::optional<std::uint64_t> sim_seed;
    auto* sim = app.add_subcommand("simulate", "generate a synthetic corpus");
    sim->add_option("--preset", preset, "smoke | convdiv | training")->required();
    sim->add_option("--out", sim_out, "corpus output directory")->required();
    sim->add_option("--seed", sim_seed, "generator seed")->required();

    CommonOptions features_opts, agreement_opts, fuse_opts, analyze_opts, train_opts, eval_opts;
    auto* features = app.add_subcommand("features", "dyadic + group feature extraction");
    add_common(features, features_opts);
    auto* agreement = app.add_subcommand("agreement", "inter-annotator agreement report");
    add_common(agreement, agreement_opts);
    auto* fuse = app.add_subcommand("fuse", "correlation-weighted label fusion");
    add_common(fuse, fuse_opts);
    auto* analyze = app.add_subcommand("analyze", "convergence-divergence analysis report");
    add_common(analyze, analyze_opts);
    auto* train = app.add_subcommand("train", "train the MLP baseline per feature set");
    add_common(train, train_opts);
    auto* eval = app.add_subcommand("eval", "evaluate trained models on the test split");
    add_common(eval, eval_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (sim->parsed()) {
            ga::pipeline::run_simulate(preset, *sim_seed, sim_out);
            std::cout << "corpus written to " << sim_out << "\n";
        } else if (features->parsed()) {
            ga::pipeline::run_features(resolve(features_opts));
        } else if (agreement->parsed()) {
            ga::pipeline::run_agreement(resolve(agreement_opts));
        } else if (fuse->parsed()) {
            ga::pipeline::run_fuse(resolve(fuse_opts));
        } else if (analyze->parsed()) {
            ga::pipeline::run_analyze(resolve(analyze_opts));
        } else if (train->parsed()) {
            ga::pipeline::run_train(resolve(train_opts));
        } else if (eval->parsed()) {
            ga::pipeline::run_eval(resolve(eval_opts));
        }
    } catch (const ga::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
