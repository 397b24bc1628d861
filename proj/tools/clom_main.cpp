// clom: desk-scale few-shot class-incremental learning lab.
//
// Subcommands: gen, train, protocol, analyze, sweep. Every run is a pure
// function of (config, seed); re-running a command reproduces its output
// files byte for byte.

#include <algorithm>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "clom/cli.hpp"
#include "clom/config.hpp"

namespace {

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '\r', ' ');
    return s;
}

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    uint64_t seed_override = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config (JSON)")
        ->required();
    cmd->add_option("--out", args.out_override, "override the output directory");
    args.seed_opt = cmd->add_option("--seed", args.seed_override,
                                    "override the seed list");
}

clom::ExperimentConfig load(const CommonArgs& args) {
    clom::ExperimentConfig cfg = clom::load_config_file(args.config_path);
    if (!args.out_override.empty()) cfg.output_dir = args.out_override;
    if (args.seed_opt && args.seed_opt->count() > 0)
        cfg.seeds = {args.seed_override};
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CLOM few-shot class-incremental learning lab"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, protocol_args, analyze_args, sweep_args;
    CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    add_common(gen, gen_args);
    CLI::App* train = app.add_subcommand("train", "base-session training + checkpoint");
    add_common(train, train_args);
    CLI::App* protocol =
        app.add_subcommand("protocol", "full FSCIL loop, emits sessions.csv");
    add_common(protocol, protocol_args);
    CLI::App* analyze =
        app.add_subcommand("analyze", "pattern metrics of a checkpoint");
    add_common(analyze, analyze_args);
    CLI::App* sweep = app.add_subcommand("sweep", "margin grid, emits sweep.csv");
    add_common(sweep, sweep_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return clom::cmd_gen(load(gen_args));
        if (train->parsed()) return clom::cmd_train(load(train_args));
        if (protocol->parsed()) return clom::cmd_protocol(load(protocol_args));
        if (analyze->parsed()) return clom::cmd_analyze(load(analyze_args));
        if (sweep->parsed()) return clom::cmd_sweep(load(sweep_args));
    } catch (const clom::ConfigError& e) {
        std::cerr << "error: config: " << one_line(e.what()) << "\n";
        return 1;
    } catch (const clom::IoError& e) {
        std::cerr << "error: io: " << one_line(e.what()) << "\n";
        return 1;
    } catch (const clom::DimError& e) {
        std::cerr << "error: dimension: " << one_line(e.what()) << "\n";
        return 1;
    } catch (const clom::NumericError& e) {
        std::cerr << "error: numeric: " << one_line(e.what()) << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 1;
}
