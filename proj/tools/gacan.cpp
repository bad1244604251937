// gacan: batch command-line front end.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gacan/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"GACAN traffic forecasting toolkit"};
    app.require_subcommand(1);
    gacan::CommandArgs args;
    std::uint64_t seed = 0;
    std::string config;
    app.add_option("--config", config, "run config file (key = value lines)");
    auto* seed_opt = app.add_option("--seed", seed, "overrides the config seed");
    app.add_option("--out", args.out, "output directory")->capture_default_str();
    app.add_flag("-q,--quiet", args.quiet, "only report errors");

    app.add_subcommand("synth", "write a synthetic dataset (speeds.csv, distances.csv, truth.json)");
    app.add_subcommand("preprocess", "interpolate, split and summarize the data");
    app.add_subcommand("train", "train a model; writes checkpoint.txt and history.csv");

    auto* eval = app.add_subcommand("eval", "metrics and predictions for one split");
    eval->add_option("--checkpoint", args.checkpoint, "trained checkpoint")->required();
    eval->add_option("--split", args.split, "train, val or test")->capture_default_str();

    auto* pred = app.add_subcommand("predict", "H-step forecast from one origin");
    pred->add_option("--checkpoint", args.checkpoint, "trained checkpoint")->required();
    std::size_t t0 = 0;
    pred->add_option("--t0", t0, "origin slice (0-based)")->required();

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    grad->add_option("--scope", args.scope, "primitives, block or model")->capture_default_str();
    grad->add_option("--trials", args.trials, "random inputs per primitive")->capture_default_str();
    grad->add_option("--checkpoint", args.checkpoint, "check at these parameters (block and model scopes)");
    grad->add_flag("--inject-fault", args.inject_fault, "negative control")->group("");

    auto* abl = app.add_subcommand("ablate", "train one model per granularity mask a, b, c, d");
    std::string modes;
    auto* modes_opt = abl->add_option("--modes", modes, "subset of a,b,c,d");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : gacan::exit_config;
    }
    if (!config.empty()) args.config = config;
    if (*seed_opt) args.seed = seed;
    if (*pred) args.t0 = t0;
    if (*modes_opt) args.modes = modes;
    return gacan::run_command(app.get_subcommands().front()->get_name(), args, std::cout, std::cerr);
}
