// Batch CLI for low-rank mixture-of-experts continual segmentation runs.
// Subcommands: train, continue, eval, inspect, merge, classify. Every
// command is non-interactive and exits nonzero on any contract violation.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

#include "lomoe/lomoe.hpp"

int main(int argc, char** argv) {
    CLI::App app{"low-rank mixture-of-experts continual segmentation"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, out_path, dataset_ref, profile;
    long long seed = -1;
    int task = 0;
    std::size_t upto = 0;
    std::size_t count = 40;

    auto add_overrides = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "override the config seed");
        cmd->add_option("--profile", profile, "backbone profile: desk or paper-dims");
        cmd->add_option("--out", out_path, "override the output directory");
    };

    CLI::App* train = app.add_subcommand("train", "run the configured continual plan");
    train->add_option("--config", config_path, "run configuration file")->required();
    add_overrides(train);

    CLI::App* cont = app.add_subcommand("continue", "train further steps from a checkpoint");
    cont->add_option("--checkpoint", checkpoint_path, "starting checkpoint")->required();
    cont->add_option("--config", config_path, "run configuration with the added steps")
        ->required();
    add_overrides(cont);

    CLI::App* eval = app.add_subcommand("eval", "per-class Dice on a dataset");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")->required();
    eval->add_option("--dataset", dataset_ref, "folder path or synth:task:N / synth:class:N")
        ->required();
    eval->add_option("--task", task, "explicit task (bypasses the classifier)");
    eval->add_option("--count", count, "sample count for synthetic references");

    CLI::App* inspect = app.add_subcommand("inspect", "checkpoint summary");
    inspect->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();

    CLI::App* merge = app.add_subcommand("merge", "fold adapter stack into dense weights");
    merge->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    merge->add_option("--upto", upto, "number of experts to fold")->required();
    merge->add_option("--out", out_path, "merged checkpoint path")->required();

    CLI::App* classify = app.add_subcommand("classify", "task predictions for a dataset");
    classify->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    classify->add_option("--dataset", dataset_ref, "folder path or synth reference")->required();
    classify->add_option("--count", count, "sample count for synthetic references");

    CLI11_PARSE(app, argc, argv);

    lomoe::CliOverrides ov;
    if (seed >= 0) ov.seed = static_cast<std::uint64_t>(seed);
    if (!profile.empty()) ov.profile = profile;
    if (!out_path.empty()) ov.out = out_path;

    try {
        if (train->parsed()) return lomoe::cmd_train(config_path, ov);
        if (cont->parsed()) return lomoe::cmd_continue(checkpoint_path, config_path, ov);
        if (eval->parsed()) return lomoe::cmd_eval(checkpoint_path, dataset_ref, task, count);
        if (inspect->parsed()) return lomoe::cmd_inspect(checkpoint_path);
        if (merge->parsed()) return lomoe::cmd_merge(checkpoint_path, upto, out_path);
        if (classify->parsed()) return lomoe::cmd_classify(checkpoint_path, dataset_ref, count);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
