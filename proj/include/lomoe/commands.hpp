#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lomoe/continual.hpp"

namespace lomoe {

struct CliOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> profile;
    std::optional<std::string> out;
};

inline RunConfig config_with_overrides(const std::filesystem::path& config_path,
                                       const CliOverrides& ov) {
    nlohmann::json j;
    {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot open config file " + config_path.string());
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config " + config_path.string() + ": " + e.what());
        }
    }
    if (ov.profile) j["profile"] = *ov.profile;
    if (ov.seed) j["seed"] = *ov.seed;
    if (ov.out) j["out_dir"] = *ov.out;
    return parse_run_config(j);
}

// train: run the whole plan from scratch, emitting per-step checkpoints, a
// final checkpoint and the report.
inline int cmd_train(const std::filesystem::path& config_path, const CliOverrides& ov = {}) {
    const RunConfig cfg = config_with_overrides(config_path, ov);
    CheckpointState st;
    st.model = SegModel::build(cfg.backbone, cfg.mode, cfg.seed);
    Reporter rep(std::filesystem::path(cfg.out_dir) / "report.txt");
    rep.line("run mode=%s profile=%s seed=%llu steps=%zu", run_mode_name(cfg.mode),
             cfg.profile.c_str(), static_cast<unsigned long long>(cfg.seed), cfg.steps.size());
    run_continual(cfg, st, rep);
    save_checkpoint(std::filesystem::path(cfg.out_dir) / "final.lmoe", st);
    rep.line("done steps=%d final=final.lmoe", st.training_step);
    return 0;
}

// continue: extend a checkpoint with the config steps beyond its trained
// count. New classes must be disjoint from the accumulated label space.
inline int cmd_continue(const std::filesystem::path& checkpoint_path,
                        const std::filesystem::path& config_path, const CliOverrides& ov = {}) {
    const RunConfig cfg = config_with_overrides(config_path, ov);
    CheckpointState st = load_checkpoint(checkpoint_path);
    if (st.model.merged_upto >= 0)
        throw ValidationError("cannot continue training from a merged checkpoint");
    const std::size_t done = static_cast<std::size_t>(st.training_step);
    if (cfg.steps.size() <= done)
        throw ConfigError("config has " + std::to_string(cfg.steps.size()) +
                          " steps but the checkpoint already trained " + std::to_string(done));
    for (std::size_t s = done; s < cfg.steps.size(); ++s) {
        for (int c : resolve_step(cfg, s).classes)
            for (int seen : st.label_space)
                if (c == seen)
                    throw ValidationError("class id " + std::to_string(c) +
                                          " collides with the accumulated label space");
    }
    Reporter rep(std::filesystem::path(cfg.out_dir) / "report.txt");
    rep.line("continue from=%s trained_steps=%zu", checkpoint_path.filename().c_str(), done);
    run_continual(cfg, st, rep, done);
    save_checkpoint(std::filesystem::path(cfg.out_dir) / "final.lmoe", st);
    rep.line("done steps=%d final=final.lmoe", st.training_step);
    return 0;
}

// Synthetic references regenerate from the checkpoint's seed, so evaluation
// data matches the training-time splits bit for bit.
inline std::vector<Sample> resolve_eval_samples(const CheckpointState& st, const std::string& ref,
                                                std::size_t count) {
    if (ref.rfind("synth:", 0) == 0) {
        const std::string body = ref.substr(6);
        TaskSpec spec;
        if (body.rfind("task:", 0) == 0)
            spec = builtin_task_profile(std::stoi(body.substr(5)), st.model.master_seed);
        else if (body.rfind("class:", 0) == 0)
            spec = builtin_class_profile(std::stoi(body.substr(6)), st.model.master_seed);
        else
            throw ConfigError("bad synthetic dataset reference: " + ref);
        spec.image_size = st.model.cfg.image_size;
        spec.test_count = count;
        return gen_task_dataset(spec, "test");
    }
    FolderDataset ds = load_folder_dataset(ref);
    return ds.samples;
}

// eval: per-class Dice on a dataset. In task mode without --task the
// matching classifier routes each sample and the report carries the
// confusion counts.
inline int cmd_eval(const std::filesystem::path& checkpoint_path, const std::string& dataset_ref,
                    int task = 0, std::size_t count = 40) {
    CheckpointState st = load_checkpoint(checkpoint_path);
    std::vector<Sample> samples = resolve_eval_samples(st, dataset_ref, count);
    if (samples.empty()) throw ValidationError("evaluation dataset is empty");
    Reporter rep;
    NoGradGuard ng;

    if (st.model.mode == RunMode::Class) {
        const std::size_t upto =
            task > 0 ? static_cast<std::size_t>(task) : st.model.heads.size();
        if (upto < 1 || upto > st.model.heads.size())
            throw ValidationError("step " + std::to_string(task) + " outside trained range");
        std::vector<int> classes;
        for (std::size_t t = 0; t < upto; ++t)
            for (int c : st.registry.task(static_cast<int>(t) + 1).classes) classes.push_back(c);
        StepEval ev = evaluate_class_split(st.model, upto, samples, classes, task);
        for (const auto& [c, d] : ev.per_class) rep.line("dice class=%d value=%.6f", c, d);
        rep.line("dice mean=%.6f upto_step=%zu", ev.mean_dice, upto);
        return 0;
    }

    if (task > 0) {
        if (task > static_cast<int>(st.model.heads.size()))
            throw ValidationError("task " + std::to_string(task) + " outside trained range");
        const std::vector<int>& classes = st.registry.task(task).classes;
        StepEval ev = evaluate_task_split(st.model, task, samples, classes);
        for (const auto& [c, d] : ev.per_class) rep.line("dice class=%d value=%.6f", c, d);
        rep.line("dice mean=%.6f task=%d routing=explicit", ev.mean_dice, task);
        return 0;
    }

    // auto-routing via the matching classifier
    if (st.registry.empty()) throw StateError("checkpoint has no task registry");
    std::size_t correct = 0, with_truth = 0;
    std::map<std::pair<int, int>, std::size_t> confusion;
    std::map<int, std::vector<double>> dice_by_task;
    for (const Sample& s : samples) {
        const int predicted = classify_task(s.image, st.registry);
        // ground truth step, when the sample's data id matches a registered task
        int truth_step = 0;
        for (const TaskEntry& te : st.registry.tasks())
            if (te.data_id == s.task_id && s.task_id != 0) truth_step = te.task_id;
        if (truth_step > 0) {
            ++with_truth;
            correct += predicted == truth_step;
            ++confusion[{truth_step, predicted}];
        }
        const std::vector<int>& classes = st.registry.task(predicted).classes;
        Tensor probs = st.model.pixel_probs_task(s.image, predicted);
        const std::vector<int> pred_mask = st.model.argmax_mask(
            probs, st.model.heads[static_cast<std::size_t>(predicted - 1)].classes);
        std::vector<int> truth_mask(s.mask.begin(), s.mask.end());
        double d = 0.0;
        for (int c : classes) d += dice_score(pred_mask, truth_mask, c);
        dice_by_task[predicted].push_back(d / static_cast<double>(classes.size()));
    }
    for (const auto& [task_id, scores] : dice_by_task) {
        double mean = 0.0;
        for (double v : scores) mean += v;
        rep.line("dice routed_task=%d samples=%zu mean=%.6f", task_id, scores.size(),
                 mean / static_cast<double>(scores.size()));
    }
    for (const auto& [key, n] : confusion)
        if (key.first != key.second)
            rep.line("confusion truth=%d predicted=%d count=%zu", key.first, key.second, n);
    if (with_truth > 0)
        rep.line("classifier accuracy=%.6f correct=%zu total=%zu",
                 static_cast<double>(correct) / static_cast<double>(with_truth), correct,
                 with_truth);
    return 0;
}

inline int cmd_inspect(const std::filesystem::path& checkpoint_path) {
    CheckpointState st = load_checkpoint(checkpoint_path);
    std::cout << checkpoint_summary(st);
    return 0;
}

inline int cmd_merge(const std::filesystem::path& checkpoint_path, std::size_t upto,
                     const std::filesystem::path& out_path) {
    CheckpointState st = load_checkpoint(checkpoint_path);
    if (st.model.mode != RunMode::Task)
        throw ValidationError("merge applies to the task-level expert stack");
    if (upto > static_cast<std::size_t>(st.model.expert_count))
        throw ValidationError("merge upto " + std::to_string(upto) + " exceeds expert count " +
                              std::to_string(st.model.expert_count));
    st.model.merge_into_dense(upto);
    save_checkpoint(out_path, st);
    std::cout << "merged upto=" << upto << " into " << out_path.string() << "\n";
    return 0;
}

// classify: task predictions for every sample plus accuracy when the truth
// is recoverable.
inline int cmd_classify(const std::filesystem::path& checkpoint_path,
                        const std::string& dataset_ref, std::size_t count = 40) {
    CheckpointState st = load_checkpoint(checkpoint_path);
    if (st.registry.empty()) throw StateError("checkpoint has no task registry");
    std::vector<Sample> samples = resolve_eval_samples(st, dataset_ref, count);
    Reporter rep;
    std::size_t correct = 0, with_truth = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const int predicted = classify_task(samples[i].image, st.registry);
        int truth = 0;
        for (const TaskEntry& te : st.registry.tasks())
            if (te.data_id == samples[i].task_id && samples[i].task_id != 0) truth = te.task_id;
        rep.line("sample=%zu predicted_task=%d", i, predicted);
        if (truth > 0) {
            ++with_truth;
            correct += truth == predicted;
        }
    }
    if (with_truth > 0)
        rep.line("classifier accuracy=%.6f correct=%zu total=%zu",
                 static_cast<double>(correct) / static_cast<double>(with_truth), correct,
                 with_truth);
    return 0;
}

} // namespace lomoe
