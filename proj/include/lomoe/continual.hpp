#pragma once

#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "lomoe/checkpoint.hpp"
#include "lomoe/config.hpp"
#include "lomoe/metrics.hpp"
#include "lomoe/model.hpp"
#include "lomoe/optim.hpp"

namespace lomoe {

// Line-delimited run log. Content is a pure function of the run state; no
// wall-clock data, so identical runs write identical reports.
class Reporter {
public:
    Reporter() = default;

    explicit Reporter(const std::filesystem::path& file, bool echo = true) : echo_(echo) {
        std::filesystem::create_directories(file.parent_path());
        out_.open(file, std::ios::binary);
        if (!out_) throw ParseError("cannot open report file " + file.string());
    }

    void line(const char* fmt, ...) {
        char buf[1024];
        va_list args;
        va_start(args, fmt);
        std::vsnprintf(buf, sizeof(buf), fmt, args);
        va_end(args);
        if (out_.is_open()) out_ << buf << '\n';
        if (echo_) std::cout << buf << '\n';
    }

    void flush() {
        if (out_.is_open()) out_.flush();
    }

private:
    std::ofstream out_;
    bool echo_ = true;
};

struct StepEval {
    int task_id = 0;
    double mean_dice = 0.0;
    std::vector<std::pair<int, double>> per_class;
};

struct RunResult {
    // matrix[s][k]: task k+1 evaluated with its own expert stack after
    // step s+1 finished (oracle routing)
    std::vector<std::vector<StepEval>> matrix;
    // class mode only: evaluation over the full accumulated label space
    std::vector<std::vector<StepEval>> joint;
    std::vector<std::filesystem::path> checkpoints;
    std::vector<std::pair<int, int>> access_log; // (training step, sample data id)
    std::vector<int> step_data_ids;              // data id trained at each step
};

// ---------------------------------------------------------------------------
// evaluation

inline StepEval evaluate_task_split(const SegModel& m, int task_id,
                                    const std::vector<Sample>& samples,
                                    const std::vector<int>& classes) {
    NoGradGuard ng;
    StepEval ev;
    ev.task_id = task_id;
    std::map<int, double> acc;
    for (const Sample& s : samples) {
        Tensor probs = m.pixel_probs_task(s.image, task_id);
        const std::vector<int> pred =
            m.argmax_mask(probs, m.heads[static_cast<std::size_t>(task_id - 1)].classes);
        std::vector<int> truth(s.mask.begin(), s.mask.end());
        for (int c : classes) acc[c] += dice_score(pred, truth, c);
    }
    for (int c : classes) {
        const double d = samples.empty() ? 0.0 : acc[c] / static_cast<double>(samples.size());
        ev.per_class.emplace_back(c, d);
        ev.mean_dice += d;
    }
    if (!classes.empty()) ev.mean_dice /= static_cast<double>(classes.size());
    return ev;
}

inline StepEval evaluate_class_split(const SegModel& m, std::size_t upto,
                                     const std::vector<Sample>& samples,
                                     const std::vector<int>& classes, int task_id) {
    NoGradGuard ng;
    StepEval ev;
    ev.task_id = task_id;
    const std::vector<int> columns = m.class_columns(upto);
    std::map<int, double> acc;
    for (const Sample& s : samples) {
        Tensor probs = m.pixel_probs_class(s.image, upto, /*top1=*/true);
        const std::vector<int> pred = m.argmax_mask(probs, columns);
        std::vector<int> truth(s.mask.begin(), s.mask.end());
        for (int c : classes) acc[c] += dice_score(pred, truth, c);
    }
    for (int c : classes) {
        const double d = samples.empty() ? 0.0 : acc[c] / static_cast<double>(samples.size());
        ev.per_class.emplace_back(c, d);
        ev.mean_dice += d;
    }
    if (!classes.empty()) ev.mean_dice /= static_cast<double>(classes.size());
    return ev;
}

// Fraction of tokens whose patch is mostly `class_id` that top-1 routing
// sends to `expert`.
inline double routed_fraction(const SegModel& m, const std::vector<Sample>& samples, int class_id,
                              int expert) {
    NoGradGuard ng;
    std::size_t hits = 0, total = 0;
    const std::size_t p = m.cfg.patch;
    for (const Sample& s : samples) {
        std::vector<int> routing;
        (void)m.encode_class(s.image, static_cast<std::size_t>(m.expert_count), true, &routing);
        const std::size_t gw = s.width / p;
        for (std::size_t tok = 0; tok < routing.size(); ++tok) {
            const std::size_t gy = tok / gw, gx = tok % gw;
            std::size_t inside = 0;
            for (std::size_t y = gy * p; y < (gy + 1) * p; ++y)
                for (std::size_t x = gx * p; x < (gx + 1) * p; ++x)
                    inside += s.mask[y * s.width + x] == class_id;
            if (inside * 2 > p * p) {
                ++total;
                hits += routing[tok] == expert;
            }
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// one continual step

inline std::string format_classes(const std::vector<int>& classes) {
    std::string out;
    for (std::size_t i = 0; i < classes.size(); ++i)
        out += (i ? "," : "") + std::to_string(classes[i]);
    return out;
}

inline void continual_step(const RunConfig& cfg, CheckpointState& st, const ResolvedStep& step,
                           Reporter& rep, std::vector<std::pair<int, int>>* access_log,
                           const EmbeddingProvider* provider) {
    SegModel& m = st.model;
    const int t = st.training_step + 1;
    if (step.task_id != t)
        throw StateError("step ordering mismatch: resolved task " + std::to_string(step.task_id) +
                         " at training step " + std::to_string(t));
    if (step.train.empty()) throw ConfigError("step " + step.name + " has no training samples");

    st.label_space = accumulate_labels(st.label_space, step.classes);
    const int expert_id = m.add_expert();
    if (cfg.warm_start && expert_id >= 2) m.warm_start_copy_from_previous();
    m.add_head(step.classes);
    if (m.mode == RunMode::Class) {
        if (!provider) throw ConfigError("class mode requires an embedding provider");
        const std::string prompt = step.prompt.empty() ? step.name : step.prompt;
        m.add_gate_tau(provider->embed(prompt), prompt);
    }

    TaskEntry entry;
    entry.task_id = t;
    entry.data_id = step.data_id;
    entry.expert_index = expert_id;
    entry.classes = step.classes;
    entry.prompt = step.prompt;
    st.registry.register_task(entry);
    if (m.mode == RunMode::Task) {
        Rng sr = Rng::derive(cfg.seed, "support.task" + std::to_string(t));
        std::vector<std::size_t> idx(step.train.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[sr.next_below(i)]);
        const std::size_t take = std::min(cfg.data.support_size, idx.size());
        std::vector<std::vector<float>> feats;
        for (std::size_t i = 0; i < take; ++i)
            feats.push_back(task_feature(step.train[idx[i]].image));
        st.registry.set_centroid(t, support_centroid(feats));
    }

    rep.line("step=%d name=%s classes=%s epochs=%zu train=%zu test=%zu", t, step.name.c_str(),
             format_classes(step.classes).c_str(), step.epochs, step.train.size(),
             step.test.size());

    // baseline checksums for the bitwise freeze audit
    std::map<std::string, std::uint64_t> frozen_sums;
    m.for_each_param([&](const ParamRef& p) {
        if (p.frozen) frozen_sums[p.name] = checksum(p.tensor);
    });

    AdamW opt(cfg.optim);
    opt.register_model_trainables(m);
    Schedule sched{cfg.optim.lr, cfg.min_lr, cfg.warmup_epochs, step.epochs};

    m.in_training_step = true;
    const std::size_t n = step.train.size();
    for (std::size_t epoch = 0; epoch < step.epochs; ++epoch) {
        opt.set_lr(sched.lr_at(epoch));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shr = Rng::derive(cfg.seed, "shuffle.task" + std::to_string(t) + ".epoch" +
                                            std::to_string(epoch));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shr.next_below(i)]);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            opt.zero_grad();
            for (std::size_t bi = start; bi < stop; ++bi) {
                const Sample& s = step.train[order[bi]];
                if (access_log) access_log->emplace_back(t, s.task_id);
                if (s.task_id != step.data_id)
                    throw StateError("training loader yielded data id " +
                                     std::to_string(s.task_id) + " during step " +
                                     std::to_string(t) + " (expected " +
                                     std::to_string(step.data_id) + ")");
                Tensor probs =
                    m.mode == RunMode::Task
                        ? m.pixel_probs_task(s.image, t)
                        : m.pixel_probs_class(s.image, static_cast<std::size_t>(t),
                                              cfg.gate.train_routing == "soft"
                                                  ? SegModel::GateMode::Soft
                                                  : SegModel::GateMode::Top1Masked);
                const std::vector<int> columns =
                    m.mode == RunMode::Task
                        ? m.heads[static_cast<std::size_t>(t - 1)].classes
                        : m.class_columns(static_cast<std::size_t>(t));
                Tensor loss = seg_loss(probs, labels_from_mask(s.mask, columns));
                loss_sum += loss.item();
                backward(scale(loss, 1.0 / static_cast<double>(stop - start)));
            }
            opt.step();
        }
        rep.line("train step=%d epoch=%zu lr=%.8f loss=%.6f", t, epoch, sched.lr_at(epoch),
                 loss_sum / static_cast<double>(n));

        m.for_each_param([&](const ParamRef& p) {
            auto it = frozen_sums.find(p.name);
            if (it != frozen_sums.end() && checksum(p.tensor) != it->second)
                throw StateError("freeze violation detected in " + p.name);
        });
    }
    m.in_training_step = false;
    st.training_step = t;
}

// ---------------------------------------------------------------------------
// full plan

inline RunResult run_continual(const RunConfig& cfg, CheckpointState& st, Reporter& rep,
                               std::size_t first_step = 0) {
    RunResult result;
    const std::filesystem::path out_dir(cfg.out_dir);
    std::filesystem::create_directories(out_dir);

    EmbeddingProvider provider(cfg.backbone.d_txt);
    if (cfg.gate.provider.rfind("file:", 0) == 0) {
        const std::filesystem::path table_path = cfg.gate.provider.substr(5);
        std::ifstream in(table_path);
        if (!in) throw ConfigError("cannot open embedding table " + table_path.string());
        nlohmann::json j;
        in >> j;
        std::map<std::string, std::vector<float>> table;
        for (auto it = j.begin(); it != j.end(); ++it)
            table[it.key()] = it.value().get<std::vector<float>>();
        provider = EmbeddingProvider(cfg.backbone.d_txt, std::move(table));
    } else if (cfg.gate.provider != "hash") {
        throw ConfigError("unknown embedding provider: " + cfg.gate.provider);
    }
    st.model.gate.alt_composition = cfg.gate.alt_composition;

    std::vector<ResolvedStep> seen; // resolved steps, for cross-step evaluation
    for (std::size_t s = 0; s < first_step; ++s) seen.push_back(resolve_step(cfg, s));

    for (std::size_t s = first_step; s < cfg.steps.size(); ++s) {
        ResolvedStep step = resolve_step(cfg, s);
        continual_step(cfg, st, step, rep, &result.access_log, &provider);
        result.step_data_ids.push_back(step.data_id);
        seen.push_back(std::move(step));

        const auto ckpt_path = out_dir / ("step_" + std::to_string(s + 1) + ".lmoe");
        save_checkpoint(ckpt_path, st);
        result.checkpoints.push_back(ckpt_path);
        rep.line("checkpoint step=%zu file=%s trainable=%zu total=%zu", s + 1,
                 ckpt_path.filename().c_str(), st.model.trainable_param_count(),
                 st.model.total_param_count());

        std::vector<StepEval> row, joint_row;
        for (std::size_t k = 0; k < seen.size(); ++k) {
            const ResolvedStep& past = seen[k];
            StepEval ev =
                st.model.mode == RunMode::Task
                    ? evaluate_task_split(st.model, past.task_id, past.test, past.classes)
                    : evaluate_class_split(st.model, static_cast<std::size_t>(past.task_id),
                                           past.test, past.classes, past.task_id);
            std::string per;
            for (const auto& [c, d] : ev.per_class) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%s%d:%.6f", per.empty() ? "" : ",", c, d);
                per += buf;
            }
            rep.line("eval after_step=%zu task=%d dice=%.6f per_class=%s", s + 1, past.task_id,
                     ev.mean_dice, per.c_str());
            row.push_back(std::move(ev));
            if (st.model.mode == RunMode::Class) {
                StepEval jev = evaluate_class_split(st.model, st.model.heads.size(), past.test,
                                                    past.classes, past.task_id);
                rep.line("eval_joint after_step=%zu task=%d dice=%.6f", s + 1, past.task_id,
                         jev.mean_dice);
                joint_row.push_back(std::move(jev));
            }
        }
        std::string matrix_line = "matrix after_step=" + std::to_string(s + 1);
        for (std::size_t k = 0; k < cfg.steps.size(); ++k) {
            char buf[64];
            if (k < row.size())
                std::snprintf(buf, sizeof(buf), " task%zu=%.6f", k + 1, row[k].mean_dice);
            else
                std::snprintf(buf, sizeof(buf), " task%zu=-", k + 1);
            matrix_line += buf;
        }
        rep.line("%s", matrix_line.c_str());
        result.matrix.push_back(std::move(row));
        if (st.model.mode == RunMode::Class) result.joint.push_back(std::move(joint_row));
        rep.flush();
    }
    return result;
}

} // namespace lomoe
