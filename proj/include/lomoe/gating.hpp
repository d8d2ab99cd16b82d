#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lomoe/errors.hpp"
#include "lomoe/tensor.hpp"

namespace lomoe {

// ---------------------------------------------------------------------------
// text embeddings

// Pluggable stand-in for a text encoder. The hash provider derives a fixed
// unit vector from the prompt alone; the file provider serves preloaded
// vectors. Same text always gives the same embedding.
class EmbeddingProvider {
public:
    enum class Kind { DeterministicHash, FileLoaded };

    explicit EmbeddingProvider(std::size_t dim) : kind_(Kind::DeterministicHash), dim_(dim) {}

    EmbeddingProvider(std::size_t dim, std::map<std::string, std::vector<float>> table)
        : kind_(Kind::FileLoaded), dim_(dim), table_(std::move(table)) {}

    Kind kind() const { return kind_; }
    std::size_t dim() const { return dim_; }

    Tensor embed(const std::string& text) const {
        std::vector<float> v;
        if (kind_ == Kind::DeterministicHash) {
            Rng rng(fnv1a64(text), 0x74657874ull);
            v.resize(dim_);
            for (float& x : v) x = rng.next_normal(1.0);
        } else {
            auto it = table_.find(text);
            if (it == table_.end())
                throw ConfigError("embedding provider has no entry for prompt: " + text);
            if (it->second.size() != dim_)
                throw ConfigError("embedding for prompt has wrong dimension");
            v = it->second;
        }
        double norm = 0.0;
        for (float x : v) norm += static_cast<double>(x) * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) throw ConfigError("zero embedding for prompt: " + text);
        for (float& x : v) x = static_cast<float>(x / norm);
        return Tensor::from({dim_}, std::move(v));
    }

private:
    Kind kind_;
    std::size_t dim_;
    std::map<std::string, std::vector<float>> table_;
};

// ---------------------------------------------------------------------------
// class-level language-guided gate

// Gate weights per token and expert: GW_{s,e} = sigmoid(<sigmoid(x_s*Wg), tau_e>).
// The alternate composition projects the embedding instead:
// GW_{s,e} = sigmoid(<x_s, Wg*tau_e>). Both map into (0,1).
struct ClassGate {
    Tensor wg;                       // d_model x d_txt
    std::vector<Tensor> taus;        // one unit-norm embedding per expert
    std::vector<std::string> prompts;
    bool frozen = false;
    bool alt_composition = false;

    std::size_t expert_count() const { return taus.size(); }

    void freeze() {
        frozen = true;
        wg.set_requires_grad(false);
    }

    // Per-expert token weights for experts 1..upto, each a Tensor[S].
    std::vector<Tensor> weights(const Tensor& x_tokens, std::size_t upto) const {
        if (upto > taus.size())
            throw ContractError("gate weights: expert range exceeds stored embeddings");
        const std::size_t s = x_tokens.dim(0);
        std::vector<Tensor> out;
        out.reserve(upto);
        if (!alt_composition) {
            Tensor proj = sigmoid(matmul(x_tokens, wg)); // S x d_txt
            for (std::size_t e = 0; e < upto; ++e) {
                Tensor tau_col = reshape(taus[e], {taus[e].numel(), 1});
                out.push_back(reshape(sigmoid(matmul(proj, tau_col)), {s}));
            }
        } else {
            for (std::size_t e = 0; e < upto; ++e) {
                Tensor tau_col = reshape(taus[e], {taus[e].numel(), 1});
                Tensor dir = matmul(wg, tau_col); // d_model x 1
                out.push_back(reshape(sigmoid(matmul(x_tokens, dir)), {s}));
            }
        }
        return out;
    }
};

// Argmax routing with ties broken toward the lowest expert index.
inline std::size_t top1_route(const std::vector<float>& gw) {
    if (gw.empty()) throw ContractError("top1_route: empty gate vector");
    std::size_t best = 0;
    for (std::size_t e = 1; e < gw.size(); ++e)
        if (gw[e] > gw[best]) best = e;
    return best + 1; // expert ids are 1-based
}

// ---------------------------------------------------------------------------
// task-level matching classifier

// Image feature for task matching: average-pool pyramid (1x1, 2x2, 4x4
// cells) plus a 64-bin intensity histogram, concatenated and unit-normalized.
// The two blocks are balanced before concatenation so intensity statistics,
// not raw magnitude, drive the cosine. Independent of the segmentation model.
inline std::vector<float> task_feature(const Tensor& image) {
    if (image.rank() != 2) throw ShapeError("task_feature: image must be H x W");
    const std::size_t h = image.dim(0), w = image.dim(1);
    std::vector<double> pyramid;
    pyramid.reserve(1 + 4 + 16);
    for (std::size_t level : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
        for (std::size_t cy = 0; cy < level; ++cy) {
            for (std::size_t cx = 0; cx < level; ++cx) {
                const std::size_t y0 = cy * h / level, y1 = (cy + 1) * h / level;
                const std::size_t x0 = cx * w / level, x1 = (cx + 1) * w / level;
                double acc = 0.0;
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t x = x0; x < x1; ++x) acc += image.at(y, x);
                const double cells = static_cast<double>((y1 - y0) * (x1 - x0));
                pyramid.push_back(acc / cells);
            }
        }
    }
    std::vector<double> hist(64, 0.0);
    for (float v : image.data()) {
        int bin = static_cast<int>(v * 64.0);
        bin = std::clamp(bin, 0, 63);
        hist[static_cast<std::size_t>(bin)] += 1.0;
    }
    for (double& b : hist) b /= static_cast<double>(image.numel());

    auto block_norm = [](const std::vector<double>& v) {
        double n = 0.0;
        for (double x : v) n += x * x;
        return std::sqrt(n);
    };
    const double pn = block_norm(pyramid);
    const double hn = block_norm(hist);
    const double hist_weight = 3.0;
    std::vector<float> feat;
    feat.reserve(pyramid.size() + hist.size());
    for (double v : pyramid) feat.push_back(static_cast<float>(pn > 0.0 ? v / pn : 0.0));
    for (double v : hist)
        feat.push_back(static_cast<float>(hn > 0.0 ? hist_weight * v / hn : 0.0));
    double norm = 0.0;
    for (float v : feat) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (float& v : feat) v = static_cast<float>(v / norm);
    return feat;
}

struct TaskEntry {
    int task_id = 0;                 // step position in the plan
    int data_id = 0;                 // identity of the dataset trained here
    int expert_index = 0;
    std::vector<int> classes;        // C^t, background excluded
    std::vector<float> centroid;     // unit-norm support-set mean
    std::string prompt;
};

// Expert/task bookkeeping for the task-level path. Expert indices are the
// contiguous range 1..T.
class TaskRegistry {
public:
    const std::vector<TaskEntry>& tasks() const { return tasks_; }
    std::size_t size() const { return tasks_.size(); }
    bool empty() const { return tasks_.empty(); }

    const TaskEntry& task(int task_id) const {
        for (const TaskEntry& t : tasks_)
            if (t.task_id == task_id) return t;
        throw StateError("unknown task id " + std::to_string(task_id));
    }

    void register_task(TaskEntry entry) {
        if (entry.expert_index != static_cast<int>(tasks_.size()) + 1)
            throw StateError("expert indices must be contiguous from 1");
        tasks_.push_back(std::move(entry));
    }

    void set_centroid(int task_id, std::vector<float> centroid) {
        for (TaskEntry& t : tasks_)
            if (t.task_id == task_id) {
                t.centroid = std::move(centroid);
                return;
            }
        throw StateError("unknown task id " + std::to_string(task_id));
    }

private:
    std::vector<TaskEntry> tasks_;
};

// Unit-norm mean of one support set's features.
inline std::vector<float> support_centroid(const std::vector<std::vector<float>>& feats) {
    if (feats.empty()) throw StateError("support_centroid: empty support set");
    std::vector<double> acc(feats[0].size(), 0.0);
    for (const auto& f : feats)
        for (std::size_t i = 0; i < f.size(); ++i) acc[i] += f[i];
    double norm = 0.0;
    for (double v : acc) norm += v * v;
    norm = std::sqrt(norm);
    std::vector<float> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i)
        out[i] = static_cast<float>(norm > 0.0 ? acc[i] / norm : 0.0);
    return out;
}

// Nearest-centroid matching by cosine similarity; deterministic tie-break
// toward the lowest task id.
inline int classify_task(const Tensor& image, const TaskRegistry& registry) {
    if (registry.empty()) throw StateError("classify_task: no registered tasks");
    const std::vector<float> f = task_feature(image);
    int best_task = 0;
    double best_sim = -2.0;
    for (const TaskEntry& t : registry.tasks()) {
        if (t.centroid.size() != f.size())
            throw StateError("classify_task: centroid dimension mismatch");
        double sim = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i)
            sim += static_cast<double>(f[i]) * t.centroid[i];
        if (sim > best_sim || (sim == best_sim && t.task_id < best_task)) {
            best_sim = sim;
            best_task = t.task_id;
        }
    }
    return best_task;
}

} // namespace lomoe
