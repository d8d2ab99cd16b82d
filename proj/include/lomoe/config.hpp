#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lomoe/dataio.hpp"
#include "lomoe/datasynth.hpp"
#include "lomoe/errors.hpp"
#include "lomoe/model.hpp"
#include "lomoe/optim.hpp"

namespace lomoe {

struct StepConfig {
    std::string name;
    std::string dataset; // "synth:task:N", "synth:class:N" or a directory path
    std::vector<int> classes;
    std::string prompt;
    std::size_t epochs = 0; // 0 = use the run default
};

struct GateConfig {
    std::size_t d_txt = 32;
    std::string provider = "hash"; // "hash" or "file:<path>"
    bool alt_composition = false;
    // class-mode training forward: "top1" keeps training consistent with
    // the hard-routed test path; "soft" is the weighted-sum alternative
    std::string train_routing = "top1";
};

struct DataConfig {
    std::size_t image_size = 32;
    std::size_t train_per_task = 100;
    std::size_t test_per_task = 40;
    std::size_t query_per_task = 100; // held-out classifier queries
    std::size_t support_size = 8;
};

struct RunConfig {
    RunMode mode = RunMode::Task;
    std::string profile = "desk";
    std::uint64_t seed = 42;
    std::string out_dir = "runs/out";
    BackboneConfig backbone = BackboneConfig::desk();
    AdamW::Hyper optim;
    std::size_t warmup_epochs = 10;
    double min_lr = 0.0;
    std::size_t epochs = 20;
    std::size_t batch_size = 8;
    bool warm_start = false;
    GateConfig gate;
    DataConfig data;
    std::vector<StepConfig> steps;
};

namespace detail_cfg {

inline void require_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    std::string bad;
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key())) bad += (bad.empty() ? "" : ", ") + it.key();
    if (!bad.empty()) throw ConfigError("unknown key(s) in " + where + ": " + bad);
}

} // namespace detail_cfg

inline BackboneConfig profile_backbone(const std::string& profile) {
    if (profile == "desk") return BackboneConfig::desk();
    if (profile == "paper-dims") return BackboneConfig::paper_dims();
    throw ConfigError("unknown profile '" + profile + "' (expected desk or paper-dims)");
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail_cfg::require_keys;
    require_keys(j, {"mode", "profile", "seed", "out_dir", "backbone", "optimizer", "schedule",
                     "training", "gate", "data", "steps", "warm_start"},
                 "config");
    RunConfig cfg;
    const std::string mode = j.value("mode", "task");
    if (mode == "task")
        cfg.mode = RunMode::Task;
    else if (mode == "class")
        cfg.mode = RunMode::Class;
    else
        throw ConfigError("mode must be 'task' or 'class'");
    cfg.profile = j.value("profile", "desk");
    cfg.backbone = profile_backbone(cfg.profile);
    cfg.seed = j.value("seed", 42ull);
    cfg.out_dir = j.value("out_dir", "runs/out");
    cfg.warm_start = j.value("warm_start", false);

    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        require_keys(b,
                     {"image_size", "patch", "d_model", "heads", "blocks", "d_ff", "rank",
                      "adapt_attention", "d_txt"},
                     "backbone");
        if (b.contains("image_size")) cfg.backbone.image_size = b.at("image_size");
        if (b.contains("patch")) cfg.backbone.patch = b.at("patch");
        if (b.contains("d_model")) cfg.backbone.d_model = b.at("d_model");
        if (b.contains("heads")) cfg.backbone.heads = b.at("heads");
        if (b.contains("blocks")) cfg.backbone.blocks = b.at("blocks");
        if (b.contains("d_ff")) cfg.backbone.d_ff = b.at("d_ff");
        if (b.contains("rank")) cfg.backbone.rank = b.at("rank");
        if (b.contains("adapt_attention")) cfg.backbone.adapt_attention = b.at("adapt_attention");
        if (b.contains("d_txt")) cfg.backbone.d_txt = b.at("d_txt");
    }
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        require_keys(o, {"lr", "weight_decay", "beta1", "beta2", "eps"}, "optimizer");
        cfg.optim.lr = o.value("lr", cfg.optim.lr);
        cfg.optim.weight_decay = o.value("weight_decay", cfg.optim.weight_decay);
        cfg.optim.beta1 = o.value("beta1", cfg.optim.beta1);
        cfg.optim.beta2 = o.value("beta2", cfg.optim.beta2);
        cfg.optim.eps = o.value("eps", cfg.optim.eps);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        require_keys(s, {"warmup_epochs", "min_lr"}, "schedule");
        cfg.warmup_epochs = s.value("warmup_epochs", cfg.warmup_epochs);
        cfg.min_lr = s.value("min_lr", cfg.min_lr);
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        require_keys(t, {"epochs", "batch_size"}, "training");
        cfg.epochs = t.value("epochs", cfg.epochs);
        cfg.batch_size = t.value("batch_size", cfg.batch_size);
    }
    if (j.contains("gate")) {
        const auto& g = j.at("gate");
        require_keys(g, {"d_txt", "provider", "alt_composition", "train_routing"}, "gate");
        cfg.gate.d_txt = g.value("d_txt", cfg.gate.d_txt);
        cfg.gate.provider = g.value("provider", cfg.gate.provider);
        cfg.gate.alt_composition = g.value("alt_composition", cfg.gate.alt_composition);
        cfg.gate.train_routing = g.value("train_routing", cfg.gate.train_routing);
        if (cfg.gate.train_routing != "top1" && cfg.gate.train_routing != "soft")
            throw ConfigError("gate.train_routing must be 'top1' or 'soft'");
        cfg.backbone.d_txt = cfg.gate.d_txt;
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        require_keys(d,
                     {"image_size", "train_per_task", "test_per_task", "query_per_task",
                      "support_size"},
                     "data");
        cfg.data.image_size = d.value("image_size", cfg.data.image_size);
        cfg.data.train_per_task = d.value("train_per_task", cfg.data.train_per_task);
        cfg.data.test_per_task = d.value("test_per_task", cfg.data.test_per_task);
        cfg.data.query_per_task = d.value("query_per_task", cfg.data.query_per_task);
        cfg.data.support_size = d.value("support_size", cfg.data.support_size);
        cfg.backbone.image_size = cfg.data.image_size;
    }
    if (!j.contains("steps") || !j.at("steps").is_array() || j.at("steps").empty())
        throw ConfigError("config needs a non-empty steps array");
    for (const auto& js : j.at("steps")) {
        require_keys(js, {"name", "dataset", "classes", "prompt", "epochs"}, "step");
        StepConfig s;
        s.name = js.value("name", "");
        s.dataset = js.at("dataset").get<std::string>();
        if (js.contains("classes")) s.classes = js.at("classes").get<std::vector<int>>();
        s.prompt = js.value("prompt", "");
        s.epochs = js.value("epochs", std::size_t{0});
        cfg.steps.push_back(std::move(s));
    }
    cfg.backbone.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

// Resolves a step's dataset reference into memory. Synthetic references are
// regenerated from the run seed; folder references load from disk.
struct ResolvedStep {
    int task_id = 0; // position in the plan, 1-based
    int data_id = 0; // identity of the dataset itself, independent of position
    std::string name;
    std::vector<int> classes;
    std::string prompt;
    std::size_t epochs = 0;
    std::vector<Sample> train, test;
    TaskSpec synth_spec;
    bool synthetic = false;
};

inline ResolvedStep resolve_step(const RunConfig& cfg, std::size_t index) {
    const StepConfig& sc = cfg.steps.at(index);
    ResolvedStep out;
    out.task_id = static_cast<int>(index) + 1;
    out.name = sc.name.empty() ? ("step" + std::to_string(index + 1)) : sc.name;
    out.prompt = sc.prompt;
    out.epochs = sc.epochs ? sc.epochs : cfg.epochs;
    if (sc.dataset.rfind("synth:", 0) == 0) {
        const std::string ref = sc.dataset.substr(6);
        TaskSpec spec;
        if (ref.rfind("task:", 0) == 0)
            spec = builtin_task_profile(std::stoi(ref.substr(5)), cfg.seed);
        else if (ref.rfind("class:", 0) == 0)
            spec = builtin_class_profile(std::stoi(ref.substr(6)), cfg.seed);
        else
            throw ConfigError("bad synthetic dataset reference: " + sc.dataset);
        spec.image_size = cfg.data.image_size;
        spec.train_count = cfg.data.train_per_task;
        spec.test_count = cfg.data.test_per_task;
        // the generator streams key off the profile's own id, so a dataset
        // is the same bytes wherever it appears in the plan
        out.data_id = spec.task_id;
        out.synth_spec = spec;
        out.synthetic = true;
        out.train = gen_task_dataset(spec, "train");
        out.test = gen_task_dataset(spec, "test");
        for (const ClassSpec& c : spec.classes) out.classes.push_back(c.class_id);
        if (!sc.classes.empty() && sc.classes != out.classes)
            throw ConfigError("step " + out.name +
                              ": declared classes disagree with the synthetic profile");
    } else {
        // folder dataset with train/ and test/ subdirectories
        FolderDataset train = load_folder_dataset(std::filesystem::path(sc.dataset) / "train");
        FolderDataset test = load_folder_dataset(std::filesystem::path(sc.dataset) / "test");
        out.classes = sc.classes.empty() ? train.classes : sc.classes;
        if (out.classes.empty())
            throw ConfigError("step " + out.name + ": no classes declared or discoverable");
        out.data_id = train.task_id > 0 ? train.task_id : out.task_id;
        out.train = std::move(train.samples);
        out.test = std::move(test.samples);
        for (Sample& s : out.train) s.task_id = out.data_id;
        for (Sample& s : out.test) s.task_id = out.data_id;
    }
    return out;
}

} // namespace lomoe
