#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lomoe/errors.hpp"
#include "lomoe/gating.hpp"
#include "lomoe/model.hpp"

namespace lomoe {

// Checkpoint container
//   "LMOE" | u32 version | u64 meta_len | meta JSON | u64 tensor_count
//   per tensor: u32 name_len | name | u8 frozen | u32 ndims | u64 dims...
//               | u64 byte_len | raw f32 little-endian payload
// The metadata block carries architecture, expert registry, label sets,
// prompts and RNG seeds; the file reloads without the originating config.

struct CheckpointState {
    SegModel model;
    TaskRegistry registry;
    int training_step = 0;
    std::vector<int> label_space;
};

namespace detail_ckpt {

struct Writer {
    std::ofstream out;
    explicit Writer(const std::filesystem::path& p) : out(p, std::ios::binary) {
        if (!out) throw ParseError("cannot open " + p.string() + " for writing");
    }
    void bytes(const void* p, std::size_t n) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
};

struct Reader {
    std::ifstream in;
    std::size_t offset = 0;
    std::string name;
    Reader(const std::filesystem::path& p) : in(p, std::ios::binary), name(p.string()) {
        if (!in) throw ParseError("cannot open " + name);
    }
    void bytes(void* p, std::size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw ParseError(name + ": truncated at byte offset " + std::to_string(offset));
        offset += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    std::string str(std::size_t max_len = 1u << 20) {
        const std::uint32_t n = u32();
        if (n > max_len)
            throw ParseError(name + ": implausible string length at byte offset " +
                             std::to_string(offset - 4));
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
};

struct NamedTensor {
    std::string name;
    bool frozen;
    Tensor tensor;
};

// Model parameters in registry order plus the registry centroids.
inline std::vector<NamedTensor> collect_tensors(const CheckpointState& st) {
    std::vector<NamedTensor> out;
    st.model.for_each_param(
        [&](const ParamRef& p) { out.push_back({p.name, p.frozen, p.tensor}); });
    for (const TaskEntry& t : st.registry.tasks()) {
        if (t.centroid.empty()) continue;
        out.push_back({"task" + std::to_string(t.task_id) + ".centroid", true,
                       Tensor::from({t.centroid.size()}, t.centroid)});
    }
    return out;
}

inline nlohmann::ordered_json build_meta(const CheckpointState& st) {
    nlohmann::ordered_json meta;
    meta["format_version"] = 1;
    meta["mode"] = run_mode_name(st.model.mode);
    nlohmann::ordered_json bb;
    bb["image_size"] = st.model.cfg.image_size;
    bb["patch"] = st.model.cfg.patch;
    bb["d_model"] = st.model.cfg.d_model;
    bb["heads"] = st.model.cfg.heads;
    bb["blocks"] = st.model.cfg.blocks;
    bb["d_ff"] = st.model.cfg.d_ff;
    bb["rank"] = st.model.cfg.rank;
    bb["adapt_attention"] = st.model.cfg.adapt_attention;
    bb["d_txt"] = st.model.cfg.d_txt;
    meta["backbone"] = bb;
    meta["rng"] = {{"master_seed", std::to_string(st.model.master_seed)},
                   {"scheme", "per-name counter streams"}};
    meta["training_step"] = st.training_step;
    meta["expert_count"] = st.model.expert_count;
    meta["merged_upto"] = st.model.merged_upto;
    meta["label_space"] = st.label_space;
    auto tasks = nlohmann::ordered_json::array();
    for (const TaskEntry& t : st.registry.tasks()) {
        nlohmann::ordered_json jt;
        jt["task_id"] = t.task_id;
        jt["data_id"] = t.data_id;
        jt["expert_index"] = t.expert_index;
        jt["classes"] = t.classes;
        jt["prompt"] = t.prompt;
        jt["has_centroid"] = !t.centroid.empty();
        tasks.push_back(jt);
    }
    meta["tasks"] = tasks;
    auto heads = nlohmann::ordered_json::array();
    for (const TaskHead& h : st.model.heads)
        heads.push_back({{"columns", h.classes}, {"frozen", h.frozen}});
    meta["heads"] = heads;
    if (st.model.mode == RunMode::Class) {
        nlohmann::ordered_json g;
        g["frozen"] = st.model.gate.frozen;
        g["alt_composition"] = st.model.gate.alt_composition;
        g["prompts"] = st.model.gate.prompts;
        meta["gate"] = g;
    }
    return meta;
}

} // namespace detail_ckpt

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointState& st) {
    detail_ckpt::Writer w(path);
    w.bytes("LMOE", 4);
    w.u32(1);
    const std::string meta = detail_ckpt::build_meta(st).dump();
    w.u64(meta.size());
    w.bytes(meta.data(), meta.size());
    const auto tensors = detail_ckpt::collect_tensors(st);
    w.u64(tensors.size());
    for (const auto& t : tensors) {
        w.str(t.name);
        w.u8(t.frozen ? 1 : 0);
        w.u32(static_cast<std::uint32_t>(t.tensor.rank()));
        for (std::size_t d : t.tensor.shape()) w.u64(d);
        w.u64(t.tensor.numel() * sizeof(float));
        w.bytes(t.tensor.data().data(), t.tensor.numel() * sizeof(float));
    }
    if (!w.out) throw ParseError("short write to " + path.string());
}

// Restores adapter/head/gate frozen state recorded per tensor; the walk
// order mirrors for_each_param.
inline void apply_frozen_flags(SegModel& model,
                               const std::vector<detail_ckpt::NamedTensor>& loaded) {
    std::size_t cursor = 0;
    auto take = [&](const std::string&) -> bool { return loaded[cursor++].frozen; };
    take("patch.proj");
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        Block& blk = model.blocks[b];
        auto apply_linear = [&](LoraLinear& lin) {
            take("base");
            for (LoraAdapter& ad : lin.adapters_mutable()) {
                const bool frozen_b = take("B");
                take("A");
                if (frozen_b)
                    ad.freeze();
                else
                    ad.unfreeze();
            }
        };
        for (std::size_t h = 0; h < blk.attn.wq.size(); ++h) {
            apply_linear(blk.attn.wq[h]);
            apply_linear(blk.attn.wk[h]);
            apply_linear(blk.attn.wv[h]);
        }
        apply_linear(blk.attn.wo);
        apply_linear(blk.ffn.wi);
        apply_linear(blk.ffn.wo);
    }
    for (TaskHead& h : model.heads) {
        const bool frozen = take("head");
        h.frozen = frozen;
        h.w.set_requires_grad(!frozen);
    }
    if (model.mode == RunMode::Class && model.gate.wg.numel() > 0) {
        const bool frozen = take("gate.wg");
        model.gate.frozen = frozen;
        model.gate.wg.set_requires_grad(!frozen);
        for (std::size_t e = 0; e < model.gate.taus.size(); ++e) take("tau");
    }
}

inline CheckpointState load_checkpoint(const std::filesystem::path& path) {
    detail_ckpt::Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "LMOE", 4) != 0)
        throw ParseError(r.name + ": bad magic at byte offset 0");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw ParseError(r.name + ": unsupported format version " + std::to_string(version));
    const std::uint64_t meta_len = r.u64();
    std::string meta_bytes(meta_len, '\0');
    r.bytes(meta_bytes.data(), meta_len);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_bytes);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(r.name + ": metadata block: " + e.what());
    }

    CheckpointState st;
    BackboneConfig cfg;
    const auto& bb = meta.at("backbone");
    cfg.image_size = bb.at("image_size").get<std::size_t>();
    cfg.patch = bb.at("patch").get<std::size_t>();
    cfg.d_model = bb.at("d_model").get<std::size_t>();
    cfg.heads = bb.at("heads").get<std::size_t>();
    cfg.blocks = bb.at("blocks").get<std::size_t>();
    cfg.d_ff = bb.at("d_ff").get<std::size_t>();
    cfg.rank = bb.at("rank").get<std::size_t>();
    cfg.adapt_attention = bb.at("adapt_attention").get<bool>();
    cfg.d_txt = bb.at("d_txt").get<std::size_t>();
    const RunMode mode =
        meta.at("mode").get<std::string>() == "class" ? RunMode::Class : RunMode::Task;
    const std::uint64_t master_seed =
        std::stoull(meta.at("rng").at("master_seed").get<std::string>());
    st.model = SegModel::build(cfg, mode, master_seed);
    st.training_step = meta.at("training_step").get<int>();
    st.model.merged_upto = meta.at("merged_upto").get<int>();
    const int expert_count = meta.at("expert_count").get<int>();
    if (st.model.merged_upto < 0) {
        for (int e = 0; e < expert_count; ++e) st.model.add_expert();
    } else {
        st.model.expert_count = expert_count;
    }
    st.label_space = meta.at("label_space").get<std::vector<int>>();
    for (const auto& jh : meta.at("heads")) {
        TaskHead head;
        head.classes = jh.at("columns").get<std::vector<int>>();
        head.frozen = jh.at("frozen").get<bool>();
        head.w = Tensor::zeros({cfg.d_model, head.classes.size()}, !head.frozen);
        st.model.heads.push_back(std::move(head));
    }
    if (mode == RunMode::Class && meta.contains("gate")) {
        st.model.gate.frozen = meta.at("gate").at("frozen").get<bool>();
        st.model.gate.alt_composition = meta.at("gate").at("alt_composition").get<bool>();
        st.model.gate.prompts =
            meta.at("gate").at("prompts").get<std::vector<std::string>>();
        st.model.gate.wg.set_requires_grad(!st.model.gate.frozen);
        for (std::size_t i = 0; i < st.model.gate.prompts.size(); ++i)
            st.model.gate.taus.push_back(Tensor::zeros({cfg.d_txt}));
    }
    std::vector<TaskEntry> entries;
    for (const auto& jt : meta.at("tasks")) {
        TaskEntry t;
        t.task_id = jt.at("task_id").get<int>();
        t.data_id = jt.value("data_id", t.task_id);
        t.expert_index = jt.at("expert_index").get<int>();
        t.classes = jt.at("classes").get<std::vector<int>>();
        t.prompt = jt.at("prompt").get<std::string>();
        st.registry.register_task(t);
    }

    // tensor section
    const std::uint64_t count = r.u64();
    std::vector<detail_ckpt::NamedTensor> loaded;
    loaded.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        detail_ckpt::NamedTensor nt;
        nt.name = r.str();
        nt.frozen = r.u8() != 0;
        const std::uint32_t ndims = r.u32();
        if (ndims > 8)
            throw ParseError(r.name + ": implausible rank at byte offset " +
                             std::to_string(r.offset - 4));
        std::vector<std::size_t> shape;
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < ndims; ++d) {
            shape.push_back(r.u64());
            numel *= shape.back();
        }
        const std::uint64_t byte_len = r.u64();
        if (byte_len != numel * sizeof(float))
            throw ParseError(r.name + ": tensor '" + nt.name +
                             "' payload length mismatch at byte offset " +
                             std::to_string(r.offset - 8));
        std::vector<float> data(numel);
        r.bytes(data.data(), byte_len);
        nt.tensor = Tensor::from(shape, std::move(data));
        loaded.push_back(std::move(nt));
    }

    // apply tensors onto the rebuilt skeleton
    std::size_t cursor = 0;
    auto next_loaded = [&](const std::string& expect) -> detail_ckpt::NamedTensor& {
        if (cursor >= loaded.size())
            throw ParseError(r.name + ": missing tensor '" + expect + "'");
        detail_ckpt::NamedTensor& nt = loaded[cursor++];
        if (nt.name != expect)
            throw ParseError(r.name + ": expected tensor '" + expect + "', found '" + nt.name +
                             "'");
        return nt;
    };
    st.model.for_each_param([&](const ParamRef& p) {
        detail_ckpt::NamedTensor& nt = next_loaded(p.name);
        if (nt.tensor.shape() != p.tensor.shape())
            throw ParseError(r.name + ": tensor '" + p.name + "' shape mismatch");
        Tensor dst = p.tensor;
        dst.mutable_data() = nt.tensor.data();
    });
    for (const auto& jt : meta.at("tasks")) {
        if (!jt.at("has_centroid").get<bool>()) continue;
        const int task_id = jt.at("task_id").get<int>();
        detail_ckpt::NamedTensor& nt =
            next_loaded("task" + std::to_string(task_id) + ".centroid");
        st.registry.set_centroid(task_id, nt.tensor.data());
    }
    if (cursor != loaded.size())
        throw ParseError(r.name + ": unexpected extra tensor '" + loaded[cursor].name + "'");

    apply_frozen_flags(st.model, loaded);
    return st;
}

// Text summary used by the inspect command; the parameter counts come from
// the shared registry walk.
inline std::string checkpoint_summary(const CheckpointState& st) {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "mode=%s experts=%d training_step=%d merged_upto=%d\n",
                  run_mode_name(st.model.mode), st.model.expert_count, st.training_step,
                  st.model.merged_upto);
    out += buf;
    const BackboneConfig& c = st.model.cfg;
    std::snprintf(buf, sizeof(buf),
                  "backbone d_model=%zu heads=%zu blocks=%zu d_ff=%zu patch=%zu rank=%zu "
                  "adapt_attention=%d\n",
                  c.d_model, c.heads, c.blocks, c.d_ff, c.patch, c.rank,
                  c.adapt_attention ? 1 : 0);
    out += buf;
    out += "label_space=";
    for (std::size_t i = 0; i < st.label_space.size(); ++i)
        out += (i ? "," : "") + std::to_string(st.label_space[i]);
    out += "\n";
    int frozen_experts = 0;
    for (const Block& blk : st.model.blocks)
        if (!blk.ffn.wi.adapters().empty()) {
            for (const LoraAdapter& ad : blk.ffn.wi.adapters())
                frozen_experts += ad.frozen ? 1 : 0;
            break;
        }
    std::snprintf(buf, sizeof(buf), "frozen_experts=%d\n", frozen_experts);
    out += buf;
    for (const TaskEntry& t : st.registry.tasks()) {
        out += "task id=" + std::to_string(t.task_id) +
               " expert=" + std::to_string(t.expert_index) + " classes=";
        for (std::size_t i = 0; i < t.classes.size(); ++i)
            out += (i ? "," : "") + std::to_string(t.classes[i]);
        if (!t.prompt.empty()) out += " prompt=\"" + t.prompt + "\"";
        out += "\n";
    }
    const std::size_t trainable = st.model.trainable_param_count();
    const std::size_t total = st.model.total_param_count();
    std::snprintf(buf, sizeof(buf), "params trainable=%zu total=%zu fraction=%.6f\n", trainable,
                  total, total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0);
    out += buf;
    return out;
}

} // namespace lomoe
