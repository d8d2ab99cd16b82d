#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lomoe/errors.hpp"
#include "lomoe/gating.hpp"
#include "lomoe/lora.hpp"
#include "lomoe/tensor.hpp"

namespace lomoe {

enum class RunMode { Task, Class };

inline const char* run_mode_name(RunMode m) { return m == RunMode::Task ? "task" : "class"; }

struct BackboneConfig {
    std::size_t image_size = 32;
    std::size_t patch = 4;
    std::size_t d_model = 160;
    std::size_t heads = 8;
    std::size_t blocks = 4;
    std::size_t d_ff = 640;
    std::size_t rank = 8;
    bool adapt_attention = false; // stack attention adapters alongside FFN experts
    std::size_t d_txt = 32;

    std::size_t d_k() const { return d_model / heads; }

    static BackboneConfig desk() { return BackboneConfig{}; }

    // The configuration the original setup reports: d_k = 64 at d_model = 512.
    static BackboneConfig paper_dims() {
        BackboneConfig c;
        c.d_model = 512;
        c.heads = 8;
        c.d_ff = 2048;
        c.adapt_attention = true;
        return c;
    }

    void validate() const {
        if (d_model == 0 || heads == 0 || blocks == 0 || d_ff == 0 || patch == 0)
            throw ConfigError("backbone dimensions must be positive");
        if (d_model % heads != 0)
            throw ConfigError("heads must divide d_model (" + std::to_string(heads) + " vs " +
                              std::to_string(d_model) + ")");
        if (image_size % patch != 0)
            throw ConfigError("patch size must divide the image size");
        if (rank < 1) throw ConfigError("rank must be >= 1");
    }
};

// Standard sinusoidal position encoding, computed in double.
inline Tensor sinusoidal_positions(std::size_t seq, std::size_t d_model) {
    Tensor t = Tensor::zeros({seq, d_model});
    auto& v = t.mutable_data();
    for (std::size_t s = 0; s < seq; ++s) {
        for (std::size_t i = 0; i < d_model; i += 2) {
            const double angle =
                static_cast<double>(s) /
                std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
            v[s * d_model + i] = static_cast<float>(std::sin(angle));
            if (i + 1 < d_model) v[s * d_model + i + 1] = static_cast<float>(std::cos(angle));
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// layers

// Per-head low-rank projections plus the low-rank output projection.
struct AttentionLayer {
    std::size_t heads = 1;
    std::size_t d_k = 1;
    std::vector<LoraLinear> wq, wk, wv; // one d_model x d_k layer per head
    LoraLinear wo;                      // d_model x d_model

    Tensor forward(const Tensor& x, std::size_t upto) const {
        std::vector<Tensor> head_outs;
        head_outs.reserve(heads);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_k));
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t cap = std::min(upto, wq[h].expert_count());
            Tensor q = wq[h].forward_prefix(x, cap);
            Tensor k = wk[h].forward_prefix(x, std::min(upto, wk[h].expert_count()));
            Tensor v = wv[h].forward_prefix(x, std::min(upto, wv[h].expert_count()));
            Tensor att = softmax(scale(matmul(q, transpose(k)), inv_sqrt), -1);
            head_outs.push_back(matmul(att, v));
        }
        Tensor concat = heads == 1 ? head_outs[0] : concat_cols(head_outs);
        return wo.forward_prefix(concat, std::min(upto, wo.expert_count()));
    }
};

// Two low-rank projections around GeLU; the adapter list doubles as the
// expert list.
struct FfnLayer {
    LoraLinear wi; // d_model x d_ff
    LoraLinear wo; // d_ff x d_model

    std::size_t expert_count() const {
        if (wi.expert_count() != wo.expert_count())
            throw StateError("ffn expert lists out of sync");
        return wi.expert_count();
    }

    // Cumulative stack: experts 1..upto applied on both projections.
    Tensor forward_stack(const Tensor& x, std::size_t upto) const {
        const std::size_t cap = std::min(upto, expert_count());
        return wo.forward_prefix(gelu(wi.forward_prefix(x, cap)), cap);
    }

    // Single expert e with its deltas on both projections.
    Tensor forward_expert(const Tensor& x, std::size_t e) const {
        if (e < 1 || e > expert_count())
            throw RoutingError("ffn expert " + std::to_string(e) + " of " +
                               std::to_string(expert_count()));
        return wo.forward_single(gelu(wi.forward_single(x, e)), e);
    }

    // y = sum_e g[e] * FFN_e(x); zero-weight experts cost nothing.
    Tensor combine(const Tensor& x, const std::vector<float>& g) const {
        if (g.size() != expert_count())
            throw ShapeError("combine: gate vector length " + std::to_string(g.size()) +
                             " vs " + std::to_string(expert_count()) + " experts");
        Tensor acc = Tensor::zeros({x.dim(0), wo.out_dim()});
        for (std::size_t e = 0; e < g.size(); ++e) {
            if (g[e] == 0.0f) continue;
            Tensor term = forward_expert(x, e + 1);
            acc = add(acc, g[e] == 1.0f ? term : scale(term, g[e]));
        }
        return acc;
    }

    // Soft token-wise gating: y = sum_e diag(gw_e) * FFN_e(x).
    Tensor combine_tokenwise(const Tensor& x, const std::vector<Tensor>& gw) const {
        Tensor acc = Tensor::zeros({x.dim(0), wo.out_dim()});
        for (std::size_t e = 0; e < gw.size(); ++e)
            acc = add(acc, row_scale(forward_expert(x, e + 1), gw[e]));
        return acc;
    }

    // Differentiable counterpart of hard routing: the per-token winning
    // expert keeps its gate weight, all others are masked to zero. Function
    // values equal the top-1 inference path; gradients flow through the
    // winner's gate and expert.
    Tensor combine_top1_masked(const Tensor& x, const std::vector<Tensor>& gw) const {
        const std::size_t s = x.dim(0);
        std::vector<std::size_t> pick(s);
        for (std::size_t i = 0; i < s; ++i) {
            std::size_t best = 0;
            for (std::size_t e = 1; e < gw.size(); ++e)
                if (gw[e].at(i) > gw[best].at(i)) best = e;
            pick[i] = best;
        }
        Tensor acc = Tensor::zeros({x.dim(0), wo.out_dim()});
        for (std::size_t e = 0; e < gw.size(); ++e) {
            Tensor mask = Tensor::zeros({s});
            bool any = false;
            for (std::size_t i = 0; i < s; ++i)
                if (pick[i] == e) {
                    mask.mutable_data()[i] = 1.0f;
                    any = true;
                }
            if (!any) continue;
            acc = add(acc, row_scale(forward_expert(x, e + 1), mul(gw[e], mask)));
        }
        return acc;
    }
};

struct Block {
    AttentionLayer attn;
    FfnLayer ffn;
};

// One classification head. Task mode keeps one head per task over
// {background} + C^t; class mode keeps one column segment per step.
struct TaskHead {
    Tensor w;                 // d_model x columns
    std::vector<int> classes; // class id per column (0 = background)
    bool frozen = false;

    void freeze() {
        frozen = true;
        w.set_requires_grad(false);
    }
};

struct ParamRef {
    std::string name;
    Tensor tensor;
    bool frozen;
};

// ---------------------------------------------------------------------------
// backbone

class SegModel {
public:
    BackboneConfig cfg;
    RunMode mode = RunMode::Task;
    std::uint64_t master_seed = 0;
    Tensor patch_proj; // patch*patch x d_model, frozen
    std::vector<Block> blocks;
    std::vector<TaskHead> heads;
    ClassGate gate;
    int expert_count = 0;
    int merged_upto = -1; // >= 0 once adapters were folded into the bases
    bool in_training_step = false;

    static SegModel build(const BackboneConfig& cfg, RunMode mode, std::uint64_t master_seed) {
        cfg.validate();
        SegModel m;
        m.cfg = cfg;
        m.mode = mode;
        m.master_seed = master_seed;
        const std::size_t pp = cfg.patch * cfg.patch;
        {
            Rng r = Rng::derive(master_seed, "patch.proj");
            m.patch_proj = randn({pp, cfg.d_model}, r, 1.0 / std::sqrt(static_cast<double>(pp)));
        }
        const double sig_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        const double sig_ff = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
        for (std::size_t b = 0; b < cfg.blocks; ++b) {
            Block blk;
            blk.attn.heads = cfg.heads;
            blk.attn.d_k = cfg.d_k();
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                for (const char* kind : {"wq", "wk", "wv"}) {
                    Rng r = Rng::derive(master_seed, "block" + std::to_string(b) + ".attn." +
                                                         kind + std::to_string(h) + ".base");
                    LoraLinear lin = LoraLinear::init(cfg.d_model, cfg.d_k(), r, sig_d);
                    if (kind[1] == 'q')
                        blk.attn.wq.push_back(std::move(lin));
                    else if (kind[1] == 'k')
                        blk.attn.wk.push_back(std::move(lin));
                    else
                        blk.attn.wv.push_back(std::move(lin));
                }
            }
            {
                Rng r = Rng::derive(master_seed,
                                    "block" + std::to_string(b) + ".attn.wo_proj.base");
                blk.attn.wo = LoraLinear::init(cfg.d_model, cfg.d_model, r, sig_d);
            }
            {
                Rng r = Rng::derive(master_seed, "block" + std::to_string(b) + ".ffn.wi.base");
                blk.ffn.wi = LoraLinear::init(cfg.d_model, cfg.d_ff, r, sig_d);
            }
            {
                Rng r = Rng::derive(master_seed, "block" + std::to_string(b) + ".ffn.wo.base");
                blk.ffn.wo = LoraLinear::init(cfg.d_ff, cfg.d_model, r, sig_ff);
            }
            m.blocks.push_back(std::move(blk));
        }
        if (mode == RunMode::Class) {
            Rng r = Rng::derive(master_seed, "gate.wg");
            m.gate.wg = randn({cfg.d_model, cfg.d_txt}, r,
                              1.0 / std::sqrt(static_cast<double>(cfg.d_model)), true);
        }
        return m;
    }

    // ------------------------------------------------------------------
    // expert lifecycle

    // Freezes everything currently trainable, then appends one fresh
    // zero-delta expert per adapted layer. Outputs are unchanged until the
    // new expert trains.
    int add_expert() {
        if (in_training_step) throw StateError("add_expert called mid training step");
        freeze_all();
        ++expert_count;
        const int id = expert_count;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            Block& blk = blocks[b];
            auto adapter_rng = [&](const std::string& layer) {
                return Rng::derive(master_seed, "block" + std::to_string(b) + "." + layer +
                                                    ".expert" + std::to_string(id));
            };
            if (mode == RunMode::Task && cfg.adapt_attention) {
                const std::size_t r_attn = cfg.rank;
                for (std::size_t h = 0; h < cfg.heads; ++h) {
                    Rng rq = adapter_rng("attn.wq" + std::to_string(h));
                    blk.attn.wq[h].add_adapter(r_attn, rq, id);
                    Rng rk = adapter_rng("attn.wk" + std::to_string(h));
                    blk.attn.wk[h].add_adapter(r_attn, rk, id);
                    Rng rv = adapter_rng("attn.wv" + std::to_string(h));
                    blk.attn.wv[h].add_adapter(r_attn, rv, id);
                }
                Rng ro = adapter_rng("attn.wo_proj");
                blk.attn.wo.add_adapter(cfg.rank, ro, id);
            }
            Rng ri = adapter_rng("ffn.wi");
            blk.ffn.wi.add_adapter(cfg.rank, ri, id);
            Rng rw = adapter_rng("ffn.wo");
            blk.ffn.wo.add_adapter(cfg.rank, rw, id);
        }
        return id;
    }

    // Opt-in warm start: the new expert copies the previous expert's
    // factors instead of the zero init. Changes outputs immediately.
    void warm_start_copy_from_previous() {
        if (expert_count < 2) throw StateError("warm start needs a previous expert");
        for (Block& blk : blocks) {
            auto copy_last = [](LoraLinear& lin) {
                auto& ads = lin.adapters_mutable();
                if (ads.size() < 2) return;
                LoraAdapter& dst = ads.back();
                const LoraAdapter& src = ads[ads.size() - 2];
                dst.b = Tensor::from(src.b.shape(), src.b.data(), true);
                dst.a = Tensor::from(src.a.shape(), src.a.data(), true);
            };
            copy_last(blk.ffn.wi);
            copy_last(blk.ffn.wo);
            if (mode == RunMode::Task && cfg.adapt_attention) {
                for (std::size_t h = 0; h < cfg.heads; ++h) {
                    copy_last(blk.attn.wq[h]);
                    copy_last(blk.attn.wk[h]);
                    copy_last(blk.attn.wv[h]);
                }
                copy_last(blk.attn.wo);
            }
        }
    }

    // Task mode: head over {0} + classes. Class mode: one column segment per
    // step; the background column lives in segment 1.
    int add_head(const std::vector<int>& classes) {
        std::vector<int> cols;
        if (mode == RunMode::Task || heads.empty()) cols.push_back(0);
        cols.insert(cols.end(), classes.begin(), classes.end());
        TaskHead head;
        head.classes = cols;
        head.w = Tensor::zeros({cfg.d_model, cols.size()}, true);
        heads.push_back(std::move(head));
        return static_cast<int>(heads.size());
    }

    void add_gate_tau(const Tensor& tau, const std::string& prompt) {
        if (mode != RunMode::Class) throw StateError("gate embeddings are class-mode only");
        gate.taus.push_back(tau);
        gate.prompts.push_back(prompt);
    }

    void freeze_all() {
        for (Block& blk : blocks) {
            blk.ffn.wi.freeze_all();
            blk.ffn.wo.freeze_all();
            for (LoraLinear& l : blk.attn.wq) l.freeze_all();
            for (LoraLinear& l : blk.attn.wk) l.freeze_all();
            for (LoraLinear& l : blk.attn.wv) l.freeze_all();
            blk.attn.wo.freeze_all();
        }
        for (TaskHead& h : heads) h.freeze();
        if (mode == RunMode::Class && gate.wg.numel() > 0) gate.freeze();
    }

    // ------------------------------------------------------------------
    // forward

    // H x W image -> (H/P * W/P) x P^2 constant token matrix.
    Tensor patchify(const Tensor& image) const {
        if (image.rank() != 2) throw ShapeError("patchify: image must be H x W");
        const std::size_t h = image.dim(0), w = image.dim(1), p = cfg.patch;
        if (h % p != 0 || w % p != 0)
            throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by patch " + std::to_string(p));
        const std::size_t gh = h / p, gw = w / p;
        Tensor out = Tensor::zeros({gh * gw, p * p});
        auto& v = out.mutable_data();
        for (std::size_t gy = 0; gy < gh; ++gy)
            for (std::size_t gx = 0; gx < gw; ++gx)
                for (std::size_t py = 0; py < p; ++py)
                    for (std::size_t px = 0; px < p; ++px)
                        v[(gy * gw + gx) * p * p + py * p + px] =
                            image.at(gy * p + py, gx * p + px);
        return out;
    }

    Tensor embed(const Tensor& image) const {
        Tensor tokens = matmul(patchify(image), patch_proj);
        return add(tokens, sinusoidal_positions(tokens.dim(0), cfg.d_model));
    }

    // Task-level encoder: cumulative expert stack 1..upto everywhere.
    Tensor encode_task(const Tensor& image, std::size_t upto) const {
        Tensor x = embed(image);
        for (const Block& blk : blocks) {
            x = add(x, blk.attn.forward(layer_norm(x), upto));
            x = add(x, blk.ffn.forward_stack(layer_norm(x), upto));
        }
        return layer_norm(x);
    }

    enum class GateMode {
        Soft,       // weighted sum of every expert
        Top1Masked, // hard routing, differentiable (training)
        Top1        // hard routing, winners only (inference)
    };

    // Class-level encoder with the chosen gating mode.
    Tensor encode_class(const Tensor& image, std::size_t upto, GateMode gmode,
                        std::vector<int>* routing = nullptr) const {
        if (mode != RunMode::Class) throw StateError("encode_class on a task-mode model");
        Tensor x = embed(image);
        for (const Block& blk : blocks) {
            x = add(x, blk.attn.forward(layer_norm(x), 0));
            Tensor u = layer_norm(x);
            std::vector<Tensor> gw = gate.weights(u, upto);
            Tensor moe = gmode == GateMode::Top1 ? top1_moe(blk.ffn, u, gw, routing)
                         : gmode == GateMode::Top1Masked
                             ? blk.ffn.combine_top1_masked(u, gw)
                             : blk.ffn.combine_tokenwise(u, gw);
            x = add(x, moe);
            routing = nullptr; // record first block only
        }
        return layer_norm(x);
    }

    Tensor encode_class(const Tensor& image, std::size_t upto, bool top1,
                        std::vector<int>* routing = nullptr) const {
        return encode_class(image, upto, top1 ? GateMode::Top1 : GateMode::Soft, routing);
    }

    // Token logits for task `task_id` (head restricted to its label set).
    Tensor token_logits_task(const Tensor& image, int task_id) const {
        if (task_id < 1 || task_id > static_cast<int>(heads.size()))
            throw RoutingError("unknown task head " + std::to_string(task_id));
        const std::size_t upto =
            merged_upto >= 0 ? 0 : static_cast<std::size_t>(task_id);
        Tensor feat = encode_task(image, upto);
        return matmul(feat, heads[static_cast<std::size_t>(task_id - 1)].w);
    }

    // Token logits over the accumulated label set of steps 1..upto.
    Tensor token_logits_class(const Tensor& image, std::size_t upto, GateMode gmode,
                              std::vector<int>* routing = nullptr) const {
        if (upto < 1 || upto > heads.size())
            throw RoutingError("class logits: bad step " + std::to_string(upto));
        Tensor feat = encode_class(image, upto, gmode, routing);
        std::vector<Tensor> segs;
        for (std::size_t t = 0; t < upto; ++t) segs.push_back(matmul(feat, heads[t].w));
        return segs.size() == 1 ? segs[0] : concat_cols(segs);
    }

    Tensor token_logits_class(const Tensor& image, std::size_t upto, bool top1,
                              std::vector<int>* routing = nullptr) const {
        return token_logits_class(image, upto, top1 ? GateMode::Top1 : GateMode::Soft, routing);
    }

    // Per-pixel probabilities: bilinear-upsampled token logits, softmax over
    // the class axis.
    Tensor pixel_probs_from_tokens(const Tensor& token_logits, std::size_t img_h,
                                   std::size_t img_w) const {
        const std::size_t gh = img_h / cfg.patch, gw = img_w / cfg.patch;
        return softmax(bilinear_upsample(token_logits, gh, gw, img_h, img_w), -1);
    }

    Tensor pixel_probs_task(const Tensor& image, int task_id) const {
        return pixel_probs_from_tokens(token_logits_task(image, task_id), image.dim(0),
                                       image.dim(1));
    }

    Tensor pixel_probs_class(const Tensor& image, std::size_t upto, bool top1) const {
        return pixel_probs_from_tokens(token_logits_class(image, upto, top1), image.dim(0),
                                       image.dim(1));
    }

    Tensor pixel_probs_class(const Tensor& image, std::size_t upto, GateMode gmode) const {
        return pixel_probs_from_tokens(token_logits_class(image, upto, gmode), image.dim(0),
                                       image.dim(1));
    }

    // Class ids per pixel from a probability map; ties resolve to the lowest
    // column index.
    std::vector<int> argmax_mask(const Tensor& probs, const std::vector<int>& column_classes) const {
        const std::size_t n = probs.dim(0), c = probs.dim(1);
        if (column_classes.size() != c) throw ShapeError("argmax_mask: column map mismatch");
        std::vector<int> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (probs.at(i, j) > probs.at(i, best)) best = j;
            out[i] = column_classes[best];
        }
        return out;
    }

    // Column-to-class mapping for the label space of steps 1..upto.
    std::vector<int> class_columns(std::size_t upto) const {
        std::vector<int> cols;
        for (std::size_t t = 0; t < upto && t < heads.size(); ++t)
            cols.insert(cols.end(), heads[t].classes.begin(), heads[t].classes.end());
        return cols;
    }

    // ------------------------------------------------------------------
    // parameter registry (stable order; checkpoint and optimizer share it)

    void for_each_param(const std::function<void(const ParamRef&)>& fn) const {
        auto emit = [&](const std::string& name, const Tensor& t, bool frozen) {
            fn(ParamRef{name, t, frozen});
        };
        emit("patch.proj", patch_proj, true);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const Block& blk = blocks[b];
            const std::string pre = "block" + std::to_string(b) + ".";
            auto emit_linear = [&](const std::string& lname, const LoraLinear& lin) {
                emit(pre + lname + ".base", lin.base(), true);
                for (const LoraAdapter& ad : lin.adapters()) {
                    const std::string e = ".expert" + std::to_string(ad.expert_id);
                    emit(pre + lname + e + ".B", ad.b, ad.frozen);
                    emit(pre + lname + e + ".A", ad.a, ad.frozen);
                }
            };
            for (std::size_t h = 0; h < blk.attn.wq.size(); ++h) {
                emit_linear("attn.wq" + std::to_string(h), blk.attn.wq[h]);
                emit_linear("attn.wk" + std::to_string(h), blk.attn.wk[h]);
                emit_linear("attn.wv" + std::to_string(h), blk.attn.wv[h]);
            }
            emit_linear("attn.wo_proj", blk.attn.wo);
            emit_linear("ffn.wi", blk.ffn.wi);
            emit_linear("ffn.wo", blk.ffn.wo);
        }
        for (std::size_t t = 0; t < heads.size(); ++t)
            emit("head" + std::to_string(t + 1) + ".w", heads[t].w, heads[t].frozen);
        if (mode == RunMode::Class && gate.wg.numel() > 0) {
            emit("gate.wg", gate.wg, gate.frozen);
            for (std::size_t e = 0; e < gate.taus.size(); ++e)
                emit("gate.tau" + std::to_string(e + 1), gate.taus[e], true);
        }
    }

    std::vector<ParamRef> parameters() const {
        std::vector<ParamRef> out;
        for_each_param([&](const ParamRef& p) { out.push_back(p); });
        return out;
    }

    std::size_t trainable_param_count() const {
        std::size_t n = 0;
        for_each_param([&](const ParamRef& p) {
            if (!p.frozen && p.tensor.requires_grad()) n += p.tensor.numel();
        });
        return n;
    }

    std::size_t total_param_count() const {
        std::size_t n = 0;
        for_each_param([&](const ParamRef& p) { n += p.tensor.numel(); });
        return n;
    }

    // Folds adapters 1..upto into every base matrix and drops all adapters.
    void merge_into_dense(std::size_t upto) {
        if (upto > static_cast<std::size_t>(expert_count))
            throw ContractError("merge: upto exceeds expert count");
        auto merge_linear = [&](LoraLinear& lin) {
            Tensor w = lin.merged(std::min(upto, lin.expert_count()));
            lin = LoraLinear(std::move(w));
        };
        for (Block& blk : blocks) {
            for (LoraLinear& l : blk.attn.wq) merge_linear(l);
            for (LoraLinear& l : blk.attn.wk) merge_linear(l);
            for (LoraLinear& l : blk.attn.wv) merge_linear(l);
            merge_linear(blk.attn.wo);
            merge_linear(blk.ffn.wi);
            merge_linear(blk.ffn.wo);
        }
        merged_upto = static_cast<int>(upto);
    }

private:
    // Hard routing: only the winning expert runs for each token. Evaluation
    // path; gradients do not flow through it.
    static Tensor top1_moe(const FfnLayer& ffn, const Tensor& u, const std::vector<Tensor>& gw,
                           std::vector<int>* routing) {
        NoGradGuard ng;
        const std::size_t s = u.dim(0), d = ffn.wo.out_dim();
        std::vector<std::size_t> pick(s);
        for (std::size_t i = 0; i < s; ++i) {
            std::vector<float> w(gw.size());
            for (std::size_t e = 0; e < gw.size(); ++e) w[e] = gw[e].at(i);
            pick[i] = top1_route(w);
        }
        if (routing) {
            routing->resize(s);
            for (std::size_t i = 0; i < s; ++i) (*routing)[i] = static_cast<int>(pick[i]);
        }
        Tensor out = Tensor::zeros({s, d});
        for (std::size_t e = 1; e <= gw.size(); ++e) {
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < s; ++i)
                if (pick[i] == e) rows.push_back(i);
            if (rows.empty()) continue;
            Tensor sub = Tensor::zeros({rows.size(), u.dim(1)});
            for (std::size_t ri = 0; ri < rows.size(); ++ri)
                std::copy_n(u.data().begin() + rows[ri] * u.dim(1), u.dim(1),
                            sub.mutable_data().begin() + ri * u.dim(1));
            Tensor y = ffn.forward_expert(sub, e);
            for (std::size_t ri = 0; ri < rows.size(); ++ri) {
                const float g = gw[e - 1].at(rows[ri]);
                for (std::size_t j = 0; j < d; ++j)
                    out.mutable_data()[rows[ri] * d + j] = g * y.at(ri, j);
            }
        }
        return out;
    }
};

} // namespace lomoe
