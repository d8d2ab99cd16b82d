#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "lomoe/continual.hpp"
#include "lomoe/lomoe.hpp"
#include "oracles.hpp"

using namespace lomoe;

namespace {

RunConfig mini_config(RunMode mode, std::vector<std::string> datasets,
                      const std::string& out_dir) {
    RunConfig cfg;
    cfg.mode = mode;
    cfg.seed = 2027;
    cfg.out_dir = out_dir;
    cfg.backbone = BackboneConfig();
    cfg.backbone.image_size = 16;
    cfg.backbone.patch = 4;
    cfg.backbone.d_model = 32;
    cfg.backbone.heads = 4;
    cfg.backbone.blocks = 2;
    cfg.backbone.d_ff = 64;
    cfg.backbone.rank = 2;
    cfg.backbone.adapt_attention = false;
    cfg.backbone.d_txt = 8;
    cfg.gate.d_txt = 8;
    cfg.optim.lr = 1e-3;
    cfg.warmup_epochs = 1;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.data.image_size = 16;
    cfg.data.train_per_task = 10;
    cfg.data.test_per_task = 6;
    cfg.data.support_size = 4;
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        StepConfig s;
        s.name = "step" + std::to_string(i + 1);
        s.dataset = datasets[i];
        s.prompt = "prompt for " + s.name;
        cfg.steps.push_back(s);
    }
    return cfg;
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "lomoe_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("adamw: zero gradient with weight decay shrinks the parameter") {
    Tensor p = Tensor::from({1}, {0.5f}, true);
    AdamW opt({.lr = 0.001, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.1});
    opt.register_param("p", p);
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(0.5 * (1.0 - 0.001 * 0.1)).epsilon(1e-6));
}

TEST_CASE("adamw: first-step bias-corrected update") {
    Tensor p = Tensor::from({1}, {1.0f}, true);
    AdamW opt({.lr = 0.001, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0});
    opt.register_param("p", p);
    backward(scale(p, 0.1)); // d loss / d p = 0.1
    opt.step();
    // mhat = 0.1, sqrt(vhat) = 0.1 -> update = -lr * 0.1/(0.1 + eps)
    const double expected = 1.0 - 0.001 * (0.1 / (0.1 + 1e-8));
    CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("adamw: frozen parameters cannot be registered; NaN gradients abort") {
    Tensor frozen = Tensor::from({1}, {1.0f}, false);
    AdamW opt;
    CHECK_THROWS_AS(opt.register_param("frozen", frozen), ContractError);

    Tensor p = Tensor::from({1}, {1.0f}, true);
    AdamW opt2;
    opt2.register_param("p", p);
    p.impl()->grad_accum()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(opt2.step(), NumericError);
}

TEST_CASE("lr schedule: warmup ramp, boundary continuity, cosine values") {
    Schedule s{1e-3, 0.0, 10, 100};
    CHECK(s.lr_at(0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.lr_at(9) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(s.lr_at(10) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(std::abs(s.lr_at(10) - s.lr_at(9)) < 1e-12);
    // closed form: epoch 55 sits at the cosine midpoint
    CHECK(s.lr_at(55) == doctest::Approx(0.5e-3).epsilon(1e-12));
    // monotone non-increasing after warmup
    for (std::size_t e = 11; e < 100; ++e) CHECK(s.lr_at(e) <= s.lr_at(e - 1) + 1e-15);
    CHECK(s.lr_at(99) < 2e-5);
    CHECK_THROWS_AS(s.lr_at(100), ContractError);

    Schedule floor{1e-3, 1e-5, 10, 100};
    for (std::size_t e = 0; e < 100; ++e) CHECK(floor.lr_at(e) >= 1e-5 - 1e-18);
}

TEST_CASE("dice_score oracle values and properties") {
    std::vector<int> a(200, 0), b(200, 0);
    for (int i = 0; i < 100; ++i) a[i] = 1;
    for (int i = 50; i < 150; ++i) b[i] = 1;
    CHECK(dice_score(a, a, 1) == 1.0);
    CHECK(dice_score(a, b, 1) == 0.5);

    std::vector<int> c(200, 0), d(200, 0);
    for (int i = 0; i < 30; ++i) c[i] = 1;
    for (int i = 100; i < 130; ++i) d[i] = 1;
    CHECK(dice_score(c, d, 1) == 0.0);

    // empty vs empty is defined as 1
    CHECK(dice_score(c, d, 7) == 1.0);

    // symmetry and relabeling invariance
    Rng rng(5, 1);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> p(64), t(64);
        for (auto& v : p) v = static_cast<int>(rng.next_below(3));
        for (auto& v : t) v = static_cast<int>(rng.next_below(3));
        for (int cls = 0; cls < 3; ++cls)
            CHECK(dice_score(p, t, cls) == dice_score(t, p, cls));
        // identical relabeling 1<->2 of both masks keeps the class-1 score as class 2
        auto relabel = [](std::vector<int> m) {
            for (int& v : m) v = v == 1 ? 2 : v == 2 ? 1 : v;
            return m;
        };
        CHECK(dice_score(p, t, 1) == dice_score(relabel(p), relabel(t), 2));
    }
}

TEST_CASE("seg_loss: exact zero at one-hot correct, ln C at uniform") {
    const std::size_t n = 12, c = 4;
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % c;
    Tensor onehot = Tensor::zeros({n, c});
    for (std::size_t i = 0; i < n; ++i) onehot.mutable_data()[i * c + labels[i]] = 1.0f;
    auto parts = seg_loss_parts(onehot, labels);
    CHECK(parts.total.item() == 0.0f);

    Tensor uniform = Tensor::filled({n, c}, 0.25f);
    auto uparts = seg_loss_parts(uniform, labels);
    CHECK(uparts.cross_entropy.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(uparts.total.item() > 0.0f);
}

TEST_CASE("seg_loss decreases over 50 steps on one fixed sample") {
    BackboneConfig cfg;
    cfg.image_size = 16;
    cfg.patch = 4;
    cfg.d_model = 32;
    cfg.heads = 4;
    cfg.blocks = 2;
    cfg.d_ff = 64;
    cfg.rank = 2;
    SegModel m = SegModel::build(cfg, RunMode::Task, 88);
    m.add_expert();
    m.add_head({1});
    TaskSpec spec = builtin_task_profile(1, 88);
    spec.image_size = 16;
    Sample s = gen_sample(spec, "train", 0);
    const auto labels = labels_from_mask(s.mask, m.heads[0].classes);

    AdamW opt({.lr = 2e-3, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 1e-6});
    opt.register_model_trainables(m);

    auto train_dice = [&]() {
        NoGradGuard ng;
        Tensor probs = m.pixel_probs_task(s.image, 1);
        const std::vector<int> pred = m.argmax_mask(probs, m.heads[0].classes);
        std::vector<int> truth(s.mask.begin(), s.mask.end());
        return dice_score(pred, truth, 1);
    };
    const double untrained_dice = train_dice();

    float first = 0.0f, last = 0.0f;
    for (int step = 0; step < 50; ++step) {
        opt.zero_grad();
        Tensor loss = seg_loss(m.pixel_probs_task(s.image, 1), labels);
        if (step == 0) first = loss.item();
        last = loss.item();
        backward(loss);
        opt.step();
    }
    CHECK(last < first);
    CHECK(last < 0.8f * first);
    // the just-trained sample clears the untrained model by a wide margin
    CHECK(train_dice() > untrained_dice + 0.3);
}

TEST_CASE("run_continual: single-step plan degenerates to single-task training") {
    const auto dir = fresh_dir("single");
    RunConfig cfg = mini_config(RunMode::Task, {"synth:task:1"}, dir.string());
    CheckpointState st;
    st.model = SegModel::build(cfg.backbone, cfg.mode, cfg.seed);
    Reporter rep(dir / "report.txt", false);
    RunResult res = run_continual(cfg, st, rep);
    CHECK(res.matrix.size() == 1);
    CHECK(res.matrix[0].size() == 1);
    CHECK(st.model.expert_count == 1);
    CHECK(st.training_step == 1);
    CHECK(std::filesystem::exists(dir / "step_1.lmoe"));
}

TEST_CASE("run_continual: retention is exact and the loader never crosses steps") {
    const auto dir = fresh_dir("retain2");
    RunConfig cfg = mini_config(RunMode::Task, {"synth:task:1", "synth:task:2"}, dir.string());
    CheckpointState st;
    st.model = SegModel::build(cfg.backbone, cfg.mode, cfg.seed);
    Reporter rep(dir / "report.txt", false);
    RunResult res = run_continual(cfg, st, rep);
    REQUIRE(res.matrix.size() == 2);
    // step-1 dice re-measured after step 2, unchanged to the last bit
    CHECK(res.matrix[1][0].mean_dice == res.matrix[0][0].mean_dice);
    REQUIRE(res.matrix[1][0].per_class.size() == res.matrix[0][0].per_class.size());
    for (std::size_t i = 0; i < res.matrix[0][0].per_class.size(); ++i)
        CHECK(res.matrix[1][0].per_class[i].second == res.matrix[0][0].per_class[i].second);

    // the access log proves no step ever consumed another step's data
    CHECK(!res.access_log.empty());
    for (const auto& [step, data] : res.access_log)
        CHECK(data == res.step_data_ids[static_cast<std::size_t>(step - 1)]);

    // frozen parameter bytes survived step 2 (expert 1 and head 1)
    CheckpointState s1 = load_checkpoint(dir / "step_1.lmoe");
    CheckpointState s2 = load_checkpoint(dir / "step_2.lmoe");
    for (std::size_t b = 0; b < s1.model.blocks.size(); ++b) {
        CHECK(s1.model.blocks[b].ffn.wi.adapters()[0].state_checksum() ==
              s2.model.blocks[b].ffn.wi.adapters()[0].state_checksum());
        CHECK(s1.model.blocks[b].ffn.wo.adapters()[0].state_checksum() ==
              s2.model.blocks[b].ffn.wo.adapters()[0].state_checksum());
    }
    CHECK(checksum(s1.model.heads[0].w) == checksum(s2.model.heads[0].w));
}

TEST_CASE("run_continual: three steps produce a full lower-triangular matrix") {
    const auto dir = fresh_dir("tri3");
    RunConfig cfg = mini_config(RunMode::Task,
                                {"synth:task:1", "synth:task:2", "synth:task:3"}, dir.string());
    CheckpointState st;
    st.model = SegModel::build(cfg.backbone, cfg.mode, cfg.seed);
    Reporter rep(dir / "report.txt", false);
    RunResult res = run_continual(cfg, st, rep);
    REQUIRE(res.matrix.size() == 3);
    CHECK(res.matrix[0].size() == 1);
    CHECK(res.matrix[1].size() == 2);
    CHECK(res.matrix[2].size() == 3);
    // retained entries stay put across later steps
    CHECK(res.matrix[2][0].mean_dice == res.matrix[0][0].mean_dice);
    CHECK(res.matrix[2][1].mean_dice == res.matrix[1][1].mean_dice);
}

TEST_CASE("run_continual: reversed order retains each task at its own-step value") {
    const auto fwd_dir = fresh_dir("order_fwd");
    const auto rev_dir = fresh_dir("order_rev");
    RunConfig fwd = mini_config(RunMode::Task, {"synth:task:1", "synth:task:2"},
                                fwd_dir.string());
    RunConfig rev = mini_config(RunMode::Task, {"synth:task:2", "synth:task:1"},
                                rev_dir.string());
    CheckpointState stf, str;
    stf.model = SegModel::build(fwd.backbone, fwd.mode, fwd.seed);
    str.model = SegModel::build(rev.backbone, rev.mode, rev.seed);
    Reporter repf(fwd_dir / "report.txt", false), repr(rev_dir / "report.txt", false);
    RunResult rf = run_continual(fwd, stf, repf);
    RunResult rr = run_continual(rev, str, repr);
    CHECK(rf.matrix[1][0].mean_dice == rf.matrix[0][0].mean_dice);
    CHECK(rr.matrix[1][0].mean_dice == rr.matrix[0][0].mean_dice);
    // the same datasets were seen in both runs, just in opposite order
    CHECK(rf.step_data_ids == std::vector<int>{1, 2});
    CHECK(rr.step_data_ids == std::vector<int>{2, 1});
}

TEST_CASE("continual_step rejects samples from another step's data") {
    const auto dir = fresh_dir("guard");
    RunConfig cfg = mini_config(RunMode::Task, {"synth:task:1"}, dir.string());
    CheckpointState st;
    st.model = SegModel::build(cfg.backbone, cfg.mode, cfg.seed);
    ResolvedStep step = resolve_step(cfg, 0);
    step.train[3].task_id = 7; // smuggled foreign sample
    Reporter rep(dir / "report.txt", false);
    CHECK_THROWS_AS(continual_step(cfg, st, step, rep, nullptr, nullptr), StateError);
}

TEST_CASE("class-mode continual run: step-1 expert and tau are bitwise stable") {
    const auto dir = fresh_dir("classrun");
    RunConfig cfg = mini_config(RunMode::Class, {"synth:class:1", "synth:class:2"},
                                dir.string());
    CheckpointState st;
    st.model = SegModel::build(cfg.backbone, cfg.mode, cfg.seed);
    Reporter rep(dir / "report.txt", false);
    RunResult res = run_continual(cfg, st, rep);
    REQUIRE(res.matrix.size() == 2);

    CheckpointState s1 = load_checkpoint(dir / "step_1.lmoe");
    CheckpointState s2 = load_checkpoint(dir / "step_2.lmoe");
    for (std::size_t b = 0; b < s1.model.blocks.size(); ++b) {
        CHECK(s1.model.blocks[b].ffn.wi.adapters()[0].state_checksum() ==
              s2.model.blocks[b].ffn.wi.adapters()[0].state_checksum());
        CHECK(s2.model.blocks[b].ffn.wi.adapters()[0].frozen);
        CHECK_FALSE(s2.model.blocks[b].ffn.wi.adapters()[1].frozen);
    }
    CHECK(checksum(s1.model.gate.taus[0]) == checksum(s2.model.gate.taus[0]));
    CHECK(checksum(s1.model.gate.wg) == checksum(s2.model.gate.wg));
    CHECK(s2.model.gate.frozen);

    // restricted step-1 inference after step 2 equals the step-1 checkpoint's
    TaskSpec spec = builtin_class_profile(1, cfg.seed);
    spec.image_size = 16;
    Sample probe = gen_sample(spec, "test", 0);
    NoGradGuard ng;
    Tensor a = s1.model.pixel_probs_class(probe.image, 1, true);
    Tensor b = s2.model.pixel_probs_class(probe.image, 1, true);
    CHECK(a.data() == b.data());

    // step-1 restricted dice is identical in both matrix rows
    CHECK(res.matrix[1][0].mean_dice == res.matrix[0][0].mean_dice);
}

TEST_CASE("warm-start copy duplicates the previous expert's factors") {
    BackboneConfig cfg;
    cfg.image_size = 16;
    cfg.patch = 4;
    cfg.d_model = 32;
    cfg.heads = 4;
    cfg.blocks = 1;
    cfg.d_ff = 64;
    cfg.rank = 2;
    SegModel m = SegModel::build(cfg, RunMode::Task, 9);
    m.add_expert();
    Rng pr(4, 4);
    for (float& v : m.blocks[0].ffn.wi.adapters_mutable()[0].b.mutable_data())
        v = pr.next_normal(0.2);
    m.add_expert();
    m.warm_start_copy_from_previous();
    CHECK(m.blocks[0].ffn.wi.adapters()[1].b.data() ==
          m.blocks[0].ffn.wi.adapters()[0].b.data());
    CHECK(m.blocks[0].ffn.wi.adapters()[1].a.data() ==
          m.blocks[0].ffn.wi.adapters()[0].a.data());
    // warm start is not output-neutral once the copied delta is nonzero
    Rng xr(6, 6);
    Tensor img = Tensor::zeros({16, 16});
    for (float& v : img.mutable_data()) v = static_cast<float>(xr.next_uniform());
    Tensor one = m.encode_task(img, 1);
    Tensor two = m.encode_task(img, 2);
    double diff = 0.0;
    for (std::size_t i = 0; i < one.numel(); ++i)
        diff = std::max(diff, std::abs(static_cast<double>(one.data()[i]) - two.data()[i]));
    CHECK(diff > 1e-7);
}
