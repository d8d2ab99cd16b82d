#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <vector>

#include "lomoe/dataio.hpp"
#include "lomoe/datasynth.hpp"
#include "oracles.hpp"

using namespace lomoe;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "lomoe_data_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("generation is a pure function of the spec") {
    TaskSpec spec = builtin_task_profile(1, 321);
    auto a = gen_task_dataset(spec, "train");
    auto b = gen_task_dataset(spec, "train");
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.data() == b[i].image.data());
        CHECK(a[i].mask == b[i].mask);
    }
    // splits draw from disjoint streams
    auto t = gen_task_dataset(spec, "test");
    CHECK(t[0].image.data() != a[0].image.data());
}

TEST_CASE("empty shape vocabulary produces all-background masks") {
    TaskSpec spec;
    spec.task_id = 9;
    spec.seed = 5;
    spec.classes.clear();
    spec.train_count = 3;
    auto ds = gen_task_dataset(spec, "train");
    for (const Sample& s : ds)
        for (std::uint16_t v : s.mask) CHECK(v == 0);
}

TEST_CASE("foreground fraction stays within 5-40% and values within [0,1]") {
    for (int task = 1; task <= 3; ++task) {
        TaskSpec spec = builtin_task_profile(task, 77);
        spec.train_count = 40;
        for (const Sample& s : gen_task_dataset(spec, "train")) {
            std::size_t fg = 0;
            for (std::uint16_t v : s.mask) fg += v != 0;
            const double frac = static_cast<double>(fg) / static_cast<double>(s.mask.size());
            CHECK(frac >= 0.05);
            CHECK(frac <= 0.40);
            for (float v : s.image.data()) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
            for (std::uint16_t v : s.mask) CHECK((v == 0 || v == task));
        }
    }
    // class-level step 1 uses classes 1..4 only
    TaskSpec cls = builtin_class_profile(1, 77);
    cls.train_count = 20;
    for (const Sample& s : gen_task_dataset(cls, "train"))
        for (std::uint16_t v : s.mask) CHECK(v <= 4);
}

TEST_CASE("default task profiles are statistically separable (Fisher >= 3)") {
    std::vector<std::vector<double>> means(3);
    for (int task = 1; task <= 3; ++task) {
        TaskSpec spec = builtin_task_profile(task, 2025);
        spec.train_count = 200;
        for (const Sample& s : gen_task_dataset(spec, "train")) {
            double m = 0.0;
            for (float v : s.image.data()) m += v;
            means[static_cast<std::size_t>(task - 1)].push_back(
                m / static_cast<double>(s.image.numel()));
        }
    }
    for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
            const auto ma = oracle::mean_var(means[static_cast<std::size_t>(a)]);
            const auto mb = oracle::mean_var(means[static_cast<std::size_t>(b)]);
            const double fisher =
                std::abs(ma.mean - mb.mean) / std::sqrt(0.5 * (ma.var + mb.var));
            CHECK(fisher >= 3.0);
        }
}

TEST_CASE("accumulate_labels: union semantics and collisions") {
    // thirteen organ ids plus background, then one new id
    std::vector<int> prev;
    std::vector<int> organs;
    for (int i = 1; i <= 13; ++i) organs.push_back(i);
    auto y1 = accumulate_labels(prev, organs);
    CHECK(y1.size() == 13);
    auto y2 = accumulate_labels(y1, {14});
    CHECK(y2.size() == 14); // 15 entries counting background id 0, kept implicit
    CHECK(y2.back() == 14);

    CHECK(accumulate_labels({}, {1, 2}) == std::vector<int>{1, 2});
    CHECK(accumulate_labels(y1, {}) == y1); // idempotent on empty addition
    CHECK_THROWS_AS(accumulate_labels(y1, {5}), ConfigError);
}

TEST_CASE("dataset folder round-trip is lossless") {
    const auto dir = fresh_dir("roundtrip");
    TaskSpec spec = builtin_task_profile(2, 11);
    spec.train_count = 5;
    auto samples = gen_task_dataset(spec, "train");
    save_dataset(dir, "roundtrip", 2, {2}, samples);
    FolderDataset loaded = load_folder_dataset(dir);
    CHECK(loaded.task_id == 2);
    CHECK(loaded.classes == std::vector<int>{2});
    REQUIRE(loaded.samples.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded.samples[i].image.data() == samples[i].image.data());
        CHECK(loaded.samples[i].mask == samples[i].mask);
    }
}

TEST_CASE("mask ids outside the declared set are named in the error") {
    const auto dir = fresh_dir("badid");
    TaskSpec spec = builtin_task_profile(1, 3);
    spec.train_count = 2;
    auto samples = gen_task_dataset(spec, "train");
    samples[1].mask[10] = 42;
    save_dataset(dir, "bad", 1, {1}, samples);
    try {
        load_folder_dataset(dir);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("42") != std::string::npos);
    }
}

TEST_CASE("empty directory loads as an empty dataset") {
    const auto dir = fresh_dir("empty");
    FolderDataset ds = load_folder_dataset(dir);
    CHECK(ds.samples.empty());
}

TEST_CASE("malformed container files carry the file name") {
    const auto dir = fresh_dir("malformed");
    {
        std::ofstream bad(dir / "broken.lmt", std::ios::binary);
        bad << "NOPE f32 2 4 4\n";
    }
    try {
        read_lmt_f32(dir / "broken.lmt");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("broken.lmt") != std::string::npos);
    }
    {
        std::ofstream trunc(dir / "short.lmt", std::ios::binary);
        trunc << "LMT1 f32 2 4 4\n";
        const float v = 1.0f;
        trunc.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    CHECK_THROWS_AS(read_lmt_f32(dir / "short.lmt"), ParseError);
}

TEST_CASE("lmt containers round-trip floats and u16 exactly") {
    const auto dir = fresh_dir("lmt");
    Rng rng(9, 9);
    Tensor t = randn({7, 5}, rng, 1.3);
    write_lmt_f32(dir / "t.lmt", t);
    Tensor back = read_lmt_f32(dir / "t.lmt");
    CHECK(back.shape() == t.shape());
    CHECK(back.data() == t.data());

    std::vector<std::uint16_t> mask = {0, 1, 65535, 7, 42, 9};
    write_lmt_u16(dir / "m.lmt", mask, {2, 3});
    std::vector<std::size_t> shape;
    auto mback = read_lmt_u16(dir / "m.lmt", shape);
    CHECK(shape == std::vector<std::size_t>{2, 3});
    CHECK(mback == mask);
}
