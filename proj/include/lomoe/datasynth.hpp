#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "lomoe/errors.hpp"
#include "lomoe/rng.hpp"
#include "lomoe/tensor.hpp"

namespace lomoe {

// Synthetic stand-ins for the real modalities: each task owns a background
// intensity profile, a noise law, a texture and a small shape vocabulary.

enum class ShapeKind { Disk, Rect, Diamond, Stripe };

struct ClassSpec {
    int class_id = 1;
    ShapeKind shape = ShapeKind::Disk;
    float intensity = 0.5f;
};

struct TaskSpec {
    int task_id = 1;
    std::string name;
    float bg_mean = 0.2f;
    float bg_noise = 0.03f;
    float fg_noise = 0.03f;
    int texture = 0; // 0 flat, 1 horizontal waves, 2 vertical waves
    std::vector<ClassSpec> classes;
    std::size_t image_size = 32;
    std::size_t train_count = 100;
    std::size_t val_count = 0;
    std::size_t test_count = 40;
    std::uint64_t seed = 1;
    std::size_t shapes_per_image = 1; // capped by the vocabulary size
};

struct Sample {
    int task_id = 0;
    std::size_t height = 0, width = 0;
    Tensor image; // H x W floats in [0,1]
    std::vector<std::uint16_t> mask;
};

namespace detail_synth {

inline void paint_shape(Sample& s, const ClassSpec& cls, double frac, float fg_noise, Rng& rng) {
    const std::size_t h = s.height, w = s.width;
    const double area = frac * static_cast<double>(h * w);
    auto& img = s.image.mutable_data();
    auto set_px = [&](std::size_t y, std::size_t x) {
        img[y * w + x] = std::clamp(cls.intensity + rng.next_normal(fg_noise), 0.0f, 1.0f);
        s.mask[y * w + x] = static_cast<std::uint16_t>(cls.class_id);
    };
    switch (cls.shape) {
    case ShapeKind::Disk: {
        double r = std::sqrt(area / M_PI);
        r = std::min(r, static_cast<double>(std::min(h, w)) / 2.0 - 2.0);
        if (r < 1.0) throw ConfigError("image too small for a disk");
        const std::size_t margin = static_cast<std::size_t>(std::ceil(r)) + 1;
        const std::size_t cy = margin + rng.next_below(h - 2 * margin);
        const std::size_t cx = margin + rng.next_below(w - 2 * margin);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                if (dy * dy + dx * dx <= r * r) set_px(y, x);
            }
        break;
    }
    case ShapeKind::Rect: {
        const double aspect = 0.6 + 0.8 * rng.next_uniform();
        std::size_t rw = static_cast<std::size_t>(std::round(std::sqrt(area * aspect)));
        std::size_t rh = static_cast<std::size_t>(std::round(area / std::max<double>(rw, 1)));
        rw = std::clamp<std::size_t>(rw, 3, w - 3);
        rh = std::clamp<std::size_t>(rh, 3, h - 3);
        const std::size_t y0 = 1 + rng.next_below(h - rh - 1);
        const std::size_t x0 = 1 + rng.next_below(w - rw - 1);
        for (std::size_t y = y0; y < y0 + rh; ++y)
            for (std::size_t x = x0; x < x0 + rw; ++x) set_px(y, x);
        break;
    }
    case ShapeKind::Diamond: {
        double r = std::sqrt(area / 2.0);
        r = std::min(r, static_cast<double>(std::min(h, w)) / 2.0 - 2.0);
        if (r < 1.0) throw ConfigError("image too small for a diamond");
        const std::size_t margin = static_cast<std::size_t>(std::ceil(r)) + 1;
        const std::size_t cy = margin + rng.next_below(h - 2 * margin);
        const std::size_t cx = margin + rng.next_below(w - 2 * margin);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double dy = std::abs(static_cast<double>(y) - cy);
                const double dx = std::abs(static_cast<double>(x) - cx);
                if (dy + dx <= r) set_px(y, x);
            }
        break;
    }
    case ShapeKind::Stripe: {
        std::size_t band = static_cast<std::size_t>(std::round(area / static_cast<double>(w)));
        band = std::clamp<std::size_t>(band, 2, h - 2);
        const std::size_t y0 = 1 + rng.next_below(h - band - 1);
        for (std::size_t y = y0; y < y0 + band; ++y)
            for (std::size_t x = 0; x < w; ++x) set_px(y, x);
        break;
    }
    }
}

} // namespace detail_synth

// One reproducible sample. `split` keeps train/val/test streams disjoint.
inline Sample gen_sample(const TaskSpec& spec, const std::string& split, std::size_t index) {
    Rng rng = Rng::derive(spec.seed, "task" + std::to_string(spec.task_id) + "." + split + "." +
                                         std::to_string(index));
    const std::size_t h = spec.image_size, w = spec.image_size;
    Sample s;
    s.task_id = spec.task_id;
    s.height = h;
    s.width = w;
    s.image = Tensor::zeros({h, w});
    s.mask.assign(h * w, 0);
    auto& img = s.image.mutable_data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double v = spec.bg_mean;
            if (spec.texture == 1)
                v += 0.02 * std::sin(2.0 * M_PI * static_cast<double>(y) / 8.0);
            else if (spec.texture == 2)
                v += 0.02 * std::sin(2.0 * M_PI * static_cast<double>(x) / 8.0);
            v += rng.next_normal(spec.bg_noise);
            img[y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    if (spec.classes.empty()) return s;

    const std::size_t want = std::min(spec.shapes_per_image, spec.classes.size());
    // deterministic choice of which classes appear in this sample
    std::vector<std::size_t> order(spec.classes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.next_below(i)]);
    const double frac_lo = want > 1 ? 0.10 : 0.16;
    const double frac_hi = want > 1 ? 0.17 : 0.30;
    for (std::size_t k = 0; k < want; ++k) {
        const double frac = frac_lo + (frac_hi - frac_lo) * rng.next_uniform();
        detail_synth::paint_shape(s, spec.classes[order[k]], frac, spec.fg_noise, rng);
    }

    std::size_t fg = 0;
    for (std::uint16_t m : s.mask) fg += m != 0;
    const double fg_frac = static_cast<double>(fg) / static_cast<double>(h * w);
    if (fg_frac < 0.05 || fg_frac > 0.40)
        throw StateError("generator produced foreground fraction " + std::to_string(fg_frac));
    return s;
}

inline std::vector<Sample> gen_task_dataset(const TaskSpec& spec, const std::string& split) {
    std::size_t count = 0;
    if (split == "train")
        count = spec.train_count;
    else if (split == "val")
        count = spec.val_count;
    else if (split == "test")
        count = spec.test_count;
    else
        throw ConfigError("unknown split: " + split);
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sample(spec, split, i));
    return out;
}

// Y^t = Y^{t-1} union C^t with stable insertion order; non-background ids
// must not collide.
inline std::vector<int> accumulate_labels(const std::vector<int>& prev,
                                          const std::vector<int>& next) {
    std::vector<int> out = prev;
    std::set<int> seen(prev.begin(), prev.end());
    for (int c : next) {
        if (c == 0) continue;
        if (seen.count(c))
            throw ConfigError("class id " + std::to_string(c) +
                              " already present in the accumulated label set");
        seen.insert(c);
        out.push_back(c);
    }
    return out;
}

// Built-in task-level profiles: three modalities separated in intensity,
// one foreground class each.
inline TaskSpec builtin_task_profile(int task_id, std::uint64_t seed) {
    TaskSpec spec;
    spec.task_id = task_id;
    spec.seed = seed;
    switch (task_id) {
    case 1:
        spec.name = "synthA";
        spec.bg_mean = 0.15f;
        spec.texture = 1;
        spec.classes = {{1, ShapeKind::Disk, 0.45f}};
        break;
    case 2:
        spec.name = "synthB";
        spec.bg_mean = 0.50f;
        spec.texture = 0;
        spec.classes = {{2, ShapeKind::Rect, 0.78f}};
        break;
    case 3:
        spec.name = "synthC";
        spec.bg_mean = 0.85f;
        spec.texture = 2;
        spec.classes = {{3, ShapeKind::Diamond, 0.55f}};
        break;
    default:
        throw ConfigError("no builtin task profile " + std::to_string(task_id));
    }
    return spec;
}

// Built-in class-level profiles: one modality, four classes in step 1 and a
// fifth in step 2.
inline TaskSpec builtin_class_profile(int step, std::uint64_t seed) {
    TaskSpec spec;
    spec.task_id = step;
    spec.seed = seed;
    spec.bg_mean = 0.10f;
    spec.bg_noise = 0.02f;
    spec.fg_noise = 0.02f;
    if (step == 1) {
        spec.name = "organs4";
        spec.classes = {{1, ShapeKind::Disk, 0.30f},
                        {2, ShapeKind::Rect, 0.45f},
                        {3, ShapeKind::Diamond, 0.60f},
                        {4, ShapeKind::Stripe, 0.75f}};
        spec.shapes_per_image = 1;
    } else if (step == 2) {
        spec.name = "lesion1";
        // brighter than every step-1 class and far from the background
        spec.classes = {{5, ShapeKind::Disk, 0.95f}};
        spec.shapes_per_image = 1;
    } else {
        throw ConfigError("no builtin class profile for step " + std::to_string(step));
    }
    return spec;
}

} // namespace lomoe
