#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lomoe/errors.hpp"
#include "lomoe/tensor.hpp"

namespace lomoe {

// Hard-mask Dice for one class: 2|P n T| / (|P| + |T|). Empty vs empty is 1.
inline double dice_score(const std::vector<int>& pred, const std::vector<int>& truth, int cls) {
    if (pred.size() != truth.size()) throw ShapeError("dice_score: mask sizes differ");
    std::size_t p = 0, t = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool in_p = pred[i] == cls;
        const bool in_t = truth[i] == cls;
        p += in_p;
        t += in_t;
        both += in_p && in_t;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

// Mean Dice over a set of class ids.
inline double macro_dice(const std::vector<int>& pred, const std::vector<int>& truth,
                         const std::vector<int>& classes) {
    if (classes.empty()) throw ContractError("macro_dice: no classes");
    double acc = 0.0;
    for (int c : classes) acc += dice_score(pred, truth, c);
    return acc / static_cast<double>(classes.size());
}

// Maps raw mask ids onto head column indices.
inline std::vector<std::size_t> labels_from_mask(const std::vector<std::uint16_t>& mask,
                                                 const std::vector<int>& columns) {
    std::vector<std::size_t> out(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        bool found = false;
        for (std::size_t c = 0; c < columns.size(); ++c) {
            if (columns[c] == static_cast<int>(mask[i])) {
                out[i] = c;
                found = true;
                break;
            }
        }
        if (!found)
            throw ValidationError("mask id " + std::to_string(mask[i]) +
                                  " not in the declared label set");
    }
    return out;
}

struct SegLossParts {
    Tensor total;
    Tensor cross_entropy;
    Tensor dice_term; // 1 - mean soft Dice
};

// Pixelwise cross-entropy plus (1 - mean soft Dice), equally weighted.
// `probs` must already be normalized per pixel; `labels` hold the target
// column per pixel. Zero exactly when the probabilities are one-hot correct.
inline SegLossParts seg_loss_parts(const Tensor& probs, const std::vector<std::size_t>& labels) {
    if (probs.rank() != 2) throw ShapeError("seg_loss: probs must be pixels x classes");
    const std::size_t n = probs.dim(0), c = probs.dim(1);
    if (labels.size() != n) throw ShapeError("seg_loss: label count mismatch");
    Tensor onehot = Tensor::zeros({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= c) throw ValidationError("seg_loss: label column out of range");
        onehot.mutable_data()[i * c + labels[i]] = 1.0f;
    }
    SegLossParts out;
    out.cross_entropy = scale(sum_all(mul(log_clamped(probs), onehot)),
                              -1.0 / static_cast<double>(n));
    const double eps = 1e-6;
    Tensor eps_vec = Tensor::filled({c}, static_cast<float>(eps));
    Tensor inter = sum_rows(mul(probs, onehot));
    Tensor psum = sum_rows(probs);
    Tensor tsum = sum_rows(onehot);
    Tensor dice = div(add(scale(inter, 2.0), eps_vec), add(add(psum, tsum), eps_vec));
    out.dice_term = sub(Tensor::scalar(1.0f), mean_all(dice));
    out.total = add(out.cross_entropy, out.dice_term);
    return out;
}

inline Tensor seg_loss(const Tensor& probs, const std::vector<std::size_t>& labels) {
    return seg_loss_parts(probs, labels).total;
}

} // namespace lomoe
