#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lomoe/errors.hpp"
#include "lomoe/tensor.hpp"

namespace lomoe {

// Low-rank factor pair. Convention, fixed repo-wide: activations are row
// vectors (batch x d_in), weights are stored d_in x d_out, so a layer
// computes y = x*W0 + (x*B)*A with B: d_in x r (zero at init) and
// A: r x d_out (Gaussian at init). The delta starts exactly at zero.
struct LoraAdapter {
    Tensor b; // d x r
    Tensor a; // r x k
    std::size_t rank = 0;
    int expert_id = 0;
    bool frozen = false;

    void freeze() {
        frozen = true;
        b.set_requires_grad(false);
        a.set_requires_grad(false);
    }

    void unfreeze() {
        frozen = false;
        b.set_requires_grad(true);
        a.set_requires_grad(true);
    }

    std::size_t param_count() const { return b.numel() + a.numel(); }

    std::uint64_t state_checksum() const {
        std::uint64_t h = checksum(b);
        return fnv1a64(&h, sizeof(h), checksum(a));
    }
};

// B = 0, A ~ N(0, 1/r). The zero B side guarantees the fresh adapter is a
// no-op until the first update.
inline LoraAdapter init_adapter(std::size_t d, std::size_t k, std::size_t r, Rng& rng,
                                int expert_id = 0) {
    const std::size_t cap = std::min(d, k) / 2;
    if (r < 1 || r > cap)
        throw ConfigError("adapter rank " + std::to_string(r) + " outside [1, " +
                          std::to_string(cap) + "] for a " + std::to_string(d) + "x" +
                          std::to_string(k) + " layer");
    LoraAdapter ad;
    ad.rank = r;
    ad.expert_id = expert_id;
    ad.b = Tensor::zeros({d, r}, true);
    ad.a = randn({r, k}, rng, std::sqrt(1.0 / static_cast<double>(r)), true);
    ad.frozen = false;
    return ad;
}

// Frozen dense base plus an ordered adapter stack. At most one adapter is
// unfrozen at any time; the base never requires grad.
class LoraLinear {
public:
    LoraLinear() = default;

    explicit LoraLinear(Tensor w0) : w0_(std::move(w0)) {
        if (w0_.rank() != 2) throw ShapeError("LoraLinear: base must be a matrix");
        w0_.set_requires_grad(false);
    }

    static LoraLinear init(std::size_t d, std::size_t k, Rng& rng, double sigma) {
        return LoraLinear(randn({d, k}, rng, sigma, false));
    }

    std::size_t in_dim() const { return w0_.dim(0); }
    std::size_t out_dim() const { return w0_.dim(1); }

    const Tensor& base() const { return w0_; }
    Tensor& base_mutable() { return w0_; }

    const std::vector<LoraAdapter>& adapters() const { return adapters_; }
    std::vector<LoraAdapter>& adapters_mutable() { return adapters_; }
    std::size_t expert_count() const { return adapters_.size(); }

    // Freezes everything already present, then appends a fresh zero-delta
    // adapter as the only unfrozen one.
    LoraAdapter& add_adapter(std::size_t r, Rng& rng, int expert_id) {
        for (LoraAdapter& ad : adapters_) ad.freeze();
        adapters_.push_back(init_adapter(in_dim(), out_dim(), r, rng, expert_id));
        return adapters_.back();
    }

    void freeze_all() {
        for (LoraAdapter& ad : adapters_) ad.freeze();
    }

    // h = x*W0 + sum over adapters 1..upto of (x*B_t)*A_t.
    Tensor forward_prefix(const Tensor& x, std::size_t upto) const {
        if (upto > adapters_.size())
            throw ContractError("forward_prefix: active_upto " + std::to_string(upto) +
                                " exceeds adapter count " + std::to_string(adapters_.size()));
        Tensor h = matmul(x, w0_);
        for (std::size_t t = 0; t < upto; ++t)
            h = add(h, matmul(matmul(x, adapters_[t].b), adapters_[t].a));
        return h;
    }

    // h = x*W0 + (x*B_e)*A_e for the 1-based expert index e.
    Tensor forward_single(const Tensor& x, std::size_t expert) const {
        if (expert < 1 || expert > adapters_.size())
            throw RoutingError("forward_single: unknown expert " + std::to_string(expert));
        const LoraAdapter& ad = adapters_[expert - 1];
        return add(matmul(x, w0_), matmul(matmul(x, ad.b), ad.a));
    }

    // W0 + sum of B_t*A_t for t <= upto, accumulated in double and rounded
    // once per entry.
    Tensor merged(std::size_t upto) const {
        if (upto > adapters_.size())
            throw ContractError("merged: upto exceeds adapter count");
        const std::size_t d = in_dim(), k = out_dim();
        std::vector<double> acc(d * k);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = w0_.data()[i];
        for (std::size_t t = 0; t < upto; ++t) {
            std::vector<float> delta(d * k);
            detail::matmul_raw(adapters_[t].b.data().data(), adapters_[t].a.data().data(),
                               delta.data(), d, adapters_[t].rank, k, false);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += delta[i];
        }
        std::vector<float> out(d * k);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i]);
        return Tensor::from({d, k}, std::move(out));
    }

    std::size_t trainable_params() const {
        std::size_t n = 0;
        for (const LoraAdapter& ad : adapters_)
            if (!ad.frozen && ad.b.requires_grad()) n += ad.param_count();
        return n;
    }

    std::size_t total_params() const {
        std::size_t n = w0_.numel();
        for (const LoraAdapter& ad : adapters_) n += ad.param_count();
        return n;
    }

private:
    Tensor w0_;
    std::vector<LoraAdapter> adapters_;
};

} // namespace lomoe
