#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "lomoe/errors.hpp"
#include "lomoe/rng.hpp"
#include "lomoe/threading.hpp"

namespace lomoe {

// Reverse-mode autodiff over dense row-major float32 tensors. Matrix
// reductions accumulate in double; transcendental ops evaluate in double and
// store float32. Every op validates that its output is finite.

class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<float> data;
    bool requires_grad = false;
    bool leaf = true;
    bool consumed = false;
    std::vector<float> grad; // empty means absent
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backward_fn;

    std::size_t numel() const { return data.size(); }

    std::vector<float>& grad_accum() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
        return grad;
    }
};

class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {}
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0f, requires_grad);
    }

    static Tensor filled(std::vector<std::size_t> shape, float value, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data.assign(count(impl->shape), value);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<float> values,
                       bool requires_grad = false) {
        if (count(shape) != values.size())
            throw ShapeError("from: " + std::to_string(values.size()) + " values for shape of " +
                             std::to_string(count(shape)));
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        impl->requires_grad = requires_grad;
        for (float v : impl->data)
            if (!std::isfinite(v)) throw NumericError("from: non-finite input value");
        return Tensor(std::move(impl));
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->numel(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }

    const std::vector<float>& data() const { return impl_->data; }
    std::vector<float>& mutable_data() { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<float>& grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    float item() const {
        if (numel() != 1) throw ContractError("item: tensor is not scalar");
        return impl_->data[0];
    }

    float at(std::size_t i) const { return impl_->data.at(i); }
    float at(std::size_t r, std::size_t c) const {
        if (rank() != 2) throw ShapeError("at(r,c) on non-matrix");
        return impl_->data.at(r * impl_->shape[1] + c);
    }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

    bool same_shape(const Tensor& other) const { return impl_->shape == other.impl_->shape; }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }

private:
    std::shared_ptr<TensorImpl> impl_;
};

inline std::uint64_t checksum(const Tensor& t) {
    return fnv1a64(t.data().data(), t.data().size() * sizeof(float));
}

namespace detail {

inline void check_finite(const std::vector<float>& v, const char* op) {
    for (float x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite output");
}

inline bool track(std::initializer_list<const Tensor*> inputs) {
    if (!GradMode::enabled()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_result(std::vector<std::size_t> shape, std::vector<float> values,
                          const char* op) {
    check_finite(values, op);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

inline void attach(Tensor& out, std::initializer_list<Tensor> parents,
                   std::function<void()> fn) {
    auto impl = out.impl();
    impl->requires_grad = true;
    impl->leaf = false;
    for (const Tensor& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(fn);
}

// C[m x p] += or = A[m x n] * B[n x p], double accumulators, row-parallel.
inline void matmul_raw(const float* a, const float* b, float* c, std::size_t m, std::size_t n,
                       std::size_t p, bool accumulate) {
    parallel_for(
        m,
        [&](std::size_t i) {
            std::vector<double> acc(p, 0.0);
            const float* arow = a + i * n;
            for (std::size_t k = 0; k < n; ++k) {
                const double aik = static_cast<double>(arow[k]);
                if (aik == 0.0) continue;
                const float* brow = b + k * p;
                for (std::size_t j = 0; j < p; ++j) acc[j] += aik * static_cast<double>(brow[j]);
            }
            float* crow = c + i * p;
            for (std::size_t j = 0; j < p; ++j) {
                const float v = static_cast<float>(acc[j]);
                crow[j] = accumulate ? crow[j] + v : v;
            }
        },
        8);
}

inline void transpose_raw(const float* a, float* out, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("add: operand shapes differ");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    Tensor r = detail::make_result(a.shape(), std::move(out), "add");
    if (detail::track({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        detail::attach(r, {a, b}, [ai, bi, ri] {
            const auto& g = ri->grad;
            if (ai->requires_grad) {
                auto& ga = ai->grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("sub: operand shapes differ");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    Tensor r = detail::make_result(a.shape(), std::move(out), "sub");
    if (detail::track({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        detail::attach(r, {a, b}, [ai, bi, ri] {
            const auto& g = ri->grad;
            if (ai->requires_grad) {
                auto& ga = ai->grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("mul: operand shapes differ");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    Tensor r = detail::make_result(a.shape(), std::move(out), "mul");
    if (detail::track({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        detail::attach(r, {a, b}, [ai, bi, ri] {
            const auto& g = ri->grad;
            if (ai->requires_grad) {
                auto& ga = ai->grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
            }
        });
    }
    return r;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("div: operand shapes differ");
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    Tensor r = detail::make_result(a.shape(), std::move(out), "div");
    if (detail::track({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        detail::attach(r, {a, b}, [ai, bi, ri] {
            const auto& g = ri->grad;
            if (ai->requires_grad) {
                auto& ga = ai->grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad_accum();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const float bv = bi->data[i];
                    gb[i] -= g[i] * ai->data[i] / (bv * bv);
                }
            }
        });
    }
    return r;
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(static_cast<double>(a.data()[i]) * s);
    Tensor r = detail::make_result(a.shape(), std::move(out), "scale");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri, s] {
            auto& ga = ai->grad_accum();
            for (std::size_t i = 0; i < ri->grad.size(); ++i)
                ga[i] += static_cast<float>(static_cast<double>(ri->grad[i]) * s);
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be matrices");
    const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
    if (b.dim(0) != n)
        throw ShapeError("matmul: inner dimensions " + std::to_string(n) + " vs " +
                         std::to_string(b.dim(0)));
    std::vector<float> out(m * p);
    detail::matmul_raw(a.data().data(), b.data().data(), out.data(), m, n, p, false);
    Tensor r = detail::make_result({m, p}, std::move(out), "matmul");
    if (detail::track({&a, &b})) {
        auto ai = a.impl(), bi = b.impl(), ri = r.impl();
        detail::attach(r, {a, b}, [ai, bi, ri, m, n, p] {
            const auto& g = ri->grad;
            if (ai->requires_grad) {
                // dA = G * B^T
                std::vector<float> bt(n * p);
                detail::transpose_raw(bi->data.data(), bt.data(), n, p);
                detail::matmul_raw(g.data(), bt.data(), ai->grad_accum().data(), m, p, n, true);
            }
            if (bi->requires_grad) {
                // dB = A^T * G
                std::vector<float> at(m * n);
                detail::transpose_raw(ai->data.data(), at.data(), m, n);
                detail::matmul_raw(at.data(), g.data(), bi->grad_accum().data(), n, m, p, true);
            }
        });
    }
    return r;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: operand must be a matrix");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<float> out(m * n);
    detail::transpose_raw(a.data().data(), out.data(), m, n);
    Tensor r = detail::make_result({n, m}, std::move(out), "transpose");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri, m, n] {
            auto& ga = ai->grad_accum();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ga[j * n + i] += ri->grad[i * m + j];
        });
    }
    return r;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t m = parts[0].dim(0);
    std::size_t total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != 2 || t.dim(0) != m) throw ShapeError("concat_cols: row count mismatch");
        total += t.dim(1);
    }
    std::vector<float> out(m * total);
    std::size_t off = 0;
    for (const Tensor& t : parts) {
        const std::size_t w = t.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(out.data() + i * total + off, t.data().data() + i * w, w * sizeof(float));
        off += w;
    }
    Tensor r = detail::make_result({m, total}, std::move(out), "concat_cols");
    bool need = false;
    if (GradMode::enabled())
        for (const Tensor& t : parts)
            if (t.requires_grad()) need = true;
    if (need) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        impls.reserve(parts.size());
        for (const Tensor& t : parts) impls.push_back(t.impl());
        auto ri = r.impl();
        ri->requires_grad = true;
        ri->leaf = false;
        ri->parents = impls;
        ri->backward_fn = [impls, ri, m, total] {
            std::size_t off2 = 0;
            for (auto& pi : impls) {
                const std::size_t w = pi->shape[1];
                if (pi->requires_grad) {
                    auto& gp = pi->grad_accum();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            gp[i * w + j] += ri->grad[i * total + off2 + j];
                }
                off2 += w;
            }
        };
    }
    return r;
}

// Copying reshape; gradient passes through elementwise.
inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (Tensor::count(shape) != a.numel()) throw ShapeError("reshape: element count mismatch");
    std::vector<float> out(a.data());
    Tensor r = detail::make_result(std::move(shape), std::move(out), "reshape");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri] {
            auto& ga = ai->grad_accum();
            for (std::size_t i = 0; i < ri->grad.size(); ++i) ga[i] += ri->grad[i];
        });
    }
    return r;
}

// Scales row i of x by s[i].
inline Tensor row_scale(const Tensor& x, const Tensor& s) {
    if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0))
        throw ShapeError("row_scale: need x[m x n], s[m]");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<float> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * s.data()[i];
    Tensor r = detail::make_result(x.shape(), std::move(out), "row_scale");
    if (detail::track({&x, &s})) {
        auto xi = x.impl(), si = s.impl(), ri = r.impl();
        detail::attach(r, {x, s}, [xi, si, ri, m, n] {
            const auto& g = ri->grad;
            if (xi->requires_grad) {
                auto& gx = xi->grad_accum();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * si->data[i];
            }
            if (si->requires_grad) {
                auto& gs = si->grad_accum();
                for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += static_cast<double>(g[i * n + j]) * xi->data[i * n + j];
                    gs[i] += static_cast<float>(acc);
                }
            }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// nonlinearities

// Exact GeLU: x * Phi(x) with the erf-based standard normal CDF.
inline Tensor gelu(const Tensor& a) {
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = static_cast<float>(x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))));
    }
    Tensor r = detail::make_result(a.shape(), std::move(out), "gelu");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri] {
            auto& ga = ai->grad_accum();
            for (std::size_t i = 0; i < ri->grad.size(); ++i) {
                const double x = ai->data[i];
                const double phi = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
                const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
                ga[i] += static_cast<float>(static_cast<double>(ri->grad[i]) * (phi + x * pdf));
            }
        });
    }
    return r;
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = static_cast<float>(1.0 / (1.0 + std::exp(-x)));
    }
    Tensor r = detail::make_result(a.shape(), std::move(out), "sigmoid");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri] {
            auto& ga = ai->grad_accum();
            for (std::size_t i = 0; i < ri->grad.size(); ++i) {
                const double y = ri->data[i];
                ga[i] += static_cast<float>(static_cast<double>(ri->grad[i]) * y * (1.0 - y));
            }
        });
    }
    return r;
}

// log(max(x, floor)); gradient is 1/x where x > floor and 0 in the clamped
// region. Keeps cross-entropy finite for vanishing probabilities.
inline Tensor log_clamped(const Tensor& a, double floor = 1e-12) {
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(std::log(std::max(static_cast<double>(a.data()[i]), floor)));
    Tensor r = detail::make_result(a.shape(), std::move(out), "log_clamped");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri, floor] {
            auto& ga = ai->grad_accum();
            for (std::size_t i = 0; i < ri->grad.size(); ++i) {
                const double x = ai->data[i];
                if (x > floor)
                    ga[i] += static_cast<float>(static_cast<double>(ri->grad[i]) / x);
            }
        });
    }
    return r;
}

namespace detail {

struct AxisSplit {
    std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const std::vector<std::size_t>& shape, int axis) {
    const int rank = static_cast<int>(shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ContractError("axis out of range");
    AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
    return s;
}

} // namespace detail

// Max-subtracted softmax along `axis`, exp and normalization in double.
inline Tensor softmax(const Tensor& a, int axis = -1) {
    const auto s = detail::split_axis(a.shape(), axis);
    std::vector<float> out(a.numel());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.len; ++k)
                mx = std::max(mx, static_cast<double>(a.data()[base + k * s.inner]));
            double sum = 0.0;
            std::vector<double> e(s.len);
            for (std::size_t k = 0; k < s.len; ++k) {
                e[k] = std::exp(static_cast<double>(a.data()[base + k * s.inner]) - mx);
                sum += e[k];
            }
            for (std::size_t k = 0; k < s.len; ++k)
                out[base + k * s.inner] = static_cast<float>(e[k] / sum);
        }
    }
    Tensor r = detail::make_result(a.shape(), std::move(out), "softmax");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri, s] {
            auto& ga = ai->grad_accum();
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t in = 0; in < s.inner; ++in) {
                    const std::size_t base = o * s.len * s.inner + in;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < s.len; ++k) {
                        const std::size_t idx = base + k * s.inner;
                        dot += static_cast<double>(ri->grad[idx]) * ri->data[idx];
                    }
                    for (std::size_t k = 0; k < s.len; ++k) {
                        const std::size_t idx = base + k * s.inner;
                        ga[idx] += static_cast<float>(
                            static_cast<double>(ri->data[idx]) *
                            (static_cast<double>(ri->grad[idx]) - dot));
                    }
                }
            }
        });
    }
    return r;
}

// Non-affine layer norm over the last axis.
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
    if (a.rank() < 1) throw ShapeError("layer_norm: rank 0");
    const auto s = detail::split_axis(a.shape(), -1);
    std::vector<float> out(a.numel());
    for (std::size_t o = 0; o < s.outer; ++o) {
        const std::size_t base = o * s.len;
        double mean = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) mean += a.data()[base + k];
        mean /= static_cast<double>(s.len);
        double var = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) {
            const double d = a.data()[base + k] - mean;
            var += d * d;
        }
        var /= static_cast<double>(s.len);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t k = 0; k < s.len; ++k)
            out[base + k] = static_cast<float>((a.data()[base + k] - mean) * inv);
    }
    Tensor r = detail::make_result(a.shape(), std::move(out), "layer_norm");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri, s, eps] {
            auto& ga = ai->grad_accum();
            for (std::size_t o = 0; o < s.outer; ++o) {
                const std::size_t base = o * s.len;
                double mean = 0.0;
                for (std::size_t k = 0; k < s.len; ++k) mean += ai->data[base + k];
                mean /= static_cast<double>(s.len);
                double var = 0.0;
                for (std::size_t k = 0; k < s.len; ++k) {
                    const double d = ai->data[base + k] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(s.len);
                const double inv = 1.0 / std::sqrt(var + eps);
                double gmean = 0.0, gydot = 0.0;
                for (std::size_t k = 0; k < s.len; ++k) {
                    gmean += ri->grad[base + k];
                    gydot += static_cast<double>(ri->grad[base + k]) * ri->data[base + k];
                }
                gmean /= static_cast<double>(s.len);
                gydot /= static_cast<double>(s.len);
                for (std::size_t k = 0; k < s.len; ++k) {
                    const double y = ri->data[base + k];
                    ga[base + k] += static_cast<float>(
                        inv * (static_cast<double>(ri->grad[base + k]) - gmean - y * gydot));
                }
            }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    Tensor r = detail::make_result({1}, {static_cast<float>(acc)}, "sum_all");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri] {
            auto& ga = ai->grad_accum();
            for (float& g : ga) g += ri->grad[0];
        });
    }
    return r;
}

inline Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw ContractError("mean_all: empty tensor");
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    const double n = static_cast<double>(a.numel());
    Tensor r = detail::make_result({1}, {static_cast<float>(acc / n)}, "mean_all");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri, n] {
            auto& ga = ai->grad_accum();
            const float g = static_cast<float>(static_cast<double>(ri->grad[0]) / n);
            for (float& v : ga) v += g;
        });
    }
    return r;
}

// Column sums of a matrix: [m x n] -> [n].
inline Tensor sum_rows(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("sum_rows: operand must be a matrix");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> acc(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) acc[j] += a.data()[i * n + j];
    std::vector<float> out(n);
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<float>(acc[j]);
    Tensor r = detail::make_result({n}, std::move(out), "sum_rows");
    if (detail::track({&a})) {
        auto ai = a.impl();
        auto ri = r.impl();
        detail::attach(r, {a}, [ai, ri, m, n] {
            auto& ga = ai->grad_accum();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += ri->grad[j];
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// bilinear upsampling of a token grid to the pixel grid

// x holds gh*gw rows (row-major grid order) of c channels; result holds
// out_h*out_w rows. Sampling uses half-pixel centers with edge clamping.
inline Tensor bilinear_upsample(const Tensor& x, std::size_t gh, std::size_t gw, std::size_t out_h,
                                std::size_t out_w) {
    if (x.rank() != 2 || x.dim(0) != gh * gw) throw ShapeError("bilinear_upsample: bad token grid");
    const std::size_t c = x.dim(1);
    struct Tap {
        std::size_t idx[4];
        float w[4];
    };
    std::vector<Tap> taps(out_h * out_w);
    for (std::size_t py = 0; py < out_h; ++py) {
        double fy = (static_cast<double>(py) + 0.5) * static_cast<double>(gh) /
                        static_cast<double>(out_h) -
                    0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(gh - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, gh - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t px = 0; px < out_w; ++px) {
            double fx = (static_cast<double>(px) + 0.5) * static_cast<double>(gw) /
                            static_cast<double>(out_w) -
                        0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(gw - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, gw - 1);
            const double wx = fx - static_cast<double>(x0);
            Tap& t = taps[py * out_w + px];
            t.idx[0] = y0 * gw + x0;
            t.idx[1] = y0 * gw + x1;
            t.idx[2] = y1 * gw + x0;
            t.idx[3] = y1 * gw + x1;
            t.w[0] = static_cast<float>((1.0 - wy) * (1.0 - wx));
            t.w[1] = static_cast<float>((1.0 - wy) * wx);
            t.w[2] = static_cast<float>(wy * (1.0 - wx));
            t.w[3] = static_cast<float>(wy * wx);
        }
    }
    std::vector<float> out(out_h * out_w * c);
    for (std::size_t p = 0; p < taps.size(); ++p) {
        const Tap& t = taps[p];
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k)
                acc += static_cast<double>(t.w[k]) * x.data()[t.idx[k] * c + ch];
            out[p * c + ch] = static_cast<float>(acc);
        }
    }
    Tensor r = detail::make_result({out_h * out_w, c}, std::move(out), "bilinear_upsample");
    if (detail::track({&x})) {
        auto xi = x.impl();
        auto ri = r.impl();
        detail::attach(r, {x}, [xi, ri, taps, c] {
            auto& gx = xi->grad_accum();
            for (std::size_t p = 0; p < taps.size(); ++p) {
                const Tap& t = taps[p];
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const float g = ri->grad[p * c + ch];
                    for (int k = 0; k < 4; ++k) gx[t.idx[k] * c + ch] += t.w[k] * g;
                }
            }
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// random init

// i.i.d. N(0, sigma^2) via the deterministic counter stream, row-major fill.
inline Tensor randn(std::vector<std::size_t> shape, Rng& rng, double sigma,
                    bool requires_grad = false) {
    if (sigma < 0.0) throw ContractError("randn: sigma must be >= 0");
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (float& v : t.mutable_data()) v = rng.next_normal(sigma);
    return t;
}

// ---------------------------------------------------------------------------
// reverse pass

// Backpropagates d loss / d leaf into every reachable requires_grad leaf,
// then clears the tape. Gradients accumulate across calls until zero_grad.
inline void backward(const Tensor& loss) {
    auto root = loss.impl();
    if (root->numel() != 1) throw ContractError("backward: loss must be scalar");
    if (root->consumed) throw ContractError("backward: tape already cleared");
    if (!root->requires_grad) throw ContractError("backward: loss does not require grad");

    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* parent = node->parents[next].get();
            ++next;
            if (parent->requires_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_accum()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
    for (TensorImpl* node : order) {
        node->backward_fn = nullptr;
        node->parents.clear();
        if (!node->leaf) node->grad.clear();
    }
    root->consumed = true;
}

} // namespace lomoe
