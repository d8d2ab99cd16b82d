#pragma once

// Test-side reference implementations, independent of the library's forward
// path: double-precision op mirrors, finite differences, and small
// statistics helpers. Oracle values in the suites are computed (or frozen)
// from these, never from the code under test.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "lomoe/rng.hpp"

namespace oracle {

inline double gelu_ref(double x) { return x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad_ref(double x) {
    const double phi = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return phi + x * pdf;
}

inline double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::vector<double> softmax_ref(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> e(x.size());
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(x[i] - mx);
        s += e[i];
    }
    for (double& v : e) v /= s;
    return e;
}

// c[m x p] = a[m x n] * b[n x p]
inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      std::size_t m, std::size_t n, std::size_t p) {
    std::vector<double> c(m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t j = 0; j < p; ++j) c[i * p + j] += a[i * n + k] * b[k * p + j];
    return c;
}

// Central finite difference of a scalar function.
inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct MeanVar {
    double mean = 0.0;
    double var = 0.0;
};

inline MeanVar mean_var(const std::vector<double>& xs) {
    MeanVar mv;
    for (double v : xs) mv.mean += v;
    mv.mean /= static_cast<double>(xs.size());
    for (double v : xs) mv.var += (v - mv.mean) * (v - mv.mean);
    mv.var /= static_cast<double>(xs.size());
    return mv;
}

// Scalar multi-head attention reference, written without the library's
// tensor machinery. All buffers are row-major doubles.
struct MhaRefWeights {
    std::size_t heads = 1;
    std::size_t d_model = 0;
    std::size_t d_k = 0;
    std::vector<std::vector<double>> wq, wk, wv; // per head, d_model x d_k
    std::vector<double> wo;                      // d_model x d_model
};

inline std::vector<double> mha_ref(const std::vector<double>& x, std::size_t seq,
                                   const MhaRefWeights& w) {
    const std::size_t d = w.d_model, dk = w.d_k;
    std::vector<double> concat(seq * d, 0.0);
    for (std::size_t h = 0; h < w.heads; ++h) {
        auto q = matmul_ref(x, w.wq[h], seq, d, dk);
        auto k = matmul_ref(x, w.wk[h], seq, d, dk);
        auto v = matmul_ref(x, w.wv[h], seq, d, dk);
        for (std::size_t i = 0; i < seq; ++i) {
            std::vector<double> scores(seq, 0.0);
            for (std::size_t j = 0; j < seq; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < dk; ++c) dot += q[i * dk + c] * k[j * dk + c];
                scores[j] = dot / std::sqrt(static_cast<double>(dk));
            }
            auto att = softmax_ref(scores);
            for (std::size_t c = 0; c < dk; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < seq; ++j) acc += att[j] * v[j * dk + c];
                concat[i * d + h * dk + c] = acc;
            }
        }
    }
    return matmul_ref(concat, w.wo, seq, d, d);
}

} // namespace oracle
