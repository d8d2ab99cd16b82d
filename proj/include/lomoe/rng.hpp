#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "lomoe/errors.hpp"

namespace lomoe {

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Acklam's rational approximation of the standard normal inverse CDF.
// Relative error below 1.2e-9 over (0,1); plain arithmetic in the central
// region keeps the stream reproducible.
inline double norm_inv_cdf(double p) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    const double phigh = 1.0 - plow;
    double q, r;
    if (p < plow) {
        q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > phigh) {
        q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    q = p - 0.5;
    r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

} // namespace detail

// Counter-based splittable generator. Output i of a stream is a pure function
// of (seed, stream, i), so independently derived streams never interact and
// the sequence is identical on every platform.
class Rng {
public:
    Rng() : Rng(0, 0) {}
    Rng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    static Rng derive(std::uint64_t master_seed, std::string_view purpose) {
        return Rng(master_seed, fnv1a64(purpose));
    }

    Rng derive(std::string_view purpose) const {
        return Rng(seed_, fnv1a64(purpose.data(), purpose.size(), stream_ ^ kFnvPrime));
    }

    std::uint64_t next_u64() {
        const std::uint64_t key = detail::splitmix64(seed_ ^ (stream_ * 0x9e3779b97f4a7c15ull));
        return detail::splitmix64(key ^ counter_++);
    }

    // Uniform in the open interval (0,1); 53 mantissa bits.
    double next_uniform() {
        const std::uint64_t bits = next_u64() >> 11;
        return (static_cast<double>(bits) + 0.5) * (1.0 / 9007199254740992.0);
    }

    float next_normal(double sigma = 1.0) {
        if (sigma < 0.0) throw ContractError("next_normal: sigma must be >= 0");
        if (sigma == 0.0) return 0.0f;
        return static_cast<float>(detail::norm_inv_cdf(next_uniform()) * sigma);
    }

    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) throw ContractError("next_below: empty range");
        return next_u64() % n;
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

} // namespace lomoe
