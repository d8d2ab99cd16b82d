#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace lomoe {

// Worker cap: LOMOE_THREADS env var wins, otherwise min(hardware, 4).
inline std::size_t max_threads() {
    static const std::size_t cached = [] {
        if (const char* env = std::getenv("LOMOE_THREADS")) {
            const long v = std::strtol(env, nullptr, 10);
            if (v >= 1) return static_cast<std::size_t>(v);
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return static_cast<std::size_t>(std::min(hw == 0 ? 1u : hw, 4u));
    }();
    return cached;
}

// Splits [0, n) into contiguous chunks, one per worker. Each index is
// processed by exactly one worker and the work per index is independent,
// so results do not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t grain = 1) {
    const std::size_t want = n / std::max<std::size_t>(grain, 1);
    const std::size_t workers = std::min(max_threads(), std::max<std::size_t>(want, 1));
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace lomoe
