#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace hsplat {

// Process-wide worker count; CLI --threads sets this. 0 = hardware default.
inline std::atomic<int>& thread_count_slot() {
    static std::atomic<int> n{0};
    return n;
}

inline void set_thread_count(int n) { thread_count_slot().store(n); }

inline int thread_count() {
    int n = thread_count_slot().load();
    if (n > 0) return n;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Static block partition of [0, n). Deterministic work assignment so callers
// can do ordered reductions over worker results irrespective of timing.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    int workers = std::min<std::size_t>(thread_count(), n);
    if (workers <= 1) {
        if (n) body(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::size_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        std::size_t lo = w * chunk;
        std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace hsplat
