// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace roimatch {

inline int hardware_threads() {
    unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

// Static block partition of [0, n). Workers write disjoint outputs, so results
// are bitwise independent of scheduling; the partition depends only on n and
// the thread count.
template <typename Fn>
void parallel_for(int64_t n, const Fn& fn, int max_threads = 0) {
    if (n <= 0) return;
    int nt = max_threads > 0 ? max_threads : hardware_threads();
    if (nt > n) nt = static_cast<int>(n);
    if (nt <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nt - 1);
    const int64_t chunk = (n + nt - 1) / nt;
    auto run = [&fn](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) fn(i);
    };
    for (int t = 1; t < nt; ++t) {
        const int64_t lo = t * chunk;
        const int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back(run, lo, hi);
    }
    run(0, std::min(n, chunk));
    for (auto& th : pool) th.join();
}

}  // namespace roimatch
