#pragma once

// Deterministic fork-join helper. Work is split into fixed index ranges, so
// results depend only on the inputs, never on scheduling.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace dms {

inline unsigned worker_count() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

// Calls fn(i) for i in [0, n). Each index writes only to its own output slot.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    const unsigned workers = std::min<size_t>(worker_count(), n == 0 ? 1 : n);
    if (workers <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        threads.emplace_back([=, &fn] {
            for (size_t i = w; i < n; i += workers) {
                fn(i);
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
}

// Calls fn(shard, begin, end) over a fixed shard decomposition of [0, n).
// The shard count is a constant so that per-shard partial results (and any
// later ordered combination of them) do not depend on the host's core count.
inline constexpr unsigned kFixedShards = 4;

inline void parallel_shards(size_t n, const std::function<void(unsigned, size_t, size_t)>& fn) {
    const size_t per = (n + kFixedShards - 1) / kFixedShards;
    const unsigned workers = std::min<unsigned>(worker_count(), kFixedShards);
    if (workers <= 1) {
        for (unsigned s = 0; s < kFixedShards; ++s) {
            const size_t begin = std::min(n, s * per);
            const size_t end = std::min(n, (s + 1) * per);
            fn(s, begin, end);
        }
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        threads.emplace_back([=, &fn] {
            for (unsigned s = w; s < kFixedShards; s += workers) {
                const size_t begin = std::min(n, s * per);
                const size_t end = std::min(n, (s + 1) * per);
                fn(s, begin, end);
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }
}

}  // namespace dms
