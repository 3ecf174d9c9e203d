#pragma once

#include <algorithm>
#include <thread>
#include <vector>

namespace kanizsa {

/// Runs fn(begin, end, chunk_index) over `threads` contiguous partitions of
/// [0, n). Partition boundaries depend only on (n, threads), so any
/// per-chunk results combined in chunk order are reproducible.
template <typename Fn>
void parallel_chunks(int n, int threads, Fn&& fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        if (n > 0) fn(0, n, 0);
        return;
    }
    int base = n / threads;
    int rem = n % threads;
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    int begin = 0;
    for (int t = 0; t < threads; ++t) {
        int len = base + (t < rem ? 1 : 0);
        int end = begin + len;
        if (t + 1 == threads) {
            fn(begin, end, t);  // run the last chunk on the calling thread
        } else {
            pool.emplace_back([&fn, begin, end, t] { fn(begin, end, t); });
        }
        begin = end;
    }
    for (auto& th : pool) th.join();
}

}  // namespace kanizsa
