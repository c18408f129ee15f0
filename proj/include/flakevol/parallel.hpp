#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace flakevol {

// Runs fn(chunk_index, begin, end) over [0, count) split into fixed-size
// chunks. Chunk boundaries depend only on chunk_size, never on the thread
// count, so any reduction done per chunk and merged in chunk order is
// bit-reproducible across --threads settings.
inline void parallel_chunks(std::size_t count, std::size_t chunk_size, int threads,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
    if (count == 0) return;
    if (chunk_size == 0) chunk_size = 1;
    std::size_t n_chunks = (count + chunk_size - 1) / chunk_size;
    auto run_chunk = [&](std::size_t c) {
        std::size_t b = c * chunk_size;
        std::size_t e = b + chunk_size < count ? b + chunk_size : count;
        fn(c, b, e);
    };
    if (threads <= 1 || n_chunks <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::size_t n_workers = std::min<std::size_t>(threads, n_chunks);
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                std::size_t c = next.fetch_add(1);
                if (c >= n_chunks) return;
                run_chunk(c);
            }
        });
    for (auto& t : pool) t.join();
}

}  // namespace flakevol
