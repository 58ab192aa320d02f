#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace atlasfuse::detail {

/// Runs body(i) for i in [begin, end) over contiguous chunks. Each index is
/// visited exactly once, so results written per-index do not depend on the
/// number of workers. The first exception thrown by any worker is rethrown.
template <class Body>
void parallel_for(std::size_t begin, std::size_t end, Body&& body, unsigned workers = 0) {
    if (end <= begin) return;
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t n = end - begin;
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    if (workers <= 1) {
        for (std::size_t i = begin; i < end; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t lo = begin + w * chunk;
        const std::size_t hi = std::min(end, lo + chunk);
        pool.emplace_back([&, lo, hi, w] {
            try {
                for (std::size_t i = lo; i < hi; ++i) body(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace atlasfuse::detail
