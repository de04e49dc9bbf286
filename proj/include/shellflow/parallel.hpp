#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <exception>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

namespace shellflow {

/// Worker count used when a caller passes 0.
inline unsigned default_threads() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1u : hw;
}

/// Evaluates fn(i) for i in [0, count) on up to `threads` workers and
/// returns the results in index order. Results never depend on the worker
/// count. The exception thrown for the smallest failing index is rethrown.
template <typename Fn>
auto parallel_map(std::size_t count, unsigned threads, Fn&& fn)
    -> std::vector<decltype(fn(std::size_t{}))> {
    using Result = decltype(fn(std::size_t{}));
    std::vector<Result> out(count);
    if (threads == 0) threads = default_threads();
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(count, 1)));

    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::size_t error_index = count;
    std::exception_ptr error;

    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                out[i] = fn(i);
            } catch (...) {
                const std::lock_guard lock(error_mutex);
                if (i < error_index) {
                    error_index = i;
                    error = std::current_exception();
                }
            }
        }
    };

    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    if (error) std::rethrow_exception(error);
    return out;
}

/// Pairwise (cascade) summation; the reduction order is fixed by the input
/// order alone.
inline double pairwise_sum(std::span<const double> x) {
    if (x.size() <= 8) {
        double acc = 0.0;
        for (const double v : x) acc += v;
        return acc;
    }
    const std::size_t half = x.size() / 2;
    return pairwise_sum(x.first(half)) + pairwise_sum(x.subspan(half));
}

struct SampleStats {
    double mean = 0.0;
    double std_error = 0.0;  ///< standard error of the mean
    double stddev = 0.0;
    std::size_t count = 0;
};

inline SampleStats sample_stats(std::span<const double> x) {
    SampleStats s;
    s.count = x.size();
    if (x.empty()) return s;
    s.mean = pairwise_sum(x) / static_cast<double>(x.size());
    if (x.size() > 1) {
        std::vector<double> dev(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) dev[i] = (x[i] - s.mean) * (x[i] - s.mean);
        s.stddev = std::sqrt(pairwise_sum(dev) / static_cast<double>(x.size() - 1));
        s.std_error = s.stddev / std::sqrt(static_cast<double>(x.size()));
    }
    return s;
}

}  // namespace shellflow
