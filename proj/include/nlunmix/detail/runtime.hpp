#ifndef NLUNMIX_DETAIL_RUNTIME_HPP
#define NLUNMIX_DETAIL_RUNTIME_HPP

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

namespace nlunmix {

enum class LogLevel { quiet = 0, warn = 1, info = 2, debug = 3 };

// Verbosity comes from NLUNMIX_LOG (quiet|warn|info|debug or 0-3); default warn.
inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("NLUNMIX_LOG");
        if (env == nullptr) return LogLevel::warn;
        const std::string v(env);
        if (v == "quiet" || v == "0") return LogLevel::quiet;
        if (v == "info" || v == "2") return LogLevel::info;
        if (v == "debug" || v == "3") return LogLevel::debug;
        return LogLevel::warn;
    }();
    return level;
}

inline void log_message(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) > static_cast<int>(log_level())) return;
    static const char* tags[] = {"", "warn", "info", "debug"};
    std::cerr << "nlunmix[" << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

namespace detail {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is handled
// by exactly one worker, so results written to per-index slots do not depend
// on the thread count.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> failures(workers);
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, w, &fn, &failures] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                failures[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& f : failures)
        if (f) std::rethrow_exception(f);
}

}  // namespace detail
}  // namespace nlunmix

#endif  // NLUNMIX_DETAIL_RUNTIME_HPP
