#include "qdetect/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace qdetect {

unsigned worker_threads() {
    const char* env = std::getenv("QDETECT_THREADS");
    if (env == nullptr || *env == '\0') return 0;
    try {
        const long v = std::stol(env);
        return v > 0 ? static_cast<unsigned>(v) : 0u;
    } catch (...) {
        return 0;
    }
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    const unsigned threads = worker_threads();
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace qdetect
