#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fueterlab {

// Worker count: explicit request, else FUETERLAB_THREADS, else the hardware.
inline int thread_budget(int requested = 0) {
    if (requested > 0) return requested;
    if (const char* e = std::getenv("FUETERLAB_THREADS")) {
        int v = std::atoi(e);
        if (v > 0) return v;
    }
    unsigned h = std::thread::hardware_concurrency();
    return h ? static_cast<int>(h) : 1;
}

// f(i) for i in [0, n). Results must not depend on scheduling; the first
// exception thrown by any task is rethrown.
template <class F>
void parallel_for(std::size_t n, F&& f, int threads = 0) {
    int T = std::min<int>(thread_budget(threads), static_cast<int>(n));
    if (T <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex mu;
    auto work = [&] {
        for (;;) {
            std::size_t i = next++;
            if (i >= n) return;
            try {
                f(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu);
                if (!err) err = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < T; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace fueterlab
