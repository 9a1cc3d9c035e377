#include "saeg/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>

namespace saeg {

namespace {
std::atomic<int> g_cap{0};

int detect_default() {
    if (const char* env = std::getenv("SAE_GROUPS_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            return n;
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}
} // namespace

int thread_cap() {
    int cap = g_cap.load(std::memory_order_relaxed);
    if (cap <= 0) {
        cap = detect_default();
        g_cap.store(cap, std::memory_order_relaxed);
    }
    return cap;
}

void set_thread_cap(int n) {
    g_cap.store(n > 0 ? n : 0, std::memory_order_relaxed);
}

} // namespace saeg
