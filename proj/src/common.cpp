#include "linkforge/common.hpp"

#include <fstream>
#include <thread>
#include <vector>

namespace linkforge {

uint64_t fnv1a64(const void* data, size_t len, uint64_t state) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        state ^= p[i];
        state *= 1099511628211ULL;
    }
    return state;
}

uint64_t fnv1a64_str(const std::string& s, uint64_t state) {
    return fnv1a64(s.data(), s.size(), state);
}

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file for checksum: " + path);
    uint64_t state = 14695981039346656037ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        if (got > 0) state = fnv1a64(buf, static_cast<size_t>(got), state);
    }
    return state;
}

void parallel_for(int64_t count, int threads, const std::function<void(int64_t)>& fn) {
    if (count <= 0) return;
    if (threads <= 1 || count < 256) {
        for (int64_t i = 0; i < count; ++i) fn(i);
        return;
    }
    int nthreads = static_cast<int>(std::min<int64_t>(threads, count));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(nthreads));
    int64_t chunk = (count + nthreads - 1) / nthreads;
    for (int t = 0; t < nthreads; ++t) {
        int64_t lo = t * chunk;
        int64_t hi = std::min<int64_t>(count, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace linkforge
