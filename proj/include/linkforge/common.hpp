#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace linkforge {

// Bad values in a config file or on the command line.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or mutually inconsistent input data (files, graphs, shapes).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Failures produced while computing (non-finite values, aborted steps).
struct ComputeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

uint64_t fnv1a64(const void* data, size_t len, uint64_t state = 14695981039346656037ULL);
uint64_t fnv1a64_str(const std::string& s, uint64_t state = 14695981039346656037ULL);
uint64_t fnv1a64_file(const std::string& path);

// Runs fn(i) for i in [0, count). Serial when threads <= 1; otherwise splits
// into contiguous ranges. fn must write only to slots owned by its index so
// results do not depend on the thread count.
void parallel_for(int64_t count, int threads, const std::function<void(int64_t)>& fn);

}  // namespace linkforge
