#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace linkforge {

// splitmix64 finalizer; also used as the keyed hash for sketches.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. The engine is the standardized mt19937_64 stream and all
// distributions are derived here by hand, so identical seeds give identical
// draws on every platform (std::*_distribution makes no such promise).
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // (0, 1), never exactly 0 or 1; safe under log().
    double uniform_open() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal() {
        double u1 = uniform_open();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double gumbel() { return -std::log(-std::log(uniform_open())); }

    // Unbiased integer in [0, n), n >= 1.
    int uniform_int(int n) {
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 eng_;
};

}  // namespace linkforge
