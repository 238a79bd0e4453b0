#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "cyclevar/common.hpp"

namespace cyclevar {

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// splitmix64. Small state, full 64-bit output, and the stream derivation is a
// pure function of (seed, name), so every consumer can be replayed bit for bit.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // Independent named stream: "data", "init", "gumbel", ...
    Rng(uint64_t seed, std::string_view stream)
        : state_(seed ^ (0x9e3779b97f4a7c15ULL * fnv1a64(stream))) {
        next_u64();  // decorrelate nearby seeds
        next_u64();
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0,1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [lo,hi] inclusive.
    int uniform_int(int lo, int hi) {
        require(lo <= hi, "uniform_int: empty range");
        uint64_t n = uint64_t(hi - lo) + 1;
        uint64_t limit = ~uint64_t(0) - (~uint64_t(0) % n);
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + int(v % n);
    }

    // Box-Muller, cosine branch only: two draws per sample, no hidden cache.
    double normal() {
        double u1 = 1.0 - uniform();  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Standard Gumbel(0,1): -log(-log(u)), u kept away from {0,1}.
    double gumbel() {
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        if (u > 1.0 - 1e-16) u = 1.0 - 1e-16;
        return -std::log(-std::log(u));
    }

private:
    uint64_t state_;
};

}  // namespace cyclevar
