#pragma once

#include <cstdint>

#include "kanizsa/common.hpp"

namespace kanizsa {

/// SplitMix64 finalizer (Vigna's public-domain constants). Bijective on u64.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Per-sample seed stream: avalanche mix of (master, split, index).
/// Stateless and order-independent; within one split the map index -> seed
/// is injective (odd-constant multiply composed with bijections).
inline constexpr std::uint64_t derive_seed(std::uint64_t master_seed,
                                           std::uint32_t split_id,
                                           std::uint64_t index) {
    std::uint64_t h = mix64(master_seed ^ (0xd6e8feb86659fd93ULL * (split_id + 1)));
    return mix64(h ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
}

class SplitMix64 {
public:
    explicit constexpr SplitMix64(std::uint64_t seed) : state_(seed) {}

    constexpr std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        return mix64(z);
    }

    /// Uniform double in [0, 1).
    double next_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Uniform integer in [0, n) via multiply-shift (no modulo bias).
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    /// +1 or -1 with equal probability.
    int sign() { return (next() & 1) ? 1 : -1; }

    /// Standard normal via Box-Muller. Uses two draws per call so the output
    /// stream is a pure function of the consumed state.
    double gaussian() {
        double u1 = static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

private:
    std::uint64_t state_;
};

}  // namespace kanizsa
