#pragma once

#include <cstdint>
#include <initializer_list>
#include <cmath>
#include <random>
#include <utility>

namespace modality {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic child seed from a parent seed and a path of indices
// (run, fold, member, attempt, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = splitmix64(seed);
    for (auto p : path) s = splitmix64(s ^ (p + 0x632be59bd9b4e019ULL));
    return s;
}

// Uniform in [lo, hi). Avoids std::uniform_real_distribution so streams are
// identical across standard library implementations.
inline double uniform(Rng& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform(rng, 0.0, static_cast<double>(n))) % n;
}

inline double normal(Rng& rng) {
    // Box-Muller on the portable uniform source.
    double u1 = uniform(rng, 0.0, 1.0);
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform(rng, 0.0, 1.0);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename It>
void shuffle(It first, It last, Rng& rng) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
        const auto j = uniform_index(rng, i);
        std::swap(first[i - 1], first[j]);
    }
}

}  // namespace modality
