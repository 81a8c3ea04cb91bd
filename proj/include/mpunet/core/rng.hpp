#ifndef MPUNET_CORE_RNG_HPP
#define MPUNET_CORE_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <numbers>

namespace mpunet {

// The standard distributions are implementation-defined, so every draw that
// feeds a reproducible artifact goes through these helpers instead.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n)
{
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = rng();
    while (x >= limit) x = rng();
    return x % n;
}

/// Box-Muller; consumes exactly two 64-bit draws.
inline double normal(Rng& rng)
{
    double u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Derive an independent stream from a base seed and a tag (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag)
{
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

template <typename Range>
void shuffle(Range& r, Rng& rng)
{
    using std::swap;
    for (std::size_t i = r.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_index(rng, i));
        swap(r[i - 1], r[j]);
    }
}

} // namespace mpunet

#endif // MPUNET_CORE_RNG_HPP
