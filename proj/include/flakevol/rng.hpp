#pragma once

#include <cmath>
#include <cstdint>

// Counter-based RNG: every draw is a pure function of (seed, stream, counters).
// No hidden state, so results are independent of thread scheduling and
// evaluation order. splitmix64 is the mixing function.

namespace flakevol {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t rng_mix(std::uint64_t a, std::uint64_t b) {
    return splitmix64(splitmix64(a) ^ (0x2545f4914f6cdd1dull * b));
}

inline std::uint64_t rng_key(std::uint64_t seed, std::uint64_t stream,
                             std::uint64_t c0 = 0, std::uint64_t c1 = 0,
                             std::uint64_t c2 = 0) {
    std::uint64_t k = rng_mix(seed, stream);
    k = rng_mix(k, c0);
    k = rng_mix(k, c1);
    return rng_mix(k, c2);
}

// [0, 1) with 53 random bits
inline double rng_u01(std::uint64_t key) {
    return static_cast<double>(key >> 11) * 0x1.0p-53;
}

inline double rng_uniform(std::uint64_t seed, std::uint64_t stream,
                          std::uint64_t c0 = 0, std::uint64_t c1 = 0,
                          std::uint64_t c2 = 0) {
    return rng_u01(rng_key(seed, stream, c0, c1, c2));
}

inline std::uint64_t rng_index(std::uint64_t seed, std::uint64_t stream,
                               std::uint64_t c0, std::uint64_t c1, std::uint64_t n) {
    return rng_key(seed, stream, c0, c1) % n;
}

// Box-Muller on two explicit uniforms; u1 kept away from 0.
inline void gauss_pair(double u1, double u2, double& g0, double& g1) {
    double r = std::sqrt(-2.0 * std::log(u1 > 1e-300 ? u1 : 1e-300));
    g0 = r * std::cos(6.283185307179586 * u2);
    g1 = r * std::sin(6.283185307179586 * u2);
}

inline double rng_gauss(std::uint64_t seed, std::uint64_t stream,
                        std::uint64_t c0 = 0, std::uint64_t c1 = 0,
                        std::uint64_t c2 = 0) {
    double u1 = rng_uniform(seed, stream, c0, c1, 2 * c2);
    double u2 = rng_uniform(seed, stream, c0, c1, 2 * c2 + 1);
    double g0, g1;
    gauss_pair(u1, u2, g0, g1);
    return g0;
}

// Fixed stream ids; new consumers append, never renumber.
namespace rng_stream {
constexpr std::uint64_t init_normal = 1;
constexpr std::uint64_t init_latent = 2;
constexpr std::uint64_t init_density = 3;
constexpr std::uint64_t batch_pixels = 4;
constexpr std::uint64_t smooth_points = 5;
constexpr std::uint64_t smooth_eps = 6;
constexpr std::uint64_t pixel_jitter = 7;
constexpr std::uint64_t preset = 8;
constexpr std::uint64_t init_decoder = 9;
constexpr std::uint64_t test = 100;
}  // namespace rng_stream

}  // namespace flakevol
