#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace stage {

// All randomness in the project flows through this engine so results are
// reproducible across standard library implementations.
using Rng = std::mt19937_64;

// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Uniform integer in [0, n). Slight modulo bias is irrelevant for n << 2^64.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return rng() % n;
}

inline bool bernoulli(Rng& rng, double p) {
  return uniform01(rng) < p;
}

// Standard normal via Box-Muller.
inline double normal01(Rng& rng) {
  constexpr double kTwoPi = 6.283185307179586476925;
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

}  // namespace stage
