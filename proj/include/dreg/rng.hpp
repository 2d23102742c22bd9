#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "dreg/geometry.hpp"

namespace dreg {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; derives independent child seeds from (seed, stream).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline double uniform(Rng& rng, double lo, double hi) {
  // 53 random bits; avoids implementation-defined distribution algorithms.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

// Direction uniform on the unit sphere, magnitude uniform in [0, max_norm].
inline Vec3 random_translation(Rng& rng, double max_norm) {
  const double z = uniform(rng, -1.0, 1.0);
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  const double mag = uniform(rng, 0.0, max_norm);
  return Vec3{r * std::cos(phi), r * std::sin(phi), z} * mag;
}

}  // namespace dreg
