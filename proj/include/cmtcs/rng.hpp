#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cmtcs {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based stream derivation: the seed for a stream is a pure function of
/// the root seed and an ordered tuple of integer keys, so every random draw in
/// the library is independent of execution order.
template <class... Keys>
constexpr std::uint64_t derive_seed(std::uint64_t root, Keys... keys) noexcept {
  std::uint64_t h = mix64(root);
  ((h = mix64(h ^ mix64(static_cast<std::uint64_t>(keys) + 0x632be59bd9b4e019ULL))), ...);
  return h;
}

/// Stream tags keep draws for different purposes apart under one root seed.
enum class Stream : std::uint64_t {
  init = 1,
  probes = 2,
  supports = 3,
  task = 4,
  model = 5,
  repeat = 6,
};

/// Uniform draw on the open interval (0, 1), built from the top 53 bits.
inline double uniform_open(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on two open-interval uniforms; identical
/// across standard libraries, unlike std::normal_distribution.
inline double standard_normal(Rng& rng) {
  const double u1 = uniform_open(rng);
  const double u2 = uniform_open(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace cmtcs
