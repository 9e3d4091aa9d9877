#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace psdmix {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based substream seed: a pure function of (seed, stream), so
/// parallel tasks keyed by `stream` draw identical numbers in any schedule.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return derive_seed(derive_seed(seed, a), b);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(derive_seed(seed, stream));
}

/// Uniform on [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform on the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double gamma_variate(Rng& rng, double shape) {
  std::gamma_distribution<double> dist(shape, 1.0);
  return dist(rng);
}

inline double beta_variate(Rng& rng, double a, double b) {
  const double x = gamma_variate(rng, a);
  const double y = gamma_variate(rng, b);
  return x / (x + y);
}

}  // namespace psdmix
