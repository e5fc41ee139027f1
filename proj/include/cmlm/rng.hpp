#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <string>

namespace cmlm {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the top 53 bits, so that
/// `uniform01(rng) < 1.0` always holds and results do not depend on the
/// standard library's distribution implementation.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

/// Uniform integer in [0, n). Lemire-style multiply-shift; n must be > 0.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const unsigned __int128 product = static_cast<unsigned __int128>(rng()) * n;
  return static_cast<std::uint64_t>(product >> 64);
}

/// Derives an independent stream from a base seed and a tuple of integer
/// tags (epoch, step, example index, ...). Identical tags give identical
/// streams regardless of what other streams were drawn.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
  auto mix = [](std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  };
  h = mix(h);
  for (std::uint64_t t : tags) h = mix(h ^ (t + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
  return Rng(h);
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream is(state);
  is >> rng;
  return rng;
}

}  // namespace cmlm
