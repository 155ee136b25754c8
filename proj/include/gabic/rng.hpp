#pragma once

#include <cmath>
#include <cstdint>

namespace gabic {

// Counter-based deterministic generator. Every draw is a pure integer mix of
// (seed, counter), so a given (seed, counter) pair yields the same stream on
// any platform and the state can be serialized as two 64-bit words.
struct Rng {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  explicit Rng(std::uint64_t s = 0, std::uint64_t c = 0) : seed(s), counter(c) {}

  std::uint64_t next_u64() {
    std::uint64_t z = seed + (++counter) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Lemire's multiply-shift; slight bias of
  // O(n / 2^64) is irrelevant here and keeps the draw to one counter step.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal, Box-Muller. Consumes exactly two counter steps.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  Rng fork(std::uint64_t stream) const {
    Rng r(seed ^ (0xD1B54A32D192ED03ULL * (stream + 1)), 0);
    return r;
  }
};

}  // namespace gabic
