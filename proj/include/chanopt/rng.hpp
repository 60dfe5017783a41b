#pragma once

#include <cmath>
#include <cstdint>

namespace chanopt {

// Deterministic 64-bit generator (splitmix64). Used everywhere randomness is
// needed so that runs are reproducible bit-for-bit from a single seed,
// independent of the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1): 53 random mantissa bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller. One value per call; the partner value is
  // discarded to keep the consumption pattern independent of call sites.
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  // Derives an independent stream for a sub-task (e.g. one trial of a run).
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
    Rng r(seed ^ (0x9e3779b97f4a7c15ULL * (salt + 1)));
    return r.next_u64();
  }

 private:
  std::uint64_t state_;
};

}  // namespace chanopt
