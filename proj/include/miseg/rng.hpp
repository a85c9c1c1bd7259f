#pragma once

#include <cmath>
#include <cstdint>

#include "miseg/common.hpp"

namespace miseg {

// Counter-based random number generation. Every draw is a pure function of
// (stream key, counter), and every stream key is a pure function of
// (seed, tag, index). Results therefore do not depend on the order in which
// independent streams are consumed, which is what makes whole runs replayable
// from a single seed.

namespace rng_detail {

inline uint64_t mix64(uint64_t z) {
  // splitmix64 finalizer
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix2(uint64_t a, uint64_t b) {
  return mix64(a ^ (0x9e3779b97f4a7c15ull + mix64(b)));
}

}  // namespace rng_detail

// Fixed stream tags. New consumers get new tags; values are frozen because
// they are part of the reproducibility contract.
namespace streams {
inline constexpr uint64_t kNetInit = 1;
inline constexpr uint64_t kPhantom = 2;
inline constexpr uint64_t kScanPick = 3;
inline constexpr uint64_t kPatch = 4;
inline constexpr uint64_t kMixup = 5;
inline constexpr uint64_t kAttackNoise = 6;
inline constexpr uint64_t kEvalNoise = 7;
}  // namespace streams

class RngStream {
 public:
  RngStream(uint64_t seed, uint64_t tag, uint64_t index)
      : key_(rng_detail::mix2(rng_detail::mix2(seed, tag), index)) {}

  explicit RngStream(uint64_t raw_key) : key_(raw_key) {}

  // Independent child stream; the parent counter is unaffected.
  RngStream substream(uint64_t tag) const {
    return RngStream(rng_detail::mix2(key_ ^ 0xa5a5a5a5a5a5a5a5ull, tag));
  }

  uint64_t next_u64() { return rng_detail::mix2(key_, counter_++); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // (0, 1), never exactly 0 or 1
  double uniform_open() { return (double(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive on both ends.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw ValidationError("uniform_int: empty range");
    uint64_t span = uint64_t(hi - lo) + 1;
    uint64_t v = uint64_t((__uint128_t(next_u64()) * span) >> 64);
    return lo + int64_t(v);
  }

  // Standard normal via Box-Muller; consumes two counters per call.
  double normal() {
    double u1 = uniform_open();
    double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925287;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Marsaglia-Tsang, with the alpha < 1 boost.
  double gamma(double alpha) {
    if (alpha <= 0.0) throw ValidationError("gamma: alpha must be positive");
    if (alpha < 1.0) {
      double boosted = gamma(alpha + 1.0);
      return boosted * std::pow(uniform_open(), 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / (3.0 * std::sqrt(d));
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    const double s = x + y;
    return s > 0.0 ? x / s : 0.5;
  }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace miseg
