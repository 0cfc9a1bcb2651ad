#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

#include "coseg/common.hpp"

namespace coseg {

// Deterministic splitmix64 generator with explicit stream derivation.
// All randomness in the project flows through this type so that a
// (seed, stream) pair fully determines every draw, independent of the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x5851f42d4c957f2dULL)) {}

  // Sub-stream derived from (seed, stream), e.g. per-sample generators.
  Rng(uint64_t seed, uint64_t stream) : state_(mix(mix(seed) ^ mix(stream + 0x9e3779b97f4a7c15ULL))) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw Error("Rng::uniform_int: empty range");
    uint64_t range = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    // rejection sampling keeps the draw unbiased
    uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<int>(lo + static_cast<int64_t>(x % range));
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Box-Muller with cached second value.
  double normal(double mu = 0.0, double sigma = 1.0) {
    if (has_cached_) {
      has_cached_ = false;
      return mu + sigma * cached_;
    }
    double u1, u2;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return mu + sigma * r * std::cos(a);
  }

  template <class It>
  void shuffle(It first, It last) {
    auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      auto j = uniform_int(0, static_cast<int>(i));
      std::swap(first[i], first[j]);
    }
  }

  // Fresh seed for a derived generator.
  uint64_t fork_seed() { return next_u64(); }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace coseg
