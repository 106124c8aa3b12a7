#pragma once

#include <cmath>
#include <cstdint>

namespace attnalign {

// splitmix64: the determinism backbone of the whole artifact. Every random
// draw anywhere (data generation, weight init, epoch shuffling) comes from
// one of these streams, so runs are reproducible bit for bit.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // value / 2^64, in [0, 1).
  double uniform01() { return static_cast<double>(next()) * 0x1.0p-64; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Bounded draw; the modulo bias is ~n/2^64 and irrelevant at the small n
  // used here.
  int below(int n) { return static_cast<int>(next() % static_cast<uint64_t>(n)); }

  // Standard normal via Box-Muller. Each pair of draws consumes exactly two
  // uniforms; the second sample is cached.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(1.0 - u1));  // 1-u1 in (0,1]
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace attnalign
