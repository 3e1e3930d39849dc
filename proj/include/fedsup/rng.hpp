#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace fedsup {

// Counter-based pseudo-random stream. Every draw is a pure function of
// (seed, position), so identical (seed, position) pairs reproduce the same
// sequence on any platform and under any thread schedule. Distribution
// transforms (uniform, normal, gamma) are hand-rolled for the same reason:
// the std::* distributions are implementation-defined.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(uint64_t seed) : seed_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t position() const { return counter_; }

  uint64_t next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  // Derives an independent stream keyed by this stream's seed and the tags.
  RngStream fork(std::initializer_list<uint64_t> tags) const {
    uint64_t s = seed_;
    for (uint64_t t : tags) s = mix(s ^ mix(t + 0xD1B54A32D192ED03ULL));
    return RngStream(s);
  }

  // Uniform in [0, 1), 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; consumes exactly two draws.
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Gamma(alpha, 1) via Marsaglia-Tsang, with the alpha < 1 boost.
  double gamma(double alpha) {
    if (alpha < 1.0) {
      double g = gamma(alpha + 1.0);
      double u = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
      return g * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Fisher-Yates shuffle of [first, first+n).
  template <typename It>
  void shuffle(It first, uint64_t n) {
    for (uint64_t i = n; i > 1; --i) {
      uint64_t j = uniform_int(i);
      std::swap(*(first + (i - 1)), *(first + j));
    }
  }

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace fedsup
