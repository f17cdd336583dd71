#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace cascade {

// Deterministic random source. The engine is std::mt19937_64 (its output
// sequence is fixed by the standard) and every distribution below is
// implemented here rather than via std:: distributions, whose streams are
// implementation-defined. Configs name this generator "mt19937_64-boxmuller".
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  // Uniform integer in [0, n). Lemire's multiply-shift reduction.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  // Standard normal via Box-Muller; consumes two uniforms per pair.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent child seed for stream `tag`.
  static std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t x = base + 0x9E3779B97F4A7C15ull * (tag + 1);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
  }

private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace cascade
