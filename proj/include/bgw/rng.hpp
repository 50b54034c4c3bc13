#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace bgw {

/// SplitMix64 finalizer; used only to derive well-separated child seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of replication `index` under `master`.
constexpr std::uint64_t child_seed(std::uint64_t master, std::uint64_t index) noexcept {
  return splitmix64(splitmix64(master) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

/// Sequential random stream. Uniforms are built from the top 53 bits of the
/// engine output so draws are identical across standard libraries.
class Stream {
public:
  explicit Stream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  Stream child(std::uint64_t index) const { return Stream(child_seed(seed_, index)); }

  std::uint64_t seed() const noexcept { return seed_; }

  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::uint64_t bits() { return engine_(); }

  /// Standard normal (Marsaglia polar method).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  /// Gamma(shape, 1) by Marsaglia-Tsang, with the shape < 1 boost.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0) * std::pow(u > 0.0 ? u : 0x1.0p-53, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  /// Binomial(n, p): beta splitting on the order statistics of n uniforms
  /// down to a short run of Bernoulli trials.
  std::uint64_t binomial(std::uint64_t n, double p) {
    std::uint64_t k = 0;
    while (n > 64) {
      if (p <= 0.0) return k;
      if (p >= 1.0) return k + n;
      const std::uint64_t i = (n + 1) / 2;
      const double x = beta(static_cast<double>(i), static_cast<double>(n + 1 - i));
      if (x <= p) {
        k += i;
        n -= i;
        p = (p - x) / (1.0 - x);
      } else {
        n = i - 1;
        p /= x;
      }
    }
    for (std::uint64_t t = 0; t < n; ++t)
      if (uniform() < p) ++k;
    return k;
  }

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

} // namespace bgw
