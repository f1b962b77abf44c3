#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "fedopt/errors.hpp"

namespace fedopt {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// SplitMix64 output finalizer (Stafford variant 13).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Domain tags that separate the independent randomness consumers of an
/// experiment. Streams derived under different tags never overlap.
enum class StreamTag : std::uint64_t {
  kData = 1,
  kSplit = 2,
  kPartition = 3,
  kInit = 4,
  kSampling = 5,
  kClient = 6,
  kProbe = 7,
  kProblem = 8,
};

/// Counter-based random stream.
///
/// Output n is a pure function of (key, n): mix64(key + (n + 1) * golden).
/// Children are derived by hashing the parent key with a label, so a stream
/// keyed by (seed, round, client) is the same no matter which thread asks
/// for it or in which order.
class Stream {
 public:
  explicit Stream(std::uint64_t seed) noexcept : key_(detail::mix64(seed ^ 0x6A09E667F3BCC909ULL)) {}

  Stream derive(std::uint64_t label) const noexcept {
    Stream child(0);
    child.key_ = detail::mix64(detail::mix64(key_) ^ detail::mix64(label + detail::kGolden));
    child.counter_ = 0;
    return child;
  }
  Stream derive(StreamTag tag) const noexcept { return derive(static_cast<std::uint64_t>(tag)); }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::kGolden);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1).
  double uniform_open() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "Stream::below: n must be > 0");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (one value per call; the partner is discarded
  /// so the stream position stays a simple function of the call count).
  double normal() noexcept {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// log of a Gamma(shape, 1) variate (Marsaglia-Tsang). Working in log space
  /// keeps tiny shapes (Dirichlet u = 0.1) from underflowing to zero.
  double log_gamma_variate(double shape) {
    require(shape > 0.0, "log_gamma_variate: shape must be > 0");
    if (shape < 1.0) {
      // G(a) = G(a + 1) * U^(1/a)
      return log_gamma_variate(shape + 1.0) + std::log(uniform_open()) / shape;
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
      const double u = uniform_open();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return std::log(d * v);
    }
  }

  /// Symmetric Dirichlet(concentration * 1_k) sample.
  std::vector<double> dirichlet(std::size_t k, double concentration) {
    require(k > 0, "dirichlet: k must be > 0");
    std::vector<double> logs(k);
    double mx = -INFINITY;
    for (auto& l : logs) {
      l = log_gamma_variate(concentration);
      mx = std::max(mx, l);
    }
    double sum = 0.0;
    for (auto& l : logs) {
      l = std::exp(l - mx);
      sum += l;
    }
    for (auto& l : logs) l /= sum;
    return logs;
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace fedopt
