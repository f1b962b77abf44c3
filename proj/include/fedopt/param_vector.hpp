#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fedopt/errors.hpp"

namespace fedopt {

/// Flat dense vector of model parameters.
///
/// Every vector-valued quantity exchanged between models, clients and the
/// server (weights, perturbations, dual variables, global updates) is a
/// ParamVector. Binary operations require equal lengths and throw
/// ContractViolation otherwise.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n, double fill = 0.0) : values_(n, fill) {}
  ParamVector(std::initializer_list<double> v) : values_(v) {}
  explicit ParamVector(std::vector<double> v) : values_(std::move(v)) {}

  static ParamVector zeros(std::size_t n) { return ParamVector(n); }

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  ParamVector& operator+=(const ParamVector& o) {
    check_same_size(o, "+=");
    for (std::size_t i = 0; i < size(); ++i) values_[i] += o.values_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    check_same_size(o, "-=");
    for (std::size_t i = 0; i < size(); ++i) values_[i] -= o.values_[i];
    return *this;
  }
  ParamVector& operator*=(double s) noexcept {
    for (double& v : values_) v *= s;
    return *this;
  }

  /// this += a * x
  ParamVector& axpy(double a, const ParamVector& x) {
    check_same_size(x, "axpy");
    for (std::size_t i = 0; i < size(); ++i) values_[i] += a * x.values_[i];
    return *this;
  }

  bool operator==(const ParamVector&) const = default;

  void check_same_size(const ParamVector& o, const char* op) const {
    if (o.size() != size()) {
      throw ContractViolation(std::string("ParamVector ") + op + ": length mismatch (" +
                              std::to_string(size()) + " vs " + std::to_string(o.size()) + ")");
    }
  }

 private:
  std::vector<double> values_;
};

inline ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
inline ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
inline ParamVector operator*(ParamVector a, double s) { return a *= s; }
inline ParamVector operator*(double s, ParamVector a) { return a *= s; }
inline ParamVector operator-(ParamVector a) { return a *= -1.0; }

inline double dot(const ParamVector& a, const ParamVector& b) {
  a.check_same_size(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const ParamVector& v) { return std::sqrt(dot(v, v)); }

inline double norm_inf(const ParamVector& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline bool all_finite(const ParamVector& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Default threshold below which a direction is treated as zero.
inline constexpr double kNormalizeEps = 1e-12;

/// Rescales `v` to Euclidean norm `rho`. Directions with norm <= eps map to
/// the zero vector, so a SAM step at a stationary point degenerates to SGD.
inline ParamVector normalize_to_radius(const ParamVector& v, double rho, double eps = kNormalizeEps) {
  require(rho > 0.0, "normalize_to_radius: rho must be > 0");
  require(eps >= 0.0, "normalize_to_radius: eps must be >= 0");
  const double n = norm2(v);
  if (!(n > eps)) return ParamVector::zeros(v.size());
  return v * (rho / n);
}

}  // namespace fedopt
