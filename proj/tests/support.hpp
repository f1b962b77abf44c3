// Test helpers and independent reference implementations.
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "fedopt/data.hpp"
#include "fedopt/model.hpp"
#include "fedopt/param_vector.hpp"
#include "fedopt/rng.hpp"

namespace testsupport {

using fedopt::Batch;
using fedopt::ParamVector;
using fedopt::Stream;

inline ParamVector vec(std::initializer_list<double> v) { return ParamVector(std::vector<double>(v)); }

inline ParamVector gaussian(Stream& rng, std::size_t n, double scale = 1.0) {
  ParamVector v = ParamVector::zeros(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

inline Batch random_batch(Stream& rng, std::size_t n, std::size_t dim, std::size_t classes) {
  Batch b;
  b.dim = dim;
  std::vector<double> x(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : x) v = rng.normal();
    b.push_back(x, static_cast<int>(rng.below(classes)));
  }
  return b;
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

/// Scalar re-implementation of the tanh MLP's mean cross-entropy, written
/// without sharing any code with the library.
inline double mlp_loss_reference(const std::vector<std::size_t>& widths, const ParamVector& p, const Batch& b) {
  double total = 0.0;
  for (std::size_t s = 0; s < b.size(); ++s) {
    std::vector<double> a(b.features.begin() + static_cast<long>(s * b.dim),
                          b.features.begin() + static_cast<long>((s + 1) * b.dim));
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const std::size_t in = widths[l], out = widths[l + 1];
      std::vector<double> z(out);
      for (std::size_t o = 0; o < out; ++o) {
        double acc = p[off + out * in + o];
        for (std::size_t i = 0; i < in; ++i) acc += p[off + o * in + i] * a[i];
        z[o] = (l + 2 < widths.size()) ? std::tanh(acc) : acc;
      }
      off += out * in + out;
      a = z;
    }
    double mx = a[0];
    for (double v : a) mx = v > mx ? v : mx;
    double se = 0.0;
    for (double v : a) se += std::exp(v - mx);
    total += (mx + std::log(se)) - a[static_cast<std::size_t>(b.labels[s])];
  }
  return total / static_cast<double>(b.size());
}

/// Minimizer of sum_i 1/2 (x - c_i)^T A_i (x - c_i) via the normal equations.
inline Eigen::VectorXd quadratic_optimum(const std::vector<fedopt::ModelSpec>& models) {
  const auto& first = std::get<fedopt::QuadraticModel>(models.front().kind());
  const auto d = static_cast<Eigen::Index>(first.dim);
  Eigen::MatrixXd sum_a = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d);
  for (const auto& m : models) {
    const auto& q = std::get<fedopt::QuadraticModel>(m.kind());
    Eigen::MatrixXd a(d, d);
    Eigen::VectorXd c(d);
    for (Eigen::Index r = 0; r < d; ++r) {
      c[r] = q.center[static_cast<std::size_t>(r)];
      for (Eigen::Index k = 0; k < d; ++k) a(r, k) = q.a[static_cast<std::size_t>(r * d + k)];
    }
    sum_a += a;
    rhs += a * c;
  }
  return sum_a.ldlt().solve(rhs);
}

/// 2x2 quadratic gradient A (x - c), accumulated row by row.
struct Quad2 {
  double a[2][2];
  double c[2];

  void grad(const double x[2], double g[2]) const {
    const double d0 = x[0] - c[0], d1 = x[1] - c[1];
    for (int i = 0; i < 2; ++i) {
      double row = 0.0;
      row += a[i][0] * d0;
      row += a[i][1] * d1;
      g[i] = row;
    }
  }

  fedopt::ModelSpec spec() const {
    return fedopt::ModelSpec::quadratic({a[0][0], a[0][1], a[1][0], a[1][1]}, vec({c[0], c[1]}));
  }
};

inline void scale_to_radius(const double v[2], double rho, double out[2]) {
  double s = 0.0;
  s += v[0] * v[0];
  s += v[1] * v[1];
  const double n = std::sqrt(s);
  if (!(n > 1e-12)) {
    out[0] = out[1] = 0.0;
    return;
  }
  const double f = rho / n;
  out[0] = v[0] * f;
  out[1] = v[1] * f;
}

struct ScalarRun {
  double theta[2];
  double h[2];
  double extra[2];
};

/// Step-by-step FedTOGA client on a 2-D quadratic, toga perturbation mode.
inline ScalarRun fedtoga_reference(const Quad2& q, const double theta0[2], const double delta[2], const double h[2],
                                   double eta, double rho, double alpha, double beta, double kappa, int steps) {
  ScalarRun r{{theta0[0], theta0[1]}, {h[0], h[1]}, {0, 0}};
  const double inv_alpha = 1.0 / alpha;
  for (int k = 0; k < steps; ++k) {
    double g[2], num[2], pert[2], shifted[2], gt[2];
    q.grad(r.theta, g);
    for (int j = 0; j < 2; ++j) num[j] = g[j] + kappa * delta[j];
    scale_to_radius(num, rho, pert);
    for (int j = 0; j < 2; ++j) shifted[j] = r.theta[j] + pert[j];
    q.grad(shifted, gt);
    for (int j = 0; j < 2; ++j) {
      double d = gt[j];
      d -= h[j];
      d += inv_alpha * (r.theta[j] - theta0[j]);
      d += beta * delta[j];
      r.theta[j] -= eta * d;
    }
  }
  for (int j = 0; j < 2; ++j) r.h[j] = h[j] - inv_alpha * (r.theta[j] - theta0[j]);
  return r;
}

/// Step-by-step FedSMOO client on a 2-D quadratic.
inline ScalarRun fedsmoo_reference(const Quad2& q, const double theta0[2], const double s[2], const double h[2],
                                   double mu_in[2], double eta, double rho, double alpha, int steps) {
  ScalarRun r{{theta0[0], theta0[1]}, {h[0], h[1]}, {0, 0}};
  const double inv_alpha = 1.0 / alpha;
  double mu[2] = {mu_in[0], mu_in[1]};
  double s_hat[2] = {0, 0};
  for (int k = 0; k < steps; ++k) {
    double g[2], dir[2], shifted[2], gt[2];
    q.grad(r.theta, g);
    for (int j = 0; j < 2; ++j) {
      dir[j] = g[j];
      dir[j] -= mu[j];
      dir[j] -= s[j];
    }
    scale_to_radius(dir, rho, s_hat);
    for (int j = 0; j < 2; ++j) mu[j] += s_hat[j] - s[j];
    for (int j = 0; j < 2; ++j) shifted[j] = r.theta[j] + s_hat[j];
    q.grad(shifted, gt);
    for (int j = 0; j < 2; ++j) {
      double d = gt[j];
      d -= h[j];
      d += inv_alpha * (r.theta[j] - theta0[j]);
      r.theta[j] -= eta * d;
    }
  }
  for (int j = 0; j < 2; ++j) {
    r.extra[j] = mu[j] - s_hat[j];
    r.h[j] = h[j] - inv_alpha * (r.theta[j] - theta0[j]);
    mu_in[j] = mu[j];
  }
  return r;
}

}  // namespace testsupport
