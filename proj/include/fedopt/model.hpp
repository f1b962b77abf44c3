#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "fedopt/errors.hpp"
#include "fedopt/param_vector.hpp"
#include "fedopt/rng.hpp"

namespace fedopt {

/// A batch of labelled feature rows, stored row-major.
struct Batch {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

  void push_back(std::span<const double> x, int label) {
    require(x.size() == dim, "Batch::push_back: feature length mismatch");
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
  }
};

/// f(theta) = 1/2 (theta - c)^T A (theta - c). Ignores the batch.
struct QuadraticModel {
  std::size_t dim = 0;
  std::vector<double> a;  // row-major dim x dim
  ParamVector center;

  double at(std::size_t i, std::size_t j) const { return a[i * dim + j]; }
};

/// Linear classifier: sigmoid output for two classes, softmax otherwise.
struct LogisticModel {
  std::size_t input_dim = 0;
  std::size_t num_classes = 2;
  bool bias = false;
};

/// Fully connected tanh network with a softmax cross-entropy head.
/// widths = {input, hidden..., classes}.
struct MlpModel {
  std::vector<std::size_t> widths;
};

class ModelSpec {
 public:
  using Kind = std::variant<QuadraticModel, LogisticModel, MlpModel>;

  /// Validates symmetry (tol 1e-12) and positive semidefiniteness via an
  /// LDL^T factorization whose pivots must be nonnegative.
  static ModelSpec quadratic(std::vector<double> a, ParamVector center) {
    const std::size_t d = center.size();
    require(d >= 1, "quadratic model: dimension must be >= 1");
    require(a.size() == d * d, "quadratic model: A must be d x d");
    double scale = 1.0;
    for (double v : a) {
      require(std::isfinite(v), "quadratic model: A has non-finite entries");
      scale = std::max(scale, std::abs(v));
    }
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j)
        require(std::abs(a[i * d + j] - a[j * d + i]) <= 1e-12 * scale,
                "quadratic model: A is not symmetric");
    require(is_psd(a, d, scale), "quadratic model: A is not positive semidefinite");
    return ModelSpec(QuadraticModel{d, std::move(a), std::move(center)});
  }

  static ModelSpec logistic(std::size_t input_dim, std::size_t num_classes = 2, bool bias = false) {
    require(input_dim >= 1, "logistic model: input_dim must be >= 1");
    require(num_classes >= 2, "logistic model: num_classes must be >= 2");
    return ModelSpec(LogisticModel{input_dim, num_classes, bias});
  }

  static ModelSpec mlp(std::vector<std::size_t> widths) {
    require(widths.size() >= 3, "mlp model: need input, >= 1 hidden layer and output widths");
    for (auto w : widths) require(w >= 1, "mlp model: widths must be >= 1");
    require(widths.back() >= 2, "mlp model: output width (classes) must be >= 2");
    return ModelSpec(MlpModel{std::move(widths)});
  }

  const Kind& kind() const noexcept { return kind_; }
  bool is_quadratic() const noexcept { return std::holds_alternative<QuadraticModel>(kind_); }

  std::size_t parameter_count() const {
    return std::visit(
        [](const auto& m) -> std::size_t {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, QuadraticModel>) {
            return m.dim;
          } else if constexpr (std::is_same_v<M, LogisticModel>) {
            const std::size_t outs = m.num_classes == 2 ? 1 : m.num_classes;
            return outs * m.input_dim + (m.bias ? outs : 0);
          } else {
            std::size_t n = 0;
            for (std::size_t l = 0; l + 1 < m.widths.size(); ++l)
              n += m.widths[l + 1] * m.widths[l] + m.widths[l + 1];
            return n;
          }
        },
        kind_);
  }

  /// Feature dimension expected in batches (0 for quadratic).
  std::size_t input_dim() const {
    if (auto* l = std::get_if<LogisticModel>(&kind_)) return l->input_dim;
    if (auto* m = std::get_if<MlpModel>(&kind_)) return m->widths.front();
    return 0;
  }

  std::size_t num_classes() const {
    if (auto* l = std::get_if<LogisticModel>(&kind_)) return l->num_classes;
    if (auto* m = std::get_if<MlpModel>(&kind_)) return m->widths.back();
    return 0;
  }

 private:
  explicit ModelSpec(Kind k) : kind_(std::move(k)) {}

  static bool is_psd(const std::vector<double>& a, std::size_t d, double scale) {
    const double tol = 1e-12 * scale * static_cast<double>(d);
    std::vector<double> l(d * d, 0.0), piv(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) {
      double p = a[k * d + k];
      for (std::size_t j = 0; j < k; ++j) p -= l[k * d + j] * l[k * d + j] * piv[j];
      if (p < -tol) return false;
      if (p <= tol) {
        // Zero pivot: the rest of column k must vanish too.
        for (std::size_t i = k + 1; i < d; ++i) {
          double r = a[i * d + k];
          for (std::size_t j = 0; j < k; ++j) r -= l[i * d + j] * l[k * d + j] * piv[j];
          if (std::abs(r) > std::sqrt(tol) * std::sqrt(scale)) return false;
        }
        piv[k] = 0.0;
        continue;
      }
      piv[k] = p;
      for (std::size_t i = k + 1; i < d; ++i) {
        double r = a[i * d + k];
        for (std::size_t j = 0; j < k; ++j) r -= l[i * d + j] * l[k * d + j] * piv[j];
        l[i * d + k] = r / p;
      }
    }
    return true;
  }

  Kind kind_;
};

namespace detail {

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// In place: z <- softmax(z); returns log-sum-exp of the input.
inline double softmax_inplace(std::span<double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : z) v /= s;
  return mx + std::log(s);
}

inline void check_batch(const ModelSpec& model, const Batch& batch) {
  require(!batch.empty(), "loss: batch must be nonempty for data-driven models");
  require(batch.dim == model.input_dim(), "loss: batch feature dimension does not match model");
  require(batch.features.size() == batch.dim * batch.size(), "loss: ragged batch");
  const int c = static_cast<int>(model.num_classes());
  for (int y : batch.labels) require(y >= 0 && y < c, "loss: label out of range");
}

struct ValueGrad {
  double value = 0.0;
  ParamVector grad;
};

inline ValueGrad quadratic_eval(const QuadraticModel& m, const ParamVector& p, bool want_grad) {
  ParamVector diff = p - m.center;
  ValueGrad out;
  out.grad = ParamVector::zeros(m.dim);
  double v = 0.0;
  for (std::size_t i = 0; i < m.dim; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m.dim; ++j) row += m.at(i, j) * diff[j];
    out.grad[i] = row;
    v += diff[i] * row;
  }
  out.value = std::max(0.0, 0.5 * v);
  if (!want_grad) out.grad = ParamVector();
  return out;
}

inline ValueGrad logistic_eval(const LogisticModel& m, const ParamVector& p, const Batch& b,
                               bool want_grad) {
  const std::size_t d = m.input_dim;
  const double inv_n = 1.0 / static_cast<double>(b.size());
  ValueGrad out;
  out.grad = ParamVector::zeros(want_grad ? p.size() : 0);
  if (m.num_classes == 2) {
    for (std::size_t s = 0; s < b.size(); ++s) {
      auto x = b.row(s);
      double z = m.bias ? p[d] : 0.0;
      for (std::size_t j = 0; j < d; ++j) z += p[j] * x[j];
      const double y = b.labels[s] == 1 ? 1.0 : 0.0;
      out.value += softplus(z) - y * z;
      if (want_grad) {
        const double r = (sigmoid(z) - y) * inv_n;
        for (std::size_t j = 0; j < d; ++j) out.grad[j] += r * x[j];
        if (m.bias) out.grad[d] += r;
      }
    }
  } else {
    const std::size_t c = m.num_classes;
    const std::size_t bias_off = c * d;
    std::vector<double> z(c);
    for (std::size_t s = 0; s < b.size(); ++s) {
      auto x = b.row(s);
      for (std::size_t k = 0; k < c; ++k) {
        double acc = m.bias ? p[bias_off + k] : 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += p[k * d + j] * x[j];
        z[k] = acc;
      }
      const int y = b.labels[s];
      const double zy = z[y];
      out.value += softmax_inplace(z) - zy;
      if (want_grad) {
        for (std::size_t k = 0; k < c; ++k) {
          const double r = (z[k] - (static_cast<int>(k) == y ? 1.0 : 0.0)) * inv_n;
          for (std::size_t j = 0; j < d; ++j) out.grad[k * d + j] += r * x[j];
          if (m.bias) out.grad[bias_off + k] += r;
        }
      }
    }
  }
  out.value = std::max(0.0, out.value * inv_n);
  return out;
}

inline ValueGrad mlp_eval(const MlpModel& m, const ParamVector& p, const Batch& b, bool want_grad) {
  const auto& w = m.widths;
  const std::size_t layers = w.size() - 1;
  std::vector<std::size_t> offset(layers);
  {
    std::size_t o = 0;
    for (std::size_t l = 0; l < layers; ++l) {
      offset[l] = o;
      o += w[l + 1] * w[l] + w[l + 1];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(b.size());
  ValueGrad out;
  out.grad = ParamVector::zeros(want_grad ? p.size() : 0);

  // act[l] holds the input to layer l; act[layers] holds the logits.
  std::vector<std::vector<double>> act(layers + 1);
  for (std::size_t l = 0; l <= layers; ++l) act[l].resize(w[l]);
  std::vector<double> delta, prev_delta;

  for (std::size_t s = 0; s < b.size(); ++s) {
    auto x = b.row(s);
    std::copy(x.begin(), x.end(), act[0].begin());
    for (std::size_t l = 0; l < layers; ++l) {
      const double* wl = p.span().data() + offset[l];
      const double* bl = wl + w[l + 1] * w[l];
      for (std::size_t o = 0; o < w[l + 1]; ++o) {
        double acc = bl[o];
        for (std::size_t i = 0; i < w[l]; ++i) acc += wl[o * w[l] + i] * act[l][i];
        act[l + 1][o] = (l + 1 < layers) ? std::tanh(acc) : acc;
      }
    }
    const int y = b.labels[s];
    const double zy = act[layers][y];
    std::vector<double> probs = act[layers];
    out.value += softmax_inplace(probs) - zy;
    if (!want_grad) continue;

    delta = probs;
    delta[y] -= 1.0;
    for (std::size_t l = layers; l-- > 0;) {
      const double* wl = p.span().data() + offset[l];
      double* gw = out.grad.span().data() + offset[l];
      double* gb = gw + w[l + 1] * w[l];
      for (std::size_t o = 0; o < w[l + 1]; ++o) {
        const double r = delta[o] * inv_n;
        gb[o] += r;
        for (std::size_t i = 0; i < w[l]; ++i) gw[o * w[l] + i] += r * act[l][i];
      }
      if (l == 0) break;
      prev_delta.assign(w[l], 0.0);
      for (std::size_t i = 0; i < w[l]; ++i) {
        double acc = 0.0;
        for (std::size_t o = 0; o < w[l + 1]; ++o) acc += wl[o * w[l] + i] * delta[o];
        const double a = act[l][i];
        prev_delta[i] = acc * (1.0 - a * a);
      }
      delta.swap(prev_delta);
    }
  }
  out.value = std::max(0.0, out.value * inv_n);
  return out;
}

inline ValueGrad evaluate_model(const ModelSpec& model, const ParamVector& params, const Batch& batch,
                                bool want_grad) {
  if (params.size() != model.parameter_count()) {
    throw ContractViolation("model: parameter length " + std::to_string(params.size()) +
                            " does not match parameter count " +
                            std::to_string(model.parameter_count()));
  }
  return std::visit(
      [&](const auto& m) -> ValueGrad {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, QuadraticModel>) {
          return quadratic_eval(m, params, want_grad);
        } else {
          check_batch(model, batch);
          if constexpr (std::is_same_v<M, LogisticModel>)
            return logistic_eval(m, params, batch, want_grad);
          else
            return mlp_eval(m, params, batch, want_grad);
        }
      },
      model.kind());
}

}  // namespace detail

/// Mean loss over the batch. Quadratic models ignore the batch.
inline double loss(const ModelSpec& model, const ParamVector& params, const Batch& batch) {
  return detail::evaluate_model(model, params, batch, false).value;
}

inline ParamVector grad(const ModelSpec& model, const ParamVector& params, const Batch& batch) {
  return detail::evaluate_model(model, params, batch, true).grad;
}

/// Central-difference gradient, one coordinate at a time.
inline ParamVector finite_diff_grad(const ModelSpec& model, const ParamVector& params,
                                    const Batch& batch, double h = 1e-5) {
  require(h > 0.0, "finite_diff_grad: h must be > 0");
  ParamVector out = ParamVector::zeros(params.size());
  ParamVector probe = params;
  for (std::size_t j = 0; j < params.size(); ++j) {
    probe[j] = params[j] + h;
    const double up = loss(model, probe, batch);
    probe[j] = params[j] - h;
    const double down = loss(model, probe, batch);
    probe[j] = params[j];
    out[j] = (up - down) / (2.0 * h);
  }
  return out;
}

/// Predicted class of one feature row (argmax, ties to the lowest class).
inline int predict(const ModelSpec& model, const ParamVector& params, std::span<const double> x) {
  return std::visit(
      [&](const auto& m) -> int {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, QuadraticModel>) {
          return 0;
        } else if constexpr (std::is_same_v<M, LogisticModel>) {
          require(x.size() == m.input_dim, "predict: feature length mismatch");
          const std::size_t d = m.input_dim;
          if (m.num_classes == 2) {
            double z = m.bias ? params[d] : 0.0;
            for (std::size_t j = 0; j < d; ++j) z += params[j] * x[j];
            return z > 0.0 ? 1 : 0;
          }
          int best = 0;
          double best_z = -INFINITY;
          for (std::size_t k = 0; k < m.num_classes; ++k) {
            double z = m.bias ? params[m.num_classes * d + k] : 0.0;
            for (std::size_t j = 0; j < d; ++j) z += params[k * d + j] * x[j];
            if (z > best_z) {
              best_z = z;
              best = static_cast<int>(k);
            }
          }
          return best;
        } else {
          require(x.size() == m.widths.front(), "predict: feature length mismatch");
          std::vector<double> cur(x.begin(), x.end()), next;
          std::size_t off = 0;
          const std::size_t layers = m.widths.size() - 1;
          for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t in = m.widths[l], outw = m.widths[l + 1];
            next.assign(outw, 0.0);
            for (std::size_t o = 0; o < outw; ++o) {
              double acc = params[off + outw * in + o];
              for (std::size_t i = 0; i < in; ++i) acc += params[off + o * in + i] * cur[i];
              next[o] = (l + 1 < layers) ? std::tanh(acc) : acc;
            }
            off += outw * in + outw;
            cur.swap(next);
          }
          return static_cast<int>(std::max_element(cur.begin(), cur.end()) - cur.begin());
        }
      },
      model.kind());
}

/// Initial parameters: zeros for quadratics; otherwise each weight and bias
/// is uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline ParamVector init_params(const ModelSpec& model, Stream& rng) {
  ParamVector p = ParamVector::zeros(model.parameter_count());
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, LogisticModel>) {
          const double bound = 1.0 / std::sqrt(static_cast<double>(m.input_dim));
          for (double& v : p) v = rng.uniform(-bound, bound);
        } else if constexpr (std::is_same_v<M, MlpModel>) {
          std::size_t off = 0;
          for (std::size_t l = 0; l + 1 < m.widths.size(); ++l) {
            const std::size_t n = m.widths[l + 1] * m.widths[l] + m.widths[l + 1];
            const double bound = 1.0 / std::sqrt(static_cast<double>(m.widths[l]));
            for (std::size_t i = 0; i < n; ++i) p[off + i] = rng.uniform(-bound, bound);
            off += n;
          }
        }
      },
      model.kind());
  return p;
}

}  // namespace fedopt
