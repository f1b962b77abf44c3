#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedopt/data.hpp"
#include "fedopt/errors.hpp"
#include "fedopt/model.hpp"
#include "fedopt/param_vector.hpp"
#include "fedopt/rng.hpp"

namespace fedopt {

/// Which terms enter the numerator of the SAM ascent direction.
///   plain        g
///   toga         g + kappa * Delta
///   neighborhood cached + kappa * Delta   (toga when nothing is cached)
///   fusion       g + cached + kappa * Delta
enum class PerturbationMode { kPlain, kToga, kNeighborhood, kFusion };

struct HyperParams {
  double eta_l = 0.1;
  double lr_decay = 0.998;
  double rho = 0.1;
  double alpha = 0.1;
  double beta = 0.9;
  double kappa = 1.0;
  std::size_t local_steps = 5;  // K
  std::size_t batch_size = 50;
  PerturbationMode perturbation_mode = PerturbationMode::kToga;
  // false represents alpha -> infinity: no proximal pull toward theta_{i,0}.
  bool prox_enabled = true;

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError(m); };
    if (!(eta_l > 0.0)) bad("eta_l must be > 0");
    if (!(rho >= 0.0)) bad("rho must be >= 0");
    if (!(alpha > 0.0)) bad("alpha must be > 0");
    if (!(beta >= 0.0)) bad("beta must be >= 0");
    if (!(kappa >= 0.0)) bad("kappa must be >= 0");
    if (local_steps < 1) bad("K must be >= 1");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) bad("lr_decay must be in (0, 1]");
  }
};

/// Per-client state that survives between rounds.
struct ClientState {
  ParamVector h;                               // local dual variable h_i
  std::optional<ParamVector> cached_sam_grad;  // last perturbed gradient of the current round
  std::optional<ParamVector> theta_old;        // FedLESAM-D: global model at last activation
  std::optional<ParamVector> mu;               // FedSMOO: local perturbation dual

  static ClientState fresh(std::size_t dim) { return ClientState{ParamVector::zeros(dim), {}, {}, {}}; }
};

struct ClientReport {
  std::size_t client_id = 0;
  ParamVector theta_out;
  std::optional<ParamVector> extra;  // FedSMOO's s~_i
};

/// The slice of training data a client sees. `dataset` is null for
/// data-free objectives (quadratics).
struct ShardView {
  std::size_t client_id = 0;
  const Dataset* dataset = nullptr;
  std::span<const std::size_t> indices;
};

/// Draws minibatches without replacement, reshuffling the shard each time it
/// is exhausted. Batches never straddle two shuffles.
class BatchSampler {
 public:
  BatchSampler(const ShardView& shard, std::size_t batch_size, Stream& rng)
      : shard_(shard), batch_size_(batch_size), rng_(rng), order_(shard.indices.begin(), shard.indices.end()) {
    require(batch_size >= 1, "BatchSampler: batch_size must be >= 1");
    pos_ = order_.size();
  }

  Batch next() {
    if (shard_.dataset == nullptr) return Batch{};
    require(!order_.empty(), "BatchSampler: client " + std::to_string(shard_.client_id) + " has no samples");
    const std::size_t take = std::min(batch_size_, order_.size());
    if (pos_ + take > order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    Batch b = shard_.dataset->gather(std::span<const std::size_t>(order_).subspan(pos_, take));
    pos_ += take;
    return b;
  }

 private:
  ShardView shard_;
  std::size_t batch_size_;
  Stream& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

inline ParamVector compute_perturbation(const ParamVector& g, const std::optional<ParamVector>& cached,
                                        const ParamVector& delta_global, const HyperParams& hp) {
  if (hp.perturbation_mode != PerturbationMode::kNeighborhood || !cached)
    g.check_same_size(delta_global, "compute_perturbation");
  if (cached) cached->check_same_size(delta_global, "compute_perturbation");

  ParamVector num;
  switch (hp.perturbation_mode) {
    case PerturbationMode::kPlain:
      num = g;
      break;
    case PerturbationMode::kToga:
      num = g;
      num.axpy(hp.kappa, delta_global);
      break;
    case PerturbationMode::kNeighborhood:
      num = cached ? *cached : g;
      num.axpy(hp.kappa, delta_global);
      break;
    case PerturbationMode::kFusion:
      num = g;
      if (cached) num += *cached;
      num.axpy(hp.kappa, delta_global);
      break;
  }
  if (hp.rho == 0.0) return ParamVector::zeros(num.size());
  return normalize_to_radius(num, hp.rho);
}

namespace detail {

inline constexpr double kDivergenceBound = 1e12;

inline void guard_divergence(const ParamVector& theta, std::size_t client, std::size_t step) {
  for (std::size_t j = 0; j < theta.size(); ++j) {
    if (!std::isfinite(theta[j]) || std::abs(theta[j]) > kDivergenceBound) {
      throw DivergenceError("client " + std::to_string(client) + ": local step " + std::to_string(step) +
                            ": parameter " + std::to_string(j) + " diverged (" + std::to_string(theta[j]) + ")");
    }
  }
}

struct LoopResult {
  ParamVector theta;
  std::optional<ParamVector> last_sam_grad;
};

// Shared local loop. Each step computes
//   g~ = grad(theta_k + delta_k)  (or grad(theta_k) when perturb yields nothing)
//   theta_{k+1} = theta_k - eta * (g~ - h + (1/alpha)(theta_k - theta_0) + beta * Delta)
// where the h, proximal and beta*Delta terms are present only when requested.
// `perturb(theta_k, batch, cached)` returns the ascent offset or nullopt.
template <typename Perturb>
LoopResult local_loop(const ParamVector& theta0, const ParamVector* h, const ParamVector* correction,
                      double beta, const ShardView& shard, const ModelSpec& model, const HyperParams& hp,
                      Stream& rng, Perturb&& perturb) {
  hp.validate();
  require(theta0.size() == model.parameter_count(), "local update: theta length does not match model");
  if (h) theta0.check_same_size(*h, "local update (h)");
  if (correction) theta0.check_same_size(*correction, "local update (Delta)");

  BatchSampler sampler(shard, hp.batch_size, rng);
  const double inv_alpha = 1.0 / hp.alpha;
  ParamVector theta = theta0;
  std::optional<ParamVector> cached;
  for (std::size_t k = 0; k < hp.local_steps; ++k) {
    const Batch batch = sampler.next();
    const std::optional<ParamVector> delta = perturb(theta, batch, cached);
    ParamVector gt = delta ? grad(model, theta + *delta, batch) : grad(model, theta, batch);
    for (std::size_t j = 0; j < theta.size(); ++j) {
      double d = gt[j];
      if (h) d -= (*h)[j];
      if (hp.prox_enabled) d += inv_alpha * (theta[j] - theta0[j]);
      if (correction) d += beta * (*correction)[j];
      theta[j] -= hp.eta_l * d;
    }
    guard_divergence(theta, shard.client_id, k);
    cached = std::move(gt);
  }
  return {std::move(theta), std::move(cached)};
}

// h_i <- h_i - (1/alpha)(theta_K - theta_0)
inline ParamVector dual_update(const ParamVector& h, const ParamVector& theta_k, const ParamVector& theta0,
                               double alpha) {
  const double inv_alpha = 1.0 / alpha;
  ParamVector out = h;
  for (std::size_t j = 0; j < out.size(); ++j) out[j] -= inv_alpha * (theta_k[j] - theta0[j]);
  return out;
}

inline auto no_perturbation() {
  return [](const ParamVector&, const Batch&, const std::optional<ParamVector>&) -> std::optional<ParamVector> {
    return std::nullopt;
  };
}

inline ClientState ensure_dual(ClientState state, std::size_t dim) {
  if (state.h.empty()) state.h = ParamVector::zeros(dim);
  return state;
}

}  // namespace detail

/// FedTOGA client: SAM ascent along the corrected direction, descent on the
/// dual-corrected augmented Lagrangian, then the local dual update.
inline std::pair<ClientReport, ClientState> fedtoga_local_update(const ParamVector& theta_global,
                                                                 const ParamVector& delta_global,
                                                                 ClientState state, const ShardView& shard,
                                                                 const ModelSpec& model, const HyperParams& hp,
                                                                 Stream rng) {
  state = detail::ensure_dual(std::move(state), theta_global.size());
  state.cached_sam_grad.reset();
  auto perturb = [&](const ParamVector& theta, const Batch& batch,
                     const std::optional<ParamVector>& cached) -> std::optional<ParamVector> {
    const bool skip_g = hp.perturbation_mode == PerturbationMode::kNeighborhood && cached.has_value();
    const ParamVector g = skip_g ? ParamVector() : grad(model, theta, batch);
    return compute_perturbation(g, cached, delta_global, hp);
  };
  // prox_enabled = false switches the whole dynamic regularizer off (h_i stays frozen).
  const ParamVector* h = hp.prox_enabled ? &state.h : nullptr;
  auto res = detail::local_loop(theta_global, h, &delta_global, hp.beta, shard, model, hp, rng, perturb);
  if (hp.prox_enabled) state.h = detail::dual_update(state.h, res.theta, theta_global, hp.alpha);
  state.cached_sam_grad = std::move(res.last_sam_grad);
  return {ClientReport{shard.client_id, std::move(res.theta), std::nullopt}, std::move(state)};
}

/// Plain local SGD.
inline ClientReport fedavg_local_update(const ParamVector& theta_global, const ShardView& shard,
                                        const ModelSpec& model, HyperParams hp, Stream rng) {
  hp.prox_enabled = false;
  auto res = detail::local_loop(theta_global, nullptr, nullptr, 0.0, shard, model, hp, rng,
                                detail::no_perturbation());
  return ClientReport{shard.client_id, std::move(res.theta), std::nullopt};
}

inline ClientReport fedsam_local_update(const ParamVector& theta_global, const ShardView& shard,
                                        const ModelSpec& model, HyperParams hp, Stream rng) {
  hp.prox_enabled = false;
  hp.perturbation_mode = PerturbationMode::kPlain;
  const ParamVector no_delta = ParamVector::zeros(theta_global.size());
  auto perturb = [&](const ParamVector& theta, const Batch& batch,
                     const std::optional<ParamVector>&) -> std::optional<ParamVector> {
    return compute_perturbation(grad(model, theta, batch), std::nullopt, no_delta, hp);
  };
  auto res = detail::local_loop(theta_global, nullptr, nullptr, 0.0, shard, model, hp, rng, perturb);
  return ClientReport{shard.client_id, std::move(res.theta), std::nullopt};
}

inline std::pair<ClientReport, ClientState> feddyn_local_update(const ParamVector& theta_global,
                                                                ClientState state, const ShardView& shard,
                                                                const ModelSpec& model, const HyperParams& hp,
                                                                Stream rng) {
  state = detail::ensure_dual(std::move(state), theta_global.size());
  auto res = detail::local_loop(theta_global, &state.h, nullptr, 0.0, shard, model, hp, rng,
                                detail::no_perturbation());
  state.h = detail::dual_update(state.h, res.theta, theta_global, hp.alpha);
  return {ClientReport{shard.client_id, std::move(res.theta), std::nullopt}, std::move(state)};
}

/// FedDyn local objective with a plain local SAM ascent (the FedSpeed-style
/// combination). Not selectable as an experiment algorithm.
inline std::pair<ClientReport, ClientState> feddyn_sam_local_update(const ParamVector& theta_global,
                                                                    ClientState state, const ShardView& shard,
                                                                    const ModelSpec& model, HyperParams hp,
                                                                    Stream rng) {
  state = detail::ensure_dual(std::move(state), theta_global.size());
  hp.perturbation_mode = PerturbationMode::kPlain;
  const ParamVector no_delta = ParamVector::zeros(theta_global.size());
  auto perturb = [&](const ParamVector& theta, const Batch& batch,
                     const std::optional<ParamVector>&) -> std::optional<ParamVector> {
    return compute_perturbation(grad(model, theta, batch), std::nullopt, no_delta, hp);
  };
  auto res = detail::local_loop(theta_global, &state.h, nullptr, 0.0, shard, model, hp, rng, perturb);
  state.h = detail::dual_update(state.h, res.theta, theta_global, hp.alpha);
  return {ClientReport{shard.client_id, std::move(res.theta), std::nullopt}, std::move(state)};
}

/// FedSMOO client. The report's `extra` carries s~_i = mu_i - s^_K.
inline std::pair<ClientReport, ClientState> fedsmoo_local_update(const ParamVector& theta_global,
                                                                 const ParamVector& s_global, ClientState state,
                                                                 const ShardView& shard, const ModelSpec& model,
                                                                 const HyperParams& hp, Stream rng) {
  state = detail::ensure_dual(std::move(state), theta_global.size());
  theta_global.check_same_size(s_global, "fedsmoo_local_update (s)");
  if (!state.mu) state.mu = ParamVector::zeros(theta_global.size());
  ParamVector& mu = *state.mu;
  ParamVector s_hat = ParamVector::zeros(theta_global.size());
  auto perturb = [&](const ParamVector& theta, const Batch& batch,
                     const std::optional<ParamVector>&) -> std::optional<ParamVector> {
    ParamVector dir = grad(model, theta, batch);
    dir -= mu;
    dir -= s_global;
    s_hat = hp.rho == 0.0 ? ParamVector::zeros(dir.size()) : normalize_to_radius(dir, hp.rho);
    for (std::size_t j = 0; j < mu.size(); ++j) mu[j] += s_hat[j] - s_global[j];
    return s_hat;
  };
  auto res = detail::local_loop(theta_global, &state.h, nullptr, 0.0, shard, model, hp, rng, perturb);
  ParamVector s_tilde = mu - s_hat;
  state.h = detail::dual_update(state.h, res.theta, theta_global, hp.alpha);
  return {ClientReport{shard.client_id, std::move(res.theta), std::move(s_tilde)}, std::move(state)};
}

/// FedLESAM-D client. The ascent offset normalize(theta_old - theta^t, rho)
/// is fixed for the whole round; afterwards theta_old <- theta^t.
inline std::pair<ClientReport, ClientState> fedlesam_d_local_update(const ParamVector& theta_global,
                                                                    ClientState state, const ShardView& shard,
                                                                    const ModelSpec& model, const HyperParams& hp,
                                                                    Stream rng) {
  state = detail::ensure_dual(std::move(state), theta_global.size());
  ParamVector offset = ParamVector::zeros(theta_global.size());
  if (state.theta_old && hp.rho > 0.0) offset = normalize_to_radius(*state.theta_old - theta_global, hp.rho);
  auto perturb = [&](const ParamVector&, const Batch&,
                     const std::optional<ParamVector>&) -> std::optional<ParamVector> { return offset; };
  auto res = detail::local_loop(theta_global, &state.h, nullptr, 0.0, shard, model, hp, rng, perturb);
  state.h = detail::dual_update(state.h, res.theta, theta_global, hp.alpha);
  state.theta_old = theta_global;
  return {ClientReport{shard.client_id, std::move(res.theta), std::nullopt}, std::move(state)};
}

}  // namespace fedopt
