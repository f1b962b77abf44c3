#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedopt/client.hpp"
#include "fedopt/errors.hpp"
#include "fedopt/param_vector.hpp"
#include "fedopt/rng.hpp"

namespace fedopt {

struct GlobalState {
  ParamVector theta;
  ParamVector h;
  ParamVector delta;  // global update, zero before the first aggregation
  std::optional<ParamVector> s;  // FedSMOO global perturbation
  std::size_t round = 0;

  static GlobalState initial(ParamVector theta0, bool with_perturbation = false) {
    const std::size_t d = theta0.size();
    GlobalState g{std::move(theta0), ParamVector::zeros(d), ParamVector::zeros(d), std::nullopt, 0};
    if (with_perturbation) g.s = ParamVector::zeros(d);
    return g;
  }
};

struct RoundPlan {
  std::vector<std::size_t> selected;  // distinct, ascending
};

/// Uniform draw of M distinct clients out of N, keyed by (seed, round).
inline RoundPlan sample_clients(std::size_t n_clients, std::size_t m, std::uint64_t seed, std::size_t round) {
  if (m > n_clients) throw ConfigError("M exceeds N (M=" + std::to_string(m) + ", N=" + std::to_string(n_clients) + ")");
  if (m < 1) throw ConfigError("M must be >= 1");
  RoundPlan plan;
  if (m == n_clients) {
    plan.selected.resize(n_clients);
    std::iota(plan.selected.begin(), plan.selected.end(), std::size_t{0});
    return plan;
  }
  Stream rng = Stream(seed).derive(StreamTag::kSampling).derive(round);
  std::vector<std::size_t> ids(n_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  // Partial Fisher-Yates: the first m slots are a uniform m-subset.
  for (std::size_t i = 0; i < m; ++i) std::swap(ids[i], ids[i + rng.below(n_clients - i)]);
  plan.selected.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(m));
  std::sort(plan.selected.begin(), plan.selected.end());
  return plan;
}

namespace detail {

struct Aggregate {
  ParamVector displacement_sum;  // sum_i (theta_i - theta^t)
  ParamVector mean;              // (1/M) sum_i theta_i
  std::size_t count = 0;
};

// Accumulates in ascending client-id order so the result is independent of
// the order reports arrive in.
inline Aggregate aggregate(const ParamVector& theta, std::span<const ClientReport> reports) {
  if (reports.empty()) throw ProtocolError("server step: no client reports");
  std::vector<const ClientReport*> sorted;
  sorted.reserve(reports.size());
  for (const auto& r : reports) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i]->client_id == sorted[i - 1]->client_id)
      throw ProtocolError("server step: duplicate report from client " + std::to_string(sorted[i]->client_id));

  const std::size_t d = theta.size();
  Aggregate agg{ParamVector::zeros(d), ParamVector::zeros(d), sorted.size()};
  for (const auto* r : sorted) {
    if (r->theta_out.size() != d)
      throw ProtocolError("server step: report from client " + std::to_string(r->client_id) + " has wrong length");
    for (std::size_t j = 0; j < d; ++j) {
      agg.displacement_sum[j] += r->theta_out[j] - theta[j];
      agg.mean[j] += r->theta_out[j];
    }
  }
  const double m = static_cast<double>(agg.count);
  for (auto& v : agg.mean) v /= m;
  return agg;
}

// Delta^{t+1} = -(1/(M K)) sum_i (theta_i - theta^t)
inline ParamVector global_update(const Aggregate& agg, std::size_t local_steps) {
  const double mk = static_cast<double>(agg.count) * static_cast<double>(local_steps);
  ParamVector delta = agg.displacement_sum;
  for (auto& v : delta) v = -(v / mk);
  return delta;
}

// h^{t+1} = h^t - (1/(alpha * divisor)) sum_i (theta_i - theta^t);  theta^{t+1} = mean - alpha h^{t+1}
inline void dyn_aggregate(GlobalState& next, const GlobalState& cur, const Aggregate& agg, double alpha,
                          std::size_t divisor) {
  require(divisor >= 1, "server step: dual divisor must be >= 1");
  const double scale = alpha * static_cast<double>(divisor);
  next.h = cur.h;
  for (std::size_t j = 0; j < next.h.size(); ++j) next.h[j] -= agg.displacement_sum[j] / scale;
  next.theta = agg.mean;
  next.theta.axpy(-alpha, next.h);
}

}  // namespace detail

/// FedTOGA aggregation: dual update, global update, then the model. The dual
/// divisor defaults to the number of participants M.
inline GlobalState fedtoga_server_step(const GlobalState& state, std::span<const ClientReport> reports,
                                       const HyperParams& hp, std::optional<std::size_t> dual_divisor = {}) {
  const auto agg = detail::aggregate(state.theta, reports);
  GlobalState next = state;
  detail::dyn_aggregate(next, state, agg, hp.alpha, dual_divisor.value_or(agg.count));
  next.delta = detail::global_update(agg, hp.local_steps);
  next.round = state.round + 1;
  return next;
}

/// Plain model averaging. Delta is still refreshed as a diagnostic.
inline GlobalState fedavg_server_step(const GlobalState& state, std::span<const ClientReport> reports,
                                      std::size_t local_steps = 1) {
  const auto agg = detail::aggregate(state.theta, reports);
  GlobalState next = state;
  next.theta = agg.mean;
  next.delta = detail::global_update(agg, local_steps);
  next.round = state.round + 1;
  return next;
}

/// FedDyn aggregation; the dual divisor is the total client count N.
inline GlobalState feddyn_server_step(const GlobalState& state, std::span<const ClientReport> reports,
                                      const HyperParams& hp, std::size_t dual_divisor) {
  const auto agg = detail::aggregate(state.theta, reports);
  GlobalState next = state;
  detail::dyn_aggregate(next, state, agg, hp.alpha, dual_divisor);
  next.delta = detail::global_update(agg, hp.local_steps);
  next.round = state.round + 1;
  return next;
}

/// FedSMOO aggregation: s <- normalize(mean_i s~_i, rho), then as FedDyn.
inline GlobalState fedsmoo_server_step(const GlobalState& state, std::span<const ClientReport> reports,
                                       const HyperParams& hp, std::size_t dual_divisor) {
  if (reports.empty()) throw ProtocolError("server step: no client reports");
  std::vector<const ClientReport*> sorted;
  for (const auto& r : reports) {
    if (!r.extra)
      throw ProtocolError("fedsmoo server step: report from client " + std::to_string(r.client_id) +
                          " is missing s~");
    if (r.extra->size() != state.theta.size())
      throw ProtocolError("fedsmoo server step: s~ from client " + std::to_string(r.client_id) + " has wrong length");
    sorted.push_back(&r);
  }
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  ParamVector mean_s = ParamVector::zeros(state.theta.size());
  for (const auto* r : sorted) mean_s += *r->extra;
  mean_s *= 1.0 / static_cast<double>(sorted.size());

  GlobalState next = feddyn_server_step(state, reports, hp, dual_divisor);
  next.s = hp.rho == 0.0 ? ParamVector::zeros(mean_s.size()) : normalize_to_radius(mean_s, hp.rho);
  return next;
}

}  // namespace fedopt
