#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedopt/client.hpp"
#include "fedopt/config.hpp"
#include "fedopt/data.hpp"
#include "fedopt/errors.hpp"
#include "fedopt/model.hpp"
#include "fedopt/parallel.hpp"
#include "fedopt/param_vector.hpp"
#include "fedopt/rng.hpp"
#include "fedopt/server.hpp"

namespace fedopt {

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Full-dataset loss and argmax accuracy. Quadratic models report accuracy 0.
inline EvalResult evaluate(const ModelSpec& model, const ParamVector& params, const Dataset& dataset) {
  if (dataset.size() == 0) throw ContractViolation("evaluate: dataset is empty");
  EvalResult r;
  r.loss = loss(model, params, dataset.samples);
  if (model.is_quadratic()) return r;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (predict(model, params, dataset.samples.row(i)) == dataset.label(i)) ++correct;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  return r;
}

/// Mean over random unit directions u of [L(theta + rho u) - L(theta)],
/// clamped at zero. Directions come in antithetic pairs (u, -u); an odd
/// count leaves the last direction unpaired.
template <typename LossFn>
double sharpness_probe(LossFn&& loss_fn, const ParamVector& params, double rho_probe, std::size_t n_directions,
                       std::uint64_t seed) {
  require(n_directions >= 1, "sharpness_probe: n_directions must be >= 1");
  require(rho_probe > 0.0, "sharpness_probe: rho_probe must be > 0");
  Stream rng = Stream(seed).derive(StreamTag::kProbe);
  const double base = loss_fn(params);
  double total = 0.0;
  ParamVector u(params.size());
  for (std::size_t done = 0; done < n_directions;) {
    double n2 = 0.0;
    do {
      n2 = 0.0;
      for (double& v : u) {
        v = rng.normal();
        n2 += v * v;
      }
    } while (n2 == 0.0);
    const double scale = rho_probe / std::sqrt(n2);
    ParamVector step = u * scale;
    const double up = loss_fn(params + step) - base;
    if (done + 1 < n_directions) {
      const double down = loss_fn(params - step) - base;
      total += up + down;
      done += 2;
    } else {
      total += up;
      done += 1;
    }
  }
  return std::max(0.0, total / static_cast<double>(n_directions));
}

inline double sharpness_probe(const ModelSpec& model, const ParamVector& params, const Dataset& dataset,
                              double rho_probe, std::size_t n_directions, std::uint64_t seed) {
  return sharpness_probe([&](const ParamVector& p) { return loss(model, p, dataset.samples); }, params, rho_probe,
                         n_directions, seed);
}

struct MetricsRow {
  std::size_t round = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  std::optional<double> sharpness;
  double grad_norm = 0.0;
  double delta_norm = 0.0;
  double h_norm = 0.0;
};

struct MetricsLog {
  std::vector<MetricsRow> rows;
  nlohmann::json config_echo;
  std::string run_id;
  ParamVector final_theta;
};

/// First logged round whose test accuracy reaches the target.
inline std::optional<std::size_t> rounds_to_target(std::span<const MetricsRow> rows, double target_accuracy) {
  require(target_accuracy > 0.0 && target_accuracy <= 1.0, "rounds_to_target: target must be in (0, 1]");
  for (const auto& r : rows)
    if (r.test_accuracy >= target_accuracy) return r.round;
  return std::nullopt;
}

inline std::optional<std::size_t> rounds_to_target(const MetricsLog& log, double target_accuracy) {
  return rounds_to_target(std::span<const MetricsRow>(log.rows), target_accuracy);
}

/// Client i minimizes 1/2 (theta - c_i)^T A_i (theta - c_i) with
/// A_i = Q diag(lambda) Q^T, Q a random rotation, lambda uniform in
/// [0.2, 1], and c_i uniform in [-1, 1]^d.
inline std::vector<ModelSpec> gen_quadratic_federation(std::size_t n_clients, std::size_t dim, std::uint64_t seed) {
  require(n_clients >= 1 && dim >= 1, "gen_quadratic_federation: need N >= 1 and d >= 1");
  std::vector<ModelSpec> out;
  out.reserve(n_clients);
  for (std::size_t i = 0; i < n_clients; ++i) {
    Stream rng = Stream(seed).derive(StreamTag::kProblem).derive(i);
    // Gram-Schmidt on a Gaussian matrix; rows of q are orthonormal.
    std::vector<double> q(dim * dim);
    for (std::size_t r = 0; r < dim; ++r) {
      for (;;) {
        for (std::size_t k = 0; k < dim; ++k) q[r * dim + k] = rng.normal();
        for (std::size_t p = 0; p < r; ++p) {
          double dp = 0.0;
          for (std::size_t k = 0; k < dim; ++k) dp += q[r * dim + k] * q[p * dim + k];
          for (std::size_t k = 0; k < dim; ++k) q[r * dim + k] -= dp * q[p * dim + k];
        }
        double n2 = 0.0;
        for (std::size_t k = 0; k < dim; ++k) n2 += q[r * dim + k] * q[r * dim + k];
        if (n2 < 1e-8) continue;
        const double inv = 1.0 / std::sqrt(n2);
        for (std::size_t k = 0; k < dim; ++k) q[r * dim + k] *= inv;
        break;
      }
    }
    std::vector<double> lambda(dim);
    for (auto& l : lambda) l = rng.uniform(0.2, 1.0);
    std::vector<double> a(dim * dim, 0.0);
    for (std::size_t r = 0; r < dim; ++r)
      for (std::size_t c = 0; c < dim; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < dim; ++k) s += q[k * dim + r] * lambda[k] * q[k * dim + c];
        a[r * dim + c] = s;
      }
    for (std::size_t r = 0; r < dim; ++r)
      for (std::size_t c = r + 1; c < dim; ++c) {
        const double s = 0.5 * (a[r * dim + c] + a[c * dim + r]);
        a[r * dim + c] = a[c * dim + r] = s;
      }
    ParamVector center(dim);
    for (auto& v : center) v = rng.uniform(-1.0, 1.0);
    out.push_back(ModelSpec::quadratic(std::move(a), std::move(center)));
  }
  return out;
}

/// Everything an experiment trains on: per-client objectives plus, for
/// data-driven models, the train/test split and the client shards.
struct Federation {
  std::vector<ModelSpec> client_models;  // one per client (shared spec for data-driven models)
  Dataset train;
  Dataset test;
  std::vector<ClientShard> shards;
  bool data_free = false;

  const ModelSpec& model_of(std::size_t client) const {
    return client_models.size() == 1 ? client_models.front() : client_models[client];
  }
  const ModelSpec& eval_model() const { return client_models.front(); }

  ShardView shard_view(std::size_t client) const {
    if (data_free) return ShardView{client, nullptr, {}};
    return ShardView{client, &train, shards[client].indices};
  }

  /// Global training objective: mean of client objectives for quadratic
  /// federations, full-train-set loss otherwise.
  double train_loss(const ParamVector& theta) const {
    if (!data_free) return loss(eval_model(), theta, train.samples);
    double s = 0.0;
    for (const auto& m : client_models) s += loss(m, theta, Batch{});
    return s / static_cast<double>(client_models.size());
  }

  ParamVector train_grad(const ParamVector& theta) const {
    if (!data_free) return grad(eval_model(), theta, train.samples);
    ParamVector g = ParamVector::zeros(theta.size());
    for (const auto& m : client_models) g += grad(m, theta, Batch{});
    return g * (1.0 / static_cast<double>(client_models.size()));
  }
};

inline Federation build_federation(const ExperimentConfig& cfg) {
  cfg.validate();
  Federation fed;
  if (cfg.model.kind == ModelKind::kQuadratic) {
    fed.data_free = true;
    fed.client_models = gen_quadratic_federation(cfg.num_clients, cfg.model.quadratic_dim, cfg.model.quadratic_seed);
    return fed;
  }
  const std::uint64_t data_seed = cfg.data.data_seed.value_or(cfg.seed);
  if (cfg.data.source == DataSource::kCsv) {
    Dataset all = load_csv(cfg.data.csv_path);
    if (!cfg.data.test_csv_path.empty()) {
      fed.train = std::move(all);
      fed.test = load_csv(cfg.data.test_csv_path);
      if (fed.test.feature_dim != fed.train.feature_dim)
        throw ConfigError("test_csv_path: feature dimension differs from csv_path");
      fed.train.num_classes = fed.test.num_classes = std::max(fed.train.num_classes, fed.test.num_classes);
    } else {
      std::tie(fed.train, fed.test) = train_test_split(all, data_seed, cfg.data.test_fraction);
    }
  } else {
    Dataset all = gen_synthetic_classification(data_seed, cfg.data.n_samples, cfg.data.feature_dim,
                                               cfg.data.num_classes, cfg.data.class_sep);
    std::tie(fed.train, fed.test) = train_test_split(all, data_seed, cfg.data.test_fraction);
  }
  if (fed.test.size() == 0) fed.test = fed.train;

  const std::size_t classes = fed.train.num_classes;
  if (cfg.model.kind == ModelKind::kLogistic) {
    fed.client_models.push_back(ModelSpec::logistic(fed.train.feature_dim, classes, cfg.model.logistic_bias));
  } else {
    std::vector<std::size_t> widths{fed.train.feature_dim};
    widths.insert(widths.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
    widths.push_back(classes);
    fed.client_models.push_back(ModelSpec::mlp(std::move(widths)));
  }
  fed.shards = partition(fed.train, PartitionSpec{cfg.partition, cfg.num_clients, data_seed});
  return fed;
}

/// Everything a round produced, handed to RunOptions::observer.
struct RoundRecord {
  std::size_t round = 0;
  const RoundPlan* plan = nullptr;
  const GlobalState* before = nullptr;
  const GlobalState* after = nullptr;
  std::span<const ClientReport> reports;
  std::span<const ClientState> states_before;  // aligned with plan->selected
  std::span<const ClientState> states_after;
};

struct RunOptions {
  std::size_t threads = 0;  // 0 or 1: sequential
  std::function<void(const RoundRecord&)> observer;
};

namespace detail {

inline HyperParams effective_hyperparams(const ExperimentConfig& cfg) {
  HyperParams hp = cfg.hp;
  if (cfg.algorithm == Algorithm::kFedToga) {
    if (!cfg.ablation.sam) hp.rho = 0.0;
    if (!cfg.ablation.dynamic_regularizer) hp.prox_enabled = false;
    if (!cfg.ablation.dual_correction) hp.beta = 0.0;
    if (!cfg.ablation.perturbation_correction) hp.kappa = 0.0;
  }
  return hp;
}

inline std::size_t dual_divisor(const ExperimentConfig& cfg) {
  switch (cfg.dual_divisor) {
    case DualDivisor::kParticipants: return cfg.participants;
    case DualDivisor::kAllClients: return cfg.num_clients;
    case DualDivisor::kDefault: break;
  }
  return cfg.algorithm == Algorithm::kFedToga ? cfg.participants : cfg.num_clients;
}

}  // namespace detail

/// Runs T communication rounds and logs metrics at round 0, every
/// eval_every rounds, and after the final round. The result is a pure
/// function of the config; RunOptions::threads only changes wall time.
inline MetricsLog run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  const Federation fed = build_federation(cfg);
  const HyperParams base_hp = detail::effective_hyperparams(cfg);
  const std::size_t divisor = detail::dual_divisor(cfg);
  const Stream root(cfg.seed);

  Stream init_rng = root.derive(StreamTag::kInit);
  GlobalState state = GlobalState::initial(init_params(fed.eval_model(), init_rng),
                                           cfg.algorithm == Algorithm::kFedSmoo);
  const std::size_t dim = state.theta.size();
  std::vector<ClientState> clients(cfg.num_clients, ClientState::fresh(dim));

  MetricsLog log;
  log.config_echo = config_to_json(cfg);
  log.run_id = run_id(cfg);

  auto record = [&](std::size_t round) {
    MetricsRow row;
    row.round = round;
    row.train_loss = fed.train_loss(state.theta);
    if (fed.data_free) {
      row.test_loss = row.train_loss;
    } else {
      const auto ev = evaluate(fed.eval_model(), state.theta, fed.test);
      row.test_loss = ev.loss;
      row.test_accuracy = ev.accuracy;
    }
    if (cfg.sharpness.enabled) {
      row.sharpness = sharpness_probe([&](const ParamVector& p) { return fed.train_loss(p); }, state.theta,
                                      cfg.sharpness.rho_probe, cfg.sharpness.n_directions,
                                      root.derive(StreamTag::kProbe).derive(round).key());
    }
    row.grad_norm = norm2(fed.train_grad(state.theta));
    row.delta_norm = norm2(state.delta);
    row.h_norm = norm2(state.h);
    for (double v : {row.train_loss, row.test_loss, row.test_accuracy, row.grad_norm, row.delta_norm, row.h_norm})
      if (!std::isfinite(v)) throw DivergenceError("round " + std::to_string(round) + ": non-finite metric");
    log.rows.push_back(row);
  };
  record(0);

  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const RoundPlan plan = sample_clients(cfg.num_clients, cfg.participants, cfg.seed, t);
    HyperParams hp = base_hp;
    hp.eta_l = base_hp.eta_l * std::pow(base_hp.lr_decay, static_cast<double>(t));
    const Stream round_rng = root.derive(StreamTag::kClient).derive(t);

    using Result = std::pair<ClientReport, ClientState>;
    std::vector<Result> results;
    try {
      results = parallel_map(plan.selected.size(), opts.threads, [&](std::size_t k) -> Result {
        const std::size_t id = plan.selected[k];
        const Stream rng = round_rng.derive(id);
        const ShardView shard = fed.shard_view(id);
        const ModelSpec& model = fed.model_of(id);
        switch (cfg.algorithm) {
          case Algorithm::kFedAvg:
            return {fedavg_local_update(state.theta, shard, model, hp, rng), clients[id]};
          case Algorithm::kFedSam:
            return {fedsam_local_update(state.theta, shard, model, hp, rng), clients[id]};
          case Algorithm::kFedDyn:
            return feddyn_local_update(state.theta, clients[id], shard, model, hp, rng);
          case Algorithm::kFedToga:
            return fedtoga_local_update(state.theta, state.delta, clients[id], shard, model, hp, rng);
          case Algorithm::kFedSmoo:
            return fedsmoo_local_update(state.theta, *state.s, clients[id], shard, model, hp, rng);
          case Algorithm::kFedLesamD:
            return fedlesam_d_local_update(state.theta, clients[id], shard, model, hp, rng);
        }
        throw ContractViolation("unknown algorithm");
      });
    } catch (const DivergenceError& e) {
      throw DivergenceError("round " + std::to_string(t) + ": " + e.what());
    }

    std::vector<ClientReport> reports;
    std::vector<ClientState> before, after;
    reports.reserve(results.size());
    for (std::size_t k = 0; k < results.size(); ++k) {
      const std::size_t id = plan.selected[k];
      reports.push_back(std::move(results[k].first));
      if (opts.observer) before.push_back(clients[id]);
      clients[id] = std::move(results[k].second);
      if (opts.observer) after.push_back(clients[id]);
    }

    GlobalState next;
    switch (cfg.algorithm) {
      case Algorithm::kFedAvg:
      case Algorithm::kFedSam:
        next = fedavg_server_step(state, reports, hp.local_steps);
        break;
      case Algorithm::kFedToga:
        next = hp.prox_enabled ? fedtoga_server_step(state, reports, hp, divisor)
                               : fedavg_server_step(state, reports, hp.local_steps);
        break;
      case Algorithm::kFedDyn:
      case Algorithm::kFedLesamD:
        next = feddyn_server_step(state, reports, hp, divisor);
        break;
      case Algorithm::kFedSmoo:
        next = fedsmoo_server_step(state, reports, hp, divisor);
        break;
    }
    if (!all_finite(next.theta))
      throw DivergenceError("round " + std::to_string(t) + ": global model is not finite");

    if (opts.observer) opts.observer(RoundRecord{t, &plan, &state, &next, reports, before, after});
    state = std::move(next);

    const std::size_t done = t + 1;
    if (done % cfg.eval_every == 0 || done == cfg.rounds) record(done);
  }
  log.final_theta = state.theta;
  return log;
}

}  // namespace fedopt
