#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fedopt/client.hpp"
#include "fedopt/harness.hpp"

namespace fedopt {

namespace detail {

inline ParamVector random_vector(Stream& rng, std::size_t n, double scale = 1.0) {
  ParamVector v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

inline Batch random_batch(Stream& rng, std::size_t n, std::size_t dim, std::size_t classes) {
  Batch b;
  b.dim = dim;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x(dim);
    for (auto& v : x) v = rng.normal();
    b.push_back(x, static_cast<int>(rng.below(classes)));
  }
  return b;
}

}  // namespace detail

/// Quick invariant checks for `fedopt selftest`. Prints one line per check.
inline bool run_selftest(std::ostream& out) {
  struct Check {
    const char* name;
    std::function<bool()> fn;
  };
  const std::vector<Check> checks = {
      {"normalize_to_radius has norm rho",
       [] {
         Stream rng(11);
         for (int i = 0; i < 1000; ++i) {
           const auto v = detail::random_vector(rng, 1 + rng.below(20), std::exp(rng.uniform(-5, 5)));
           const double rho = rng.uniform(0.01, 2.0);
           if (std::abs(norm2(normalize_to_radius(v, rho)) - rho) > 1e-10 * rho) return false;
         }
         return true;
       }},
      {"perturbation norm is 0 or rho",
       [] {
         Stream rng(12);
         const PerturbationMode modes[] = {PerturbationMode::kPlain, PerturbationMode::kToga,
                                           PerturbationMode::kNeighborhood, PerturbationMode::kFusion};
         for (int i = 0; i < 1000; ++i) {
           const std::size_t d = 1 + rng.below(8);
           HyperParams hp;
           hp.perturbation_mode = modes[rng.below(4)];
           hp.rho = rng.uniform() < 0.1 ? 0.0 : rng.uniform(0.001, 1.0);
           hp.kappa = rng.uniform(0.0, 3.0);
           std::optional<ParamVector> cached;
           if (rng.uniform() < 0.5) cached = detail::random_vector(rng, d);
           const auto p = compute_perturbation(detail::random_vector(rng, d), cached, detail::random_vector(rng, d), hp);
           const double n = norm2(p);
           if (!(n == 0.0 || std::abs(n - hp.rho) <= 1e-10)) return false;
         }
         return true;
       }},
      {"analytic gradients match finite differences",
       [] {
         Stream rng(13);
         const std::vector<ModelSpec> models = {
             ModelSpec::quadratic({2.0, 0.5, 0.5, 1.0}, {0.3, -0.2}), ModelSpec::logistic(3, 2, true),
             ModelSpec::logistic(3, 4, true), ModelSpec::mlp({3, 5, 3})};
         for (const auto& m : models) {
           for (int i = 0; i < 5; ++i) {
             const auto p = detail::random_vector(rng, m.parameter_count(), 0.5);
             const Batch b = m.is_quadratic() ? Batch{} : detail::random_batch(rng, 7, 3, m.num_classes());
             const auto g = grad(m, p, b);
             const auto fd = finite_diff_grad(m, p, b);
             if (norm_inf(g - fd) / (1.0 + norm_inf(g)) > 1e-4) return false;
           }
         }
         return true;
       }},
      {"reductions: FedSAM(rho=0) == FedAvg, FedTOGA(0,0,0) == FedDyn",
       [] {
         const Dataset ds = gen_synthetic_classification(3, 120, 4, 3, 2.0);
         std::vector<std::size_t> idx(ds.size());
         for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
         const ShardView shard{0, &ds, idx};
         const ModelSpec m = ModelSpec::mlp({4, 6, 3});
         Stream init(5);
         const ParamVector theta = init_params(m, init);
         HyperParams hp;
         hp.local_steps = 4;
         hp.batch_size = 16;
         hp.rho = 0.0;
         hp.kappa = 0.0;
         hp.beta = 0.0;
         const Stream rng(99);
         if (!(fedsam_local_update(theta, shard, m, hp, rng).theta_out ==
               fedavg_local_update(theta, shard, m, hp, rng).theta_out))
           return false;
         ClientState st = ClientState::fresh(theta.size());
         st.h = ParamVector(theta.size(), 0.01);
         const ParamVector delta(theta.size(), 0.2);
         const auto a = fedtoga_local_update(theta, delta, st, shard, m, hp, rng);
         const auto b = feddyn_local_update(theta, st, shard, m, hp, rng);
         return a.first.theta_out == b.first.theta_out && a.second.h == b.second.h;
       }},
      {"experiments are deterministic",
       [] {
         ExperimentConfig cfg;
         cfg.model.kind = ModelKind::kLogistic;
         cfg.data.n_samples = 200;
         cfg.num_clients = 4;
         cfg.participants = 2;
         cfg.rounds = 6;
         cfg.eval_every = 2;
         const auto a = run_experiment(cfg);
         const auto b = run_experiment(cfg, RunOptions{4, {}});
         return a.final_theta == b.final_theta && a.rows.size() == b.rows.size();
       }},
  };

  bool ok = true;
  for (const auto& c : checks) {
    bool pass = false;
    try {
      pass = c.fn();
    } catch (const std::exception& e) {
      out << "  exception: " << e.what() << '\n';
    }
    out << (pass ? "[PASS] " : "[FAIL] ") << c.name << '\n';
    ok = ok && pass;
  }
  return ok;
}

}  // namespace fedopt
