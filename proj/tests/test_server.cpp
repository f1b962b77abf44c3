#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fedopt/server.hpp"
#include "support.hpp"

using namespace fedopt;
using testsupport::gaussian;
using testsupport::vec;

namespace {

HyperParams unit_hp() {
  HyperParams hp;
  hp.alpha = 1.0;
  hp.local_steps = 1;
  return hp;
}

std::vector<ClientReport> reports_of(std::initializer_list<ParamVector> thetas) {
  std::vector<ClientReport> out;
  std::size_t id = 0;
  for (const auto& t : thetas) out.push_back(ClientReport{id++, t, std::nullopt});
  return out;
}

}  // namespace

TEST(Sampling, FullParticipation) {
  EXPECT_EQ(sample_clients(5, 5, 123, 7).selected, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Sampling, DeterministicDistinctSorted) {
  for (std::size_t round = 0; round < 200; ++round) {
    const auto a = sample_clients(30, 7, 99, round);
    EXPECT_EQ(a.selected, sample_clients(30, 7, 99, round).selected);
    ASSERT_EQ(a.selected.size(), 7u);
    EXPECT_TRUE(std::is_sorted(a.selected.begin(), a.selected.end()));
    EXPECT_EQ(std::adjacent_find(a.selected.begin(), a.selected.end()), a.selected.end());
    EXPECT_LT(a.selected.back(), 30u);
  }
  EXPECT_NE(sample_clients(30, 7, 99, 0).selected, sample_clients(30, 7, 99, 1).selected);
}

TEST(Sampling, MExceedsNIsConfigError) {
  try {
    sample_clients(10, 20, 0, 0);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("M exceeds N"), std::string::npos);
  }
  EXPECT_THROW(sample_clients(10, 0, 0, 0), ConfigError);
}

TEST(Sampling, UniformFrequencies) {
  const std::size_t rounds = 100000;
  std::vector<double> freq(10, 0.0);
  for (std::size_t t = 0; t < rounds; ++t) freq[sample_clients(10, 1, 5, t).selected[0]] += 1.0;
  const double sigma = std::sqrt(0.1 * 0.9 / static_cast<double>(rounds));
  double chi2 = 0.0;
  for (double f : freq) {
    EXPECT_NEAR(f / static_cast<double>(rounds), 0.1, 3 * sigma);
    chi2 += (f - 10000.0) * (f - 10000.0) / 10000.0;
  }
  EXPECT_LT(chi2, 27.88);  // chi-square, 9 dof, p = 0.001
}

TEST(Sampling, SubsetFrequenciesAreUniform) {
  std::vector<double> freq(8, 0.0);
  for (std::size_t t = 0; t < 40000; ++t)
    for (auto id : sample_clients(8, 3, 17, t).selected) freq[id] += 1.0;
  for (double f : freq) EXPECT_NEAR(f / 40000.0, 3.0 / 8.0, 0.01);
}

TEST(FedTogaServer, ScalarExample) {
  const auto st = GlobalState::initial(vec({1.0}));
  const auto next = fedtoga_server_step(st, reports_of({vec({0.85})}), unit_hp());
  EXPECT_NEAR(next.h[0], 0.15, 1e-15);
  EXPECT_NEAR(next.delta[0], 0.15, 1e-15);
  EXPECT_NEAR(next.theta[0], 0.70, 1e-15);
  EXPECT_EQ(next.round, 1u);
}

TEST(FedTogaServer, FixedPoint) {
  auto st = GlobalState::initial(vec({0.3, -0.4}));
  const auto next = fedtoga_server_step(st, reports_of({vec({0.3, -0.4}), vec({0.3, -0.4})}), unit_hp());
  EXPECT_EQ(next.h, st.h);
  EXPECT_EQ(next.delta, vec({0, 0}));
  EXPECT_EQ(next.theta, st.theta);
}

TEST(FedTogaServer, SymmetricReportsCancel) {
  auto st = GlobalState::initial(vec({1.0, 2.0}));
  const ParamVector v{0.25, -0.5};
  const auto next = fedtoga_server_step(st, reports_of({st.theta + v, st.theta - v}), unit_hp());
  EXPECT_EQ(next.h, vec({0, 0}));
  EXPECT_EQ(next.delta, vec({0, 0}));
  EXPECT_EQ(next.theta, st.theta);
}

TEST(FedTogaServer, EmptyOrMalformedReportsAreProtocolErrors) {
  auto st = GlobalState::initial(vec({1.0}));
  EXPECT_THROW(fedtoga_server_step(st, std::vector<ClientReport>{}, unit_hp()), ProtocolError);
  EXPECT_THROW(fedtoga_server_step(st, reports_of({vec({1.0, 2.0})}), unit_hp()), ProtocolError);
  std::vector<ClientReport> dup{{3, vec({1.0}), {}}, {3, vec({2.0}), {}}};
  EXPECT_THROW(fedavg_server_step(st, dup), ProtocolError);
}

TEST(FedTogaServer, LinearIdentitiesOnRandomInputs) {
  Stream rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t d = 1 + rng.below(6), m = 1 + rng.below(8);
    HyperParams hp;
    hp.alpha = std::exp(rng.uniform(-3, 1));
    hp.local_steps = 1 + rng.below(10);
    GlobalState st = GlobalState::initial(gaussian(rng, d));
    st.h = gaussian(rng, d, 0.3);
    std::vector<ClientReport> reports;
    ParamVector disp = ParamVector::zeros(d), mean = ParamVector::zeros(d);
    for (std::size_t i = 0; i < m; ++i) {
      reports.push_back(ClientReport{i, st.theta + gaussian(rng, d, 0.2), std::nullopt});
      disp += reports.back().theta_out - st.theta;
      mean += reports.back().theta_out;
    }
    mean *= 1.0 / static_cast<double>(m);
    const auto next = fedtoga_server_step(st, reports, hp);
    const double mk = static_cast<double>(m * hp.local_steps);
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_NEAR(next.theta[j] - mean[j] + hp.alpha * next.h[j], 0.0, 1e-12);
      EXPECT_NEAR(next.delta[j] * mk + disp[j], 0.0, 1e-12);
    }
  }
}

TEST(FedTogaServer, GlobalUpdateIdentityIsExactForPowerOfTwoMK) {
  Stream rng(32);
  HyperParams hp;
  hp.local_steps = 2;
  for (int trial = 0; trial < 200; ++trial) {
    GlobalState st = GlobalState::initial(gaussian(rng, 4));
    std::vector<ClientReport> reports;
    for (std::size_t i = 0; i < 4; ++i) reports.push_back(ClientReport{i, st.theta + gaussian(rng, 4), std::nullopt});
    const auto agg = detail::aggregate(st.theta, reports);
    const auto next = fedtoga_server_step(st, reports, hp);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(next.delta[j] * 8.0 + agg.displacement_sum[j], 0.0);
  }
}

TEST(FedAvgServer, Examples) {
  auto st = GlobalState::initial(vec({1.0}));
  EXPECT_DOUBLE_EQ(fedavg_server_step(st, reports_of({vec({0.8}), vec({1.2})})).theta[0], 1.0);
  EXPECT_EQ(fedavg_server_step(st, reports_of({vec({0.37})})).theta, vec({0.37}));
  const auto next = fedavg_server_step(st, reports_of({vec({0.8}), vec({0.6})}), 2);
  EXPECT_NEAR(next.delta[0], 0.15, 1e-15);  // diagnostic only
  EXPECT_EQ(next.h, st.h);
}

TEST(ServerProperties, PermutationInvariantBitwise) {
  Stream rng(33);
  HyperParams hp;
  GlobalState st = GlobalState::initial(gaussian(rng, 5), true);
  st.h = gaussian(rng, 5);
  std::vector<ClientReport> reports;
  for (std::size_t i = 0; i < 9; ++i)
    reports.push_back(ClientReport{i * 3 + 1, gaussian(rng, 5), gaussian(rng, 5)});
  auto shuffled = reports;
  for (int trial = 0; trial < 20; ++trial) {
    rng.shuffle(shuffled);
    EXPECT_EQ(fedavg_server_step(st, shuffled).theta, fedavg_server_step(st, reports).theta);
    const auto a = fedtoga_server_step(st, shuffled, hp), b = fedtoga_server_step(st, reports, hp);
    EXPECT_EQ(a.theta, b.theta);
    EXPECT_EQ(a.h, b.h);
    EXPECT_EQ(a.delta, b.delta);
    EXPECT_EQ(feddyn_server_step(st, shuffled, hp, 30).theta, feddyn_server_step(st, reports, hp, 30).theta);
    const auto c = fedsmoo_server_step(st, shuffled, hp, 30), d = fedsmoo_server_step(st, reports, hp, 30);
    EXPECT_EQ(c.theta, d.theta);
    EXPECT_EQ(*c.s, *d.s);
  }
}

TEST(FedDynServer, Examples) {
  auto st = GlobalState::initial(vec({1.0}));
  const auto next = feddyn_server_step(st, reports_of({vec({0.9})}), unit_hp(), 2);
  EXPECT_NEAR(next.h[0], 0.05, 1e-15);
  EXPECT_NEAR(next.theta[0], 0.85, 1e-15);

  st.h = vec({0.2});
  const auto still = feddyn_server_step(st, reports_of({vec({1.0}), vec({1.0})}), unit_hp(), 5);
  EXPECT_EQ(still.h, st.h);
  EXPECT_NEAR(still.theta[0], 1.0 - 0.2, 1e-15);
}

TEST(FedDynServer, DivisorNVersusMScalesTheDualStepByNOverM) {
  Stream rng(34);
  HyperParams hp;
  GlobalState st = GlobalState::initial(gaussian(rng, 3));
  std::vector<ClientReport> reports;
  for (std::size_t i = 0; i < 4; ++i) reports.push_back(ClientReport{i, st.theta + gaussian(rng, 3), std::nullopt});
  const auto by_n = feddyn_server_step(st, reports, hp, 20);
  const auto by_m = fedtoga_server_step(st, reports, hp);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(by_m.h[j], by_n.h[j] * 20.0 / 4.0, 1e-12);
  const auto explicit_m = feddyn_server_step(st, reports, hp, 4);
  EXPECT_EQ(explicit_m.h, by_m.h);
  EXPECT_EQ(explicit_m.theta, by_m.theta);
}

TEST(FedSmooServer, Examples) {
  HyperParams hp;
  hp.rho = 0.2;
  auto st = GlobalState::initial(vec({0, 0}), true);
  std::vector<ClientReport> zero{{0, vec({0, 0}), vec({0, 0})}, {1, vec({0, 0}), vec({0, 0})}};
  EXPECT_EQ(*fedsmoo_server_step(st, zero, hp, 2).s, vec({0, 0}));

  std::vector<ClientReport> two{{0, vec({0, 0}), vec({1, 0})}, {1, vec({0, 0}), vec({0, 1})}};
  const auto s2 = *fedsmoo_server_step(st, two, hp, 2).s;
  EXPECT_NEAR(s2[0], 0.1414214, 1e-6);
  EXPECT_NEAR(s2[1], 0.1414214, 1e-6);

  hp.rho = 0.1;
  std::vector<ClientReport> one{{0, vec({0, 0}), vec({3, 4})}};
  const auto s1 = *fedsmoo_server_step(st, one, hp, 1).s;
  EXPECT_NEAR(s1[0], 0.06, 1e-15);
  EXPECT_NEAR(s1[1], 0.08, 1e-15);
}

TEST(FedSmooServer, MissingExtraIsProtocolError) {
  HyperParams hp;
  auto st = GlobalState::initial(vec({0, 0}), true);
  std::vector<ClientReport> bad{{0, vec({0, 0}), vec({1, 0})}, {1, vec({0, 0}), std::nullopt}};
  EXPECT_THROW(fedsmoo_server_step(st, bad, hp, 2), ProtocolError);
}
