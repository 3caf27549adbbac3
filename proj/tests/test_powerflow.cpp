#include <gtest/gtest.h>

#include <random>

#include "flexest/grid_io.hpp"
#include "flexest/powerflow.hpp"
#include "oracles.hpp"

using namespace flexest;

namespace {

Eigen::VectorXcd mismatch(const Network& net, const PfResult& r) {
  const auto y = oracle::dense_ybus(net);
  const Eigen::VectorXcd s = r.v.cwiseProduct((y * r.v).conjugate());
  return s - oracle::injections(net);
}

// Random scenarios around the network's own state.
std::vector<Scenario> random_scenarios(const Network& net, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.6, 1.3);
  const auto adm = std::make_shared<const AdmittanceSet>(build_admittances(net));
  std::vector<Scenario> out;
  for (int i = 0; i < n; ++i) {
    Network m = net;
    for (auto& l : m.loads) {
      l.p_mw *= u(rng);
      l.q_mvar *= u(rng);
    }
    for (auto& d : m.ders) d.p_set_mw *= u(rng) / 1.3;
    m.ext_grid.v_pu = 0.98 + 0.04 * (u(rng) - 0.6) / 0.7;
    out.push_back(make_scenario(m, adm));
  }
  return out;
}

}  // namespace

class PowerFlowOracle : public ::testing::TestWithParam<const char*> {};

TEST_P(PowerFlowOracle, MatchesGaussSeidel) {
  const auto net = load_grid(oracle::fixture(GetParam()));
  const auto r = solve(make_scenario(net));
  ASSERT_TRUE(r.converged) << r.diagnostic;
  const auto gs = oracle::gauss_seidel(net);
  ASSERT_TRUE(gs.converged);
  EXPECT_LT((r.v - gs.v).cwiseAbs().maxCoeff(), 1e-6);

  const auto mis = mismatch(net, r);
  for (Eigen::Index b = 0; b < mis.size(); ++b) {
    if (b == net.ext_grid.bus) continue;
    EXPECT_LT(std::abs(mis[b].real()), 1e-8);
    EXPECT_LT(std::abs(mis[b].imag()), 1e-8);
  }
  // generation + injections = series and shunt losses of all branches
  const auto y = oracle::dense_ybus(net);
  const Eigen::VectorXcd s = r.v.cwiseProduct((y * r.v).conjugate());
  std::complex<double> losses = 0.0;
  for (Eigen::Index k = 0; k < r.s_f.size(); ++k) losses += r.s_f[k] + r.s_t[k];
  EXPECT_LT(std::abs(s.sum() - losses), 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Fixtures, PowerFlowOracle, ::testing::Values("2bus", "4bus", "30bus", "100bus"));

TEST(PowerFlow, TwoBusClosedForm) {
  const auto net = oracle::two_bus(40.0, 0.0);
  const auto r = solve(make_scenario(net));
  ASSERT_TRUE(r.converged);
  const double zb = 110.0 * 110.0 / 100.0;
  EXPECT_NEAR(std::abs(r.v[1]), oracle::two_bus_voltage(1.0, 2.0 / zb, 8.0 / zb, 0.4, 0.0), 1e-10);
}

TEST(PowerFlow, BranchQuantities) {
  const auto net = load_grid(oracle::fixture("30bus"));
  const auto r = solve(make_scenario(net));
  ASSERT_TRUE(r.converged);
  const auto ports = oracle::two_ports(net);
  const auto adm = build_admittances(net);
  for (std::size_t k = 0; k < ports.size(); ++k) {
    const auto& tp = ports[k];
    const auto i_f = tp.a * r.v[tp.f] + tp.b * r.v[tp.t];
    const auto i_t = tp.c * r.v[tp.f] + tp.d * r.v[tp.t];
    const auto kk = static_cast<Eigen::Index>(k);
    EXPECT_NEAR(r.i_f[kk], std::abs(i_f), 1e-12);
    EXPECT_NEAR(r.lp[kk], 100.0 * std::max(std::abs(i_f), std::abs(i_t)) / adm.i_max_pu[k], 1e-9);
  }
  double p = 0.0;
  for (std::size_t t = 0; t < net.transformers.size(); ++t)
    if (net.transformers[t].is_interface) p -= r.s_f[static_cast<Eigen::Index>(net.lines.size() + t)].real();
  EXPECT_NEAR(r.interface_p_mw, 100.0 * p, 1e-9);
}

TEST(PowerFlow, InterfaceSignTowardExternalGrid) {
  // Excess generation in the subgrid flows up to the external grid.
  auto net = load_grid(oracle::fixture("4bus"));
  for (auto& l : net.loads) l.p_mw = l.q_mvar = 0.0;
  const auto r = solve(make_scenario(net));
  ASSERT_TRUE(r.converged);
  EXPECT_GT(r.interface_p_mw, 0.0);
  EXPECT_LT(r.interface_p_mw, net.ders[0].p_set_mw + net.ders[1].p_set_mw);
}

TEST(PowerFlow, NonConvergenceIsReported) {
  const auto net = oracle::two_bus(5000.0, 0.0);
  const auto r = solve(make_scenario(net));
  EXPECT_FALSE(r.converged);
  EXPECT_FALSE(r.diagnostic.empty());
}

TEST(PowerFlow, WarmStartConverges) {
  const auto net = load_grid(oracle::fixture("30bus"));
  const auto sc = make_scenario(net);
  const auto cold = solve(sc);
  const auto warm = solve(sc, cold.v);
  ASSERT_TRUE(warm.converged);
  EXPECT_LE(warm.iterations, 1);
  EXPECT_LT((warm.v - cold.v).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(PowerFlow, BatchEqualsSequentialAcrossThreads) {
  const auto net = load_grid(oracle::fixture("30bus"));
  const auto scenarios = random_scenarios(net, 200, 11);
  const auto one = batch_solve(scenarios, {}, 1);
  const auto four = batch_solve(scenarios, {}, 4);
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    const auto seq = solve(scenarios[i]);
    EXPECT_EQ(one[i].v, seq.v);
    EXPECT_EQ(four[i].v, seq.v);
    EXPECT_EQ(one[i].converged, seq.converged);
    EXPECT_EQ(four[i].lp, seq.lp);
  }
}

TEST(PowerFlow, TapRaisesLvVoltage) {
  // HV-side ratio n > 1 lowers the LV voltage for the same load.
  auto net = load_grid(oracle::fixture("4bus"));
  const double base = std::abs(solve(make_scenario(net)).v[1]);
  net.transformers[0].tap_pos += 3;
  const double tapped = std::abs(solve(make_scenario(net)).v[1]);
  EXPECT_LT(tapped, base);
  const auto gs = oracle::gauss_seidel(net);
  EXPECT_NEAR(tapped, std::abs(gs.v[1]), 1e-6);
}
