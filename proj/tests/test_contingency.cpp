#include <gtest/gtest.h>

#include "flexest/contingency.hpp"
#include "flexest/grid_io.hpp"
#include "oracles.hpp"

using namespace flexest;

TEST(Contingency, CasesMatchConnectivityOracle) {
  for (const char* f : {"2bus", "4bus", "30bus", "100bus"}) {
    const auto net = load_grid(oracle::fixture(f));
    EXPECT_EQ(enumerate_cases(net), oracle::connectivity_cases(net)) << f;
  }
}

TEST(Contingency, CasesSkipOutOfServiceAndBridges) {
  auto net = load_grid(oracle::fixture("30bus"));
  net.lines[3].in_service = false;
  const auto cases = enumerate_cases(net);
  EXPECT_EQ(cases, oracle::connectivity_cases(net));
  EXPECT_EQ(std::count(cases.begin(), cases.end(), 3), 0);
  // a radial spur is never a case
  const auto ring = oracle::three_bus_ring(10.0);
  EXPECT_EQ(enumerate_cases(ring).size(), 3u);
  auto chain = ring;
  chain.lines.pop_back();
  EXPECT_TRUE(enumerate_cases(chain).empty());
}

TEST(Contingency, AnalysisEqualsIndependentSolves) {
  for (const char* f : {"4bus", "30bus"}) {
    const auto net = load_grid(oracle::fixture(f));
    const auto rep = n1_analysis(net, make_scenario(net));
    const auto inj = aggregate_injections(net);
    ASSERT_EQ(rep.line_ids.size(), [&] {
      std::size_t n = 0;
      for (const auto& l : net.lines) n += l.in_service;
      return n;
    }());
    // independent outage copies, started from the base voltages like the
    // analysis does (bitwise) and from flat start (solver tolerance)
    const auto base = solve(make_scenario(net));
    const auto nl = static_cast<Eigen::Index>(rep.line_ids.size());
    Eigen::VectorXd warm = Eigen::VectorXd::Zero(nl), flat = Eigen::VectorXd::Zero(nl);
    for (int c : oracle::connectivity_cases(net)) {
      auto out = net;
      out.lines[c].in_service = false;
      const auto rw = solve(make_scenario(out), base.v);
      const auto rf = solve(make_scenario(out));
      ASSERT_TRUE(rw.converged && rf.converged);
      for (std::size_t j = 0; j < rep.line_ids.size(); ++j) {
        const int id = rep.line_ids[j];
        const auto jj = static_cast<Eigen::Index>(j);
        warm[jj] = std::max(warm[jj], rw.lp[id]);
        flat[jj] = std::max(flat[jj], rf.lp[id]);
      }
    }
    EXPECT_EQ(rep.lp_n1, warm) << f;
    // mismatch tolerance 1e-8 pu leaves ~1e-6 % of slack in loading
    EXPECT_LT((rep.lp_n1 - flat).cwiseAbs().maxCoeff(), 1e-4) << f;
    EXPECT_EQ(rep.non_converged_cases, 0);
  }
}

TEST(Contingency, ThreeBusRingRedistribution) {
  // Lossless ring: after losing 0-2, the full load travels 0-1-2, so the
  // active flow on both remaining lines equals the load.
  const double load = 60.0;
  const auto net = oracle::three_bus_ring(load);
  auto out = net;
  out.lines[2].in_service = false;
  const auto r = solve(make_scenario(out));
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.s_f[0].real() * 100.0, load, 1e-6);
  EXPECT_NEAR(-r.s_t[1].real() * 100.0, load, 1e-6);
  // current through the load bus is |S| / |V|
  const double i_load = (load / 100.0) / std::abs(r.v[2]);
  EXPECT_NEAR(r.i_t[1], i_load, 1e-6);

  // In the intact ring the direct path carries 2/3 of the load in the DC
  // limit; with the small angles here the AC split stays within 1e-3.
  const auto base = solve(make_scenario(net));
  EXPECT_NEAR(-base.s_t[2].real() * 100.0 / load, 2.0 / 3.0, 1e-3);
  EXPECT_NEAR(base.s_f[0].real() * 100.0 / load, 1.0 / 3.0, 1e-3);

  const auto rep = n1_analysis(net, make_scenario(net));
  const auto adm = build_admittances(net);
  EXPECT_NEAR(rep.lp_n1[1], 100.0 * i_load / adm.i_max_pu[1], 1e-6);
  EXPECT_EQ(rep.worst_case[1], 2);
}

TEST(Contingency, ViolationFlag) {
  auto net = oracle::three_bus_ring(60.0);
  const auto ok = n1_analysis(net, make_scenario(net), 100.0);
  EXPECT_FALSE(ok.any_violation);
  for (auto& l : net.lines) l.i_max_ka = 0.2;
  const auto bad = n1_analysis(net, make_scenario(net), 100.0);
  EXPECT_TRUE(bad.any_violation);
  EXPECT_GT(bad.lp_n1.maxCoeff(), 100.0);
}
