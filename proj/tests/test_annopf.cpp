#include <gtest/gtest.h>

#include <random>

#include "flexest/annopf.hpp"
#include "flexest/grid_io.hpp"
#include "oracles.hpp"

using namespace flexest;

namespace {

DispatchProblem problem_for(const Network& net, double r_p = 0.5, double r_q = 0.5) {
  const auto b = flex_bounds(net);
  EXPECT_TRUE(b.has_value());
  return make_problem(net, nullptr, resolve_requirement(r_p, r_q, *b), *b);
}

// Mean augmented loss of a model over problems, evaluated from scratch.
double model_loss(const Mlp& m, const Eigen::MatrixXd& x, const std::vector<DispatchProblem>& problems,
                  const AugLossConfig& cfg) {
  const Eigen::MatrixXd a = forward(m, x);
  double sum = 0.0;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    const auto sp = scale_actions(*problems[i].net, a.col(static_cast<Eigen::Index>(i)));
    const auto r = solve(problems[i].scenario(sp));
    sum += augmented_loss(r, *problems[i].net, problems[i].req, problems[i].bounds, cfg).total;
  }
  return sum / static_cast<double>(problems.size());
}

}  // namespace

TEST(AnnOpf, ApplyStatusSemantics) {
  const auto net = load_grid(oracle::fixture("4bus"));
  auto s = status_of(net);
  EXPECT_EQ(apply_status(net, s), net);
  s.der_avail << 20.0, 3.0;
  s.load_p[0] = 12.0;
  const auto n = apply_status(net, s);
  EXPECT_EQ(n.ders[0].p_set_mw, 20.0);  // controllable clipped to availability
  EXPECT_EQ(n.ders[1].p_set_mw, 3.0);   // uncontrollable follows availability
  EXPECT_EQ(n.loads[0].p_mw, 12.0);
  s.taps = {99};
  EXPECT_THROW(apply_status(net, s), ValidationError);
}

TEST(AnnOpf, ScaleActionsEndpoints) {
  const auto net = load_grid(oracle::fixture("4bus"));
  const auto& d = net.ders[0];
  Eigen::VectorXd a(2);
  a << -1.0, -1.0;
  auto sp = scale_actions(net, a);
  // actions are clamped just inside the open interval
  EXPECT_NEAR(sp.p_mw[0], 0.0, 1e-7);
  EXPECT_NEAR(sp.q_mvar[0], 0.0, 1e-7);  // no reactive capability at zero output
  a << 1.0, 1.0;
  sp = scale_actions(net, a);
  EXPECT_NEAR(sp.p_mw[0], d.p_avail_mw, 1e-7);
  EXPECT_NEAR(sp.q_mvar[0], d.q_frac * d.p_inst_mw, 1e-7);
  a << 0.0, 0.0;
  sp = scale_actions(net, a);
  EXPECT_DOUBLE_EQ(sp.p_mw[0], d.p_avail_mw / 2.0);
  EXPECT_NEAR(sp.q_mvar[0], 0.0, 1e-12);
  EXPECT_THROW(scale_actions(net, Eigen::VectorXd(3)), ValidationError);
}

TEST(AnnOpf, ScaleActionsNeverViolateDeviceLimits) {
  auto net = load_grid(oracle::fixture("30bus"));
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> act(-3.0, 3.0), frac(0.0, 1.0);
  const auto ctrl = net.controllable_ders();
  for (int it = 0; it < 20000; ++it) {
    if (it % 50 == 0)
      for (int k : ctrl) {
        auto& d = net.ders[k];
        d.p_avail_mw = frac(rng) < 0.1 ? 0.0 : frac(rng) * d.p_inst_mw;
        d.p_set_mw = d.q_set_mvar = 0.0;
      }
    Eigen::VectorXd a(static_cast<Eigen::Index>(2 * ctrl.size()));
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = act(rng);
    const auto sp = scale_actions(net, a);
    for (std::size_t k = 0; k < ctrl.size(); ++k) {
      const auto& d = net.ders[ctrl[k]];
      const auto kk = static_cast<Eigen::Index>(k);
      ASSERT_GE(sp.p_mw[kk], 0.0);
      ASSERT_LE(sp.p_mw[kk], std::min(d.p_avail_mw, d.p_inst_mw));
      const auto [lo, hi] = der_q_limits(d, sp.p_mw[kk]);
      ASSERT_GE(sp.q_mvar[kk], lo - 1e-12);
      ASSERT_LE(sp.q_mvar[kk], hi + 1e-12);
    }
    Network applied = net;
    apply_setpoints(applied, sp);
    ASSERT_NO_THROW(validate(applied));
  }
}

TEST(AnnOpf, FlexBoundsFromProbes) {
  const auto net = load_grid(oracle::fixture("4bus"));
  const auto b = flex_bounds(net);
  ASSERT_TRUE(b);
  EXPECT_TRUE(b->valid());
  auto full = net;
  full.ders[0].p_set_mw = full.ders[0].p_avail_mw;
  full.ders[0].q_set_mvar = 0.0;
  auto none = full;
  none.ders[0].p_set_mw = 0.0;
  const double p_full = solve(make_scenario(full)).interface_p_mw;
  const double p_none = solve(make_scenario(none)).interface_p_mw;
  EXPECT_DOUBLE_EQ(b->p_t_max, std::max(p_full, p_none));
  EXPECT_DOUBLE_EQ(b->p_t_min, std::min(p_full, p_none));
  const auto req = resolve_requirement(0.25, 1.0, *b);
  EXPECT_DOUBLE_EQ(req.p_sp_mw, b->p_t_min + 0.25 * (b->p_t_max - b->p_t_min));
  EXPECT_DOUBLE_EQ(req.q_sp_mvar, b->q_t_max);
  EXPECT_THROW(resolve_requirement(1.2, 0.0, *b), ValidationError);
}

TEST(AnnOpf, PenaltiesAndAugmentedLossFormula) {
  const auto net = load_grid(oracle::fixture("4bus"));
  PfResult r = solve(make_scenario(net));
  r.v[1] = std::polar(1.12, 0.01);   // 0.02 above vmax
  r.v[2] = std::polar(0.85, -0.02);  // 0.05 below vmin
  r.lp[1] = 104.0;
  r.lp[3] = 130.0;
  AugLossConfig cfg;
  EXPECT_EQ(cfg.w_v, 100.0);
  EXPECT_EQ(cfg.w_lp, 1.0);
  const auto p = penalties(r, net, cfg);
  EXPECT_NEAR(p.l_v, 0.07, 1e-12);
  EXPECT_NEAR(p.l_lp, 34.0, 1e-12);

  const FlexBounds b{-10.0, 30.0, -20.0, 20.0};
  PqRequirement req{0.5, 0.5, 5.0, 1.0};
  const auto l = augmented_loss(r, net, req, b, cfg);
  const double obj = std::abs(r.interface_p_mw - 5.0) / 40.0 + std::abs(r.interface_q_mvar - 1.0) / 40.0;
  EXPECT_NEAR(l.objective, obj, 1e-12);
  EXPECT_NEAR(l.total, obj + 100.0 * 0.07 + 1.0 * 34.0, 1e-10);

  cfg.penalize = false;
  EXPECT_NEAR(augmented_loss(r, net, req, b, cfg).total, obj, 1e-12);
  cfg.penalize = true;

  // soft terms: frozen-loading line target and a margin-shifted bus band
  SoftMarks marks;
  marks.lines.push_back({0, 60.0, 5.0});
  marks.buses.push_back({3, true});
  r.lp[0] = 58.0;
  r.v[3] = std::polar(1.095, 0.0);
  const auto s = augmented_loss(r, net, req, b, cfg, &marks);
  EXPECT_NEAR(s.soft_lp, 58.0 - 55.0, 1e-12);
  EXPECT_NEAR(s.soft_v, 1.095 - (1.10 - 0.01), 1e-12);
  EXPECT_NEAR(s.total, l.total + 1.0 * 3.0 + 100.0 * 0.005, 1e-9);

  r.converged = false;
  const auto nc = augmented_loss(r, net, req, b, cfg);
  EXPECT_EQ(nc.total, 10.0 * cfg.w_v);
  EXPECT_FALSE(nc.converged);
}

TEST(AnnOpf, ExtremalObjectives) {
  PfResult r;
  r.interface_p_mw = 10.0;
  r.interface_q_mvar = -5.0;
  const FlexBounds b{0.0, 20.0, -10.0, 10.0};
  EXPECT_DOUBLE_EQ(objective_value(r, {}, b, ObjectiveMode::max_p), 0.5);
  EXPECT_DOUBLE_EQ(objective_value(r, {}, b, ObjectiveMode::max_q), 0.75);
  EXPECT_DOUBLE_EQ(objective_value(r, {}, b, ObjectiveMode::min_q), 0.25);
  EXPECT_THROW(parse_objective_mode("max-z"), ValidationError);
}

TEST(AnnOpf, ActionGradientStepHalvingConsistency) {
  for (const char* f : {"4bus", "30bus"}) {
    const auto net = load_grid(oracle::fixture(f));
    const auto p = problem_for(net, 0.3, 0.7);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-0.6, 0.6);
    Eigen::VectorXd a(p.action_size());
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = u(rng);
    GradientOptions o1, o2;
    o1.step = 1e-3;
    o2.step = 1e-4;
    const AugLossConfig cfg;
    const auto g1 = action_gradients(p, a, cfg, {}, o1);
    const auto g2 = action_gradients(p, a, cfg, {}, o2);
    ASSERT_GT(g2.norm(), 0.0);
    EXPECT_LT((g1 - g2).norm() / g2.norm(), 1e-3) << f;
  }
}

TEST(AnnOpf, ActionGradientMatchesDirectDifference) {
  const auto net = load_grid(oracle::fixture("4bus"));
  const auto p = problem_for(net, 0.8, 0.2);
  Eigen::VectorXd a(2);
  a << 0.2, -0.3;
  const AugLossConfig cfg;
  const auto g = action_gradients(p, a, cfg);
  for (Eigen::Index i = 0; i < 2; ++i) {
    auto up = a, dn = a;
    up[i] += 1e-3;
    dn[i] -= 1e-3;
    auto f = [&](const Eigen::VectorXd& x) {
      const auto r = solve(p.scenario(scale_actions(*p.net, x)));
      return augmented_loss(r, *p.net, p.req, p.bounds, cfg).total;
    };
    EXPECT_NEAR(g[i], (f(up) - f(dn)) / 2e-3, 1e-8);
  }
}

TEST(AnnOpf, EndToEndParameterGradient) {
  const auto net = load_grid(oracle::fixture("4bus"));
  const auto prof = load_profiles(oracle::fixture("4bus") + "/profiles.csv");
  SampleConfig sc;
  sc.n_req_per_step = 1;
  sc.seed = 5;
  auto samples = generate_samples(net, prof, sc).samples;
  samples.resize(6);
  Mlp m = make_annopf(net, samples, 3, 1, 8);
  ASSERT_LE(m.parameter_count(), 50);
  const auto problems = make_problems(net, samples);
  const Eigen::MatrixXd x = m.input.apply(sample_features(samples));
  const AugLossConfig cfg;

  std::vector<const DispatchProblem*> pp;
  for (const auto& p : problems) pp.push_back(&p);
  GradientOptions go;
  go.step = 1e-4;
  const auto evals = action_gradients(pp, forward(m, x), cfg, go);
  Eigen::MatrixXd dl(m.outputs(), x.cols());
  for (std::size_t i = 0; i < evals.size(); ++i) dl.col(static_cast<Eigen::Index>(i)) = evals[i].grad / 6.0;
  Mlp stepped = m;
  AdamState st;
  const auto g = backprop_action_grads(stepped, x, dl, st, {}).flat();
  EXPECT_NE(stepped, m);

  const auto theta = m.parameters();
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    auto up = theta, dn = theta;
    up[i] += 1e-5;
    dn[i] -= 1e-5;
    Mlp a = m, b = m;
    a.set_parameters(up);
    b.set_parameters(dn);
    const double fd = (model_loss(a, x, problems, cfg) - model_loss(b, x, problems, cfg)) / 2e-5;
    EXPECT_NEAR(g[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "param " << i;
  }
}

TEST(AnnOpf, SampleGenerationIsSeeded) {
  const auto net = load_grid(oracle::fixture("4bus"));
  const auto prof = load_profiles(oracle::fixture("4bus") + "/profiles.csv");
  SampleConfig sc;
  sc.n_req_per_step = 3;
  sc.seed = 9;
  const auto a = generate_samples(net, prof, sc, 1);
  const auto b = generate_samples(net, prof, sc, 3);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.samples.size() + static_cast<std::size_t>(a.dropped), 3 * prof.size());
  for (const auto& s : a.samples) {
    EXPECT_TRUE(s.bounds.valid());
    EXPECT_GE(s.req.r_p, 0.0);
    EXPECT_LE(s.req.r_p, 1.0);
    for (Eigen::Index k = 0; k < s.status.der_avail.size(); ++k)
      EXPECT_LE(s.status.der_avail[k], net.ders[static_cast<std::size_t>(k)].p_inst_mw);
  }
}

TEST(AnnOpf, Stage1TrainingReducesLossDeterministically) {
  const auto net = load_grid(oracle::fixture("4bus"));
  const auto prof = load_profiles(oracle::fixture("4bus") + "/profiles.csv");
  SampleConfig sc;
  sc.n_req_per_step = 2;
  const auto samples = generate_samples(net, prof, sc).samples;
  Mlp a = make_annopf(net, samples, 32, 1, 1);
  Mlp b = a;
  TrainConfig tc;
  tc.epochs = 15;
  tc.batch_size = 16;
  tc.learning_rate = 3e-3;
  const auto la = train_stage1(a, net, samples, {}, tc);
  const auto lb = train_stage1(b, net, samples, {}, tc);
  EXPECT_EQ(a, b);
  EXPECT_LT(la.back().loss, la.front().loss);
  EXPECT_EQ(la.size(), 15u);
}

TEST(AnnOpf, BaselineCongestionFreeUsesFullAvailability) {
  const auto net = load_grid(oracle::fixture("4bus"));
  const auto p = problem_for(net);
  const auto res = baseline_optimize(p, {}, ObjectiveMode::max_p);
  ASSERT_TRUE(res.feasible);
  for (std::size_t k = 0; k < p.ctrl.size(); ++k)
    EXPECT_NEAR(res.setpoints.p_mw[static_cast<Eigen::Index>(k)], p.net->ders[p.ctrl[k]].p_avail_mw, 1e-6);
  // probes fix Q at zero; the optimizer may trim losses through Q
  EXPECT_GE(res.result.interface_p_mw, p.bounds.p_t_max - 1e-6);
}

TEST(AnnOpf, BaselineCurtailsBehindCongestion) {
  auto net = load_grid(oracle::fixture("4bus"));
  // DER at bus 3 feeds through lines 1 and 2; make them the bottleneck
  net.lines[1].i_max_ka = 0.06;
  net.lines[2].i_max_ka = 0.06;
  const auto p = problem_for(net);
  const auto res = baseline_optimize(p, {}, ObjectiveMode::max_p);
  ASSERT_TRUE(res.feasible);
  EXPECT_LT(res.setpoints.p_mw[0], p.net->ders[0].p_avail_mw - 1.0);
  EXPECT_EQ(res.loss.l_lp, 0.0);
  EXPECT_GT(res.result.lp.maxCoeff(), 97.0);
}

TEST(AnnOpf, BaselineRequirementMode) {
  const auto net = load_grid(oracle::fixture("4bus"));
  const auto p = problem_for(net, 0.4, 0.6);
  const auto res = baseline_optimize(p, {}, ObjectiveMode::requirement);
  ASSERT_TRUE(res.feasible);
  EXPECT_LT(res.loss.objective, 0.02);
}
