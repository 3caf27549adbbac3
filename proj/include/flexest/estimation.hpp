#pragma once

// PQ-area estimation: sweep a requirement grid through the trained agent,
// verify hard constraints by power flow and screen soft constraints.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "flexest/annopf.hpp"
#include "flexest/approximators.hpp"
#include "flexest/errors.hpp"
#include "flexest/neural.hpp"
#include "flexest/powerflow.hpp"

namespace flexest {

enum class PointClass { feasible, hard_violation, soft_violation, non_convergent };

inline std::string to_string(PointClass c) {
  switch (c) {
    case PointClass::feasible: return "feasible";
    case PointClass::hard_violation: return "hard_violation";
    case PointClass::soft_violation: return "soft_violation";
    case PointClass::non_convergent: return "non_convergent";
  }
  return "non_convergent";
}

struct AreaPoint {
  PqRequirement req;
  DerSetpoints setpoints;
  double achieved_p_mw = 0.0;
  double achieved_q_mvar = 0.0;
  PointClass cls = PointClass::non_convergent;
  std::string detail;  // violated quantities, ';'-separated
};

struct PqArea {
  std::vector<AreaPoint> points;
  int n = 0;
  FlexBounds bounds;
  double prediction_ms = 0.0;
  double postprocessing_ms = 0.0;
  std::vector<std::pair<double, double>> hull;  // feasible achieved (P, Q), counter-clockwise

  [[nodiscard]] int count(PointClass c) const {
    return static_cast<int>(std::count_if(points.begin(), points.end(), [c](const AreaPoint& p) { return p.cls == c; }));
  }
};

/// n x n equally spaced (r_p, r_q) in [0, 1]^2, r_p as the outer index.
inline std::vector<std::pair<double, double>> requirement_grid(int n) {
  if (n < 2) throw ValidationError("requirement grid needs n >= 2");
  std::vector<std::pair<double, double>> g;
  g.reserve(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g.emplace_back(static_cast<double>(i) / (n - 1), static_cast<double>(j) / (n - 1));
  return g;
}

/// Convex hull (monotone chain), counter-clockwise without repeating the first point.
inline std::vector<std::pair<double, double>> convex_hull(std::vector<std::pair<double, double>> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  auto cross = [](const auto& o, const auto& a, const auto& b) {
    return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
  };
  std::vector<std::pair<double, double>> h(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], p) <= 0) --k;
    h[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  return h;
}

/// Hard check by the solved flow, then the soft screen on the remaining
/// points. `results[i]` must be the flow of `points[i].setpoints`.
inline void postprocess(std::vector<AreaPoint>& points, const std::vector<PfResult>& results,
                        const DispatchProblem& problem, const SoftConstraintScreen* screen, const AugLossConfig& cfg) {
  if (points.size() != results.size()) throw ValidationError("postprocess: one flow result per point required");
  const Network& net = *problem.net;
  std::vector<ScreenInput> to_screen;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto& pt = points[i];
    const auto& r = results[i];
    pt.detail.clear();
    if (!r.converged) {
      pt.cls = PointClass::non_convergent;
      pt.detail = "power flow diverged";
      continue;
    }
    pt.achieved_p_mw = r.interface_p_mw;
    pt.achieved_q_mvar = r.interface_q_mvar;
    for (std::size_t b = 0; b < net.buses.size(); ++b) {
      const double vm = std::abs(r.v[static_cast<Eigen::Index>(b)]);
      if (vm < net.buses[b].vmin_pu || vm > net.buses[b].vmax_pu)
        pt.detail += (pt.detail.empty() ? "" : ";") + std::string("v:bus") + std::to_string(b);
    }
    for (Eigen::Index k = 0; k < r.lp.size(); ++k)
      if (r.lp[k] > cfg.lp_max) {
        const bool is_line = k < static_cast<Eigen::Index>(net.lines.size());
        pt.detail += (pt.detail.empty() ? "" : ";") + std::string(is_line ? "lp:line" : "lp:trafo") +
                     std::to_string(is_line ? k : k - static_cast<Eigen::Index>(net.lines.size()));
      }
    if (!pt.detail.empty()) {
      pt.cls = PointClass::hard_violation;
      continue;
    }
    pt.cls = PointClass::feasible;
    to_screen.push_back({&problem, &pt.setpoints, &r});
    idx.push_back(i);
  }
  if (!screen || to_screen.empty()) return;
  const auto s = screen->screen(to_screen);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto& pt = points[idx[k]];
    for (std::size_t j = 0; j < s[k].line_ids.size() && j < static_cast<std::size_t>(s[k].lp_n1.size()); ++j)
      if (s[k].lp_n1[static_cast<Eigen::Index>(j)] > cfg.lp_max)
        pt.detail += (pt.detail.empty() ? "" : ";") + std::string("n1:line") + std::to_string(s[k].line_ids[j]);
    for (Eigen::Index b = 0; b < s[k].bus_prob.size(); ++b)
      if (s[k].bus_prob[b] > cfg.prob_threshold)
        pt.detail += (pt.detail.empty() ? "" : ";") + std::string("ppf:bus") + std::to_string(b);
    if (!pt.detail.empty()) pt.cls = PointClass::soft_violation;
  }
}

struct AreaOptions {
  int n = 20;
  unsigned threads = default_parallelism();
};

/// Predicts setpoints for the full requirement grid and classifies them.
/// Prediction time covers feature assembly, the batched forward pass and
/// action scaling; postprocessing covers power flow and screening.
inline PqArea predict_area(const Network& net, const GridStatus& status, const Mlp& model,
                           const SoftConstraintScreen* screen, const AugLossConfig& cfg, const AreaOptions& opts = {}) {
  const Network state = apply_status(net, status);
  const auto adm = std::make_shared<const AdmittanceSet>(build_admittances(state));
  const auto bounds = flex_bounds(state, adm);
  if (!bounds) throw NumericalError("predict_area: flexibility bound probes do not converge");
  const auto problem = make_problem(state, adm, {}, *bounds);
  const auto grid = requirement_grid(opts.n);

  PqArea area;
  area.n = opts.n;
  area.bounds = *bounds;
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  Eigen::MatrixXd x(model.inputs(), static_cast<Eigen::Index>(grid.size()));
  for (std::size_t i = 0; i < grid.size(); ++i)
    x.col(static_cast<Eigen::Index>(i)) = annopf_features(status, grid[i].first, grid[i].second);
  const Eigen::MatrixXd actions = forward(model, model.input.apply(x));
  area.points.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    area.points[i].req = resolve_requirement(grid[i].first, grid[i].second, *bounds);
    area.points[i].setpoints = scale_actions(state, actions.col(static_cast<Eigen::Index>(i)));
  }
  const auto t1 = clock::now();
  std::vector<Scenario> batch;
  batch.reserve(grid.size());
  for (const auto& p : area.points) batch.push_back(problem.scenario(p.setpoints));
  const auto results = batch_solve(batch, {}, opts.threads);
  postprocess(area.points, results, problem, screen, cfg);
  std::vector<std::pair<double, double>> feasible;
  for (const auto& p : area.points)
    if (p.cls == PointClass::feasible) feasible.emplace_back(p.achieved_p_mw, p.achieved_q_mvar);
  area.hull = convex_hull(std::move(feasible));
  const auto t2 = clock::now();
  area.prediction_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  area.postprocessing_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
  return area;
}

struct VerificationReport {
  int feasible = 0;
  int false_feasible = 0;    // classified feasible, exact oracles find a soft violation
  int soft = 0;
  int false_infeasible = 0;  // classified soft, exact oracles find none
  double false_feasible_rate = 0.0;
  double false_infeasible_rate = 0.0;
  std::vector<int> truly_insecure;  // indices of false-feasible points
};

/// Audits the soft screening of an area with exact N-1 analysis and
/// Monte-Carlo PPF.
inline VerificationReport verify_area(const PqArea& area, const Network& net, const GridStatus& status,
                                      const UncertaintySpec& spec, const AugLossConfig& cfg,
                                      unsigned threads = default_parallelism()) {
  const Network state = apply_status(net, status);
  const auto adm = std::make_shared<const AdmittanceSet>(build_admittances(state));
  const auto problem = make_problem(state, adm, {}, area.bounds);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < area.points.size(); ++i)
    if (area.points[i].cls == PointClass::feasible || area.points[i].cls == PointClass::soft_violation) idx.push_back(i);
  std::vector<Scenario> batch;
  for (auto i : idx) batch.push_back(problem.scenario(area.points[i].setpoints));
  const auto results = batch_solve(batch, {}, threads);
  std::vector<ScreenInput> in;
  for (std::size_t k = 0; k < idx.size(); ++k) in.push_back({&problem, &area.points[idx[k]].setpoints, &results[k]});
  const ExactScreen exact(spec, cfg.lp_max, threads);
  const auto truth = exact.screen(in);

  VerificationReport rep;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& t = truth[k];
    const bool insecure = !results[k].converged || !t.lp_n1.allFinite() ||
                          (t.lp_n1.size() > 0 && t.lp_n1.maxCoeff() > cfg.lp_max) ||
                          (t.bus_prob.size() > 0 && t.bus_prob.maxCoeff() > cfg.prob_threshold);
    if (area.points[idx[k]].cls == PointClass::feasible) {
      ++rep.feasible;
      if (insecure) {
        ++rep.false_feasible;
        rep.truly_insecure.push_back(static_cast<int>(idx[k]));
      }
    } else {
      ++rep.soft;
      if (!insecure) ++rep.false_infeasible;
    }
  }
  rep.false_feasible_rate = rep.feasible ? static_cast<double>(rep.false_feasible) / rep.feasible : 0.0;
  rep.false_infeasible_rate = rep.soft ? static_cast<double>(rep.false_infeasible) / rep.soft : 0.0;
  return rep;
}

// ------------------------------------------------------------------ output

inline void write_area_csv(const PqArea& area, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write area file " + path);
  os << "r_p,r_q,p_sp_mw,q_sp_mvar,achieved_p_mw,achieved_q_mvar,class,detail\n";
  for (const auto& p : area.points)
    os << detail::fmt(p.req.r_p) << ',' << detail::fmt(p.req.r_q) << ',' << detail::fmt(p.req.p_sp_mw) << ','
       << detail::fmt(p.req.q_sp_mvar) << ',' << detail::fmt(p.achieved_p_mw) << ',' << detail::fmt(p.achieved_q_mvar)
       << ',' << to_string(p.cls) << ",\"" << p.detail << "\"\n";
}

inline nlohmann::json area_summary(const PqArea& area) {
  nlohmann::json hull = nlohmann::json::array();
  for (const auto& [p, q] : area.hull) hull.push_back({p, q});
  return {{"n", area.n},
          {"points", area.points.size()},
          {"counts",
           {{"feasible", area.count(PointClass::feasible)},
            {"hard_violation", area.count(PointClass::hard_violation)},
            {"soft_violation", area.count(PointClass::soft_violation)},
            {"non_convergent", area.count(PointClass::non_convergent)}}},
          {"bounds",
           {{"p_t_min", area.bounds.p_t_min},
            {"p_t_max", area.bounds.p_t_max},
            {"q_t_min", area.bounds.q_t_min},
            {"q_t_max", area.bounds.q_t_max}}},
          {"timing_ms",
           {{"prediction", area.prediction_ms},
            {"postprocessing", area.postprocessing_ms},
            {"total", area.prediction_ms + area.postprocessing_ms}}},
          {"feasible_hull", hull}};
}

}  // namespace flexest
