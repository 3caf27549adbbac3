#pragma once

// N-1 line-outage enumeration and exhaustive contingency loading analysis.

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "flexest/grid_model.hpp"
#include "flexest/powerflow.hpp"

namespace flexest {

struct N1Report {
  std::vector<int> cases;     // outaged line ids
  std::vector<int> line_ids;  // in-service lines, indexing lp_n1 / worst_case
  Eigen::VectorXd lp_n1;      // max loading across cases, +inf if a case diverged
  std::vector<int> worst_case;  // -1 where no case loads the line
  Eigen::VectorXd lp_n0;      // base-case loading of the same lines
  bool any_violation = false;
  int non_converged_cases = 0;
};

namespace detail {

// Tarjan bridge search on the multigraph of in-service lines and transformers.
// Returns bridge flags per line.
inline std::vector<bool> line_bridges(const Network& net) {
  const int nb = static_cast<int>(net.buses.size());
  struct Edge {
    int to;
    int id;  // line id, or -1 - transformer index
  };
  std::vector<std::vector<Edge>> adj(nb);
  for (const auto& l : net.lines) {
    if (!l.in_service) continue;
    adj[l.from_bus].push_back({l.to_bus, l.id});
    adj[l.to_bus].push_back({l.from_bus, l.id});
  }
  for (const auto& t : net.transformers) {
    adj[t.hv_bus].push_back({t.lv_bus, -1 - t.id});
    adj[t.lv_bus].push_back({t.hv_bus, -1 - t.id});
  }
  std::vector<bool> bridge(net.lines.size(), false);
  std::vector<int> disc(nb, -1), low(nb, 0);
  int timer = 0;
  // iterative DFS: (vertex, edge id used to enter, next adjacency index)
  struct Frame {
    int v;
    int via;
    std::size_t next;
  };
  for (int root = 0; root < nb; ++root) {
    if (disc[root] >= 0) continue;
    std::vector<Frame> stack{{root, std::numeric_limits<int>::min(), 0}};
    disc[root] = low[root] = timer++;
    while (!stack.empty()) {
      auto& f = stack.back();
      if (f.next < adj[f.v].size()) {
        const Edge e = adj[f.v][f.next++];
        if (e.id == f.via) continue;  // skip only the traversed edge, keep parallels
        if (disc[e.to] < 0) {
          disc[e.to] = low[e.to] = timer++;
          stack.push_back({e.to, e.id, 0});
        } else {
          low[f.v] = std::min(low[f.v], disc[e.to]);
        }
      } else {
        const Frame done = f;
        stack.pop_back();
        if (!stack.empty()) {
          auto& parent = stack.back();
          low[parent.v] = std::min(low[parent.v], low[done.v]);
          if (low[done.v] > disc[parent.v] && done.via >= 0) bridge[done.via] = true;
        }
      }
    }
  }
  return bridge;
}

}  // namespace detail

/// In-service lines whose outage keeps the grid connected, ascending.
inline std::vector<int> enumerate_cases(const Network& net) {
  validate(net, {.require_interface = false, .require_connected = false});
  if (!detail::is_connected(net)) throw ValidationError("enumerate_cases: base network is disconnected");
  const auto bridge = detail::line_bridges(net);
  std::vector<int> cases;
  for (const auto& l : net.lines)
    if (l.in_service && !bridge[l.id]) cases.push_back(l.id);
  return cases;
}

/// Outage admittance sets for every N-1 case, reusable across scenarios.
struct ContingencySet {
  std::vector<int> cases;
  std::vector<int> line_ids;
  std::vector<std::shared_ptr<const AdmittanceSet>> admittances;
};

inline ContingencySet prepare_contingencies(const Network& net) {
  ContingencySet cs;
  cs.cases = enumerate_cases(net);
  for (const auto& l : net.lines)
    if (l.in_service) cs.line_ids.push_back(l.id);
  cs.admittances.reserve(cs.cases.size());
  for (int k : cs.cases) cs.admittances.push_back(std::make_shared<const AdmittanceSet>(build_admittances(net, k)));
  return cs;
}

/// Solves every case with the base voltages as the starting point and
/// reduces per-line maxima. `base` must be the converged base-case result of
/// `scenario`.
inline N1Report n1_analysis(const ContingencySet& cs, const Scenario& scenario, const PfResult& base,
                            double lp_max = 100.0, unsigned threads = default_parallelism()) {
  N1Report rep;
  rep.cases = cs.cases;
  rep.line_ids = cs.line_ids;
  const auto nl = static_cast<Eigen::Index>(cs.line_ids.size());
  rep.lp_n1 = Eigen::VectorXd::Zero(nl);
  rep.lp_n0 = Eigen::VectorXd::Zero(nl);
  rep.worst_case.assign(nl, -1);
  for (Eigen::Index j = 0; j < nl; ++j) rep.lp_n0[j] = base.lp[cs.line_ids[j]];

  std::vector<Scenario> batch(cs.cases.size(), scenario);
  for (std::size_t c = 0; c < cs.cases.size(); ++c) batch[c].admittances = cs.admittances[c];
  std::vector<std::optional<Eigen::VectorXcd>> inits(cs.cases.size(), base.v);
  const auto results = batch_solve(batch, inits, threads);

  for (std::size_t c = 0; c < results.size(); ++c) {
    const auto& r = results[c];
    if (!r.converged) {
      ++rep.non_converged_cases;
      rep.lp_n1.setConstant(std::numeric_limits<double>::infinity());
      for (auto& w : rep.worst_case) w = cs.cases[c];
      continue;
    }
    for (Eigen::Index j = 0; j < nl; ++j) {
      const double lp = r.lp[cs.line_ids[j]];
      if (lp > rep.lp_n1[j]) {
        rep.lp_n1[j] = lp;
        rep.worst_case[j] = cs.cases[c];
      }
    }
  }
  rep.any_violation = rep.non_converged_cases > 0 || (nl > 0 && rep.lp_n1.maxCoeff() > lp_max);
  return rep;
}

/// Convenience form: enumerates cases, solves the base case, then every outage.
inline N1Report n1_analysis(const Network& net, const Scenario& scenario, double lp_max = 100.0,
                            unsigned threads = default_parallelism()) {
  const auto base = solve(scenario);
  if (!base.converged) throw NumericalError("n1_analysis: base case does not converge: " + base.diagnostic);
  return n1_analysis(prepare_contingencies(net), scenario, base, lp_max, threads);
}

}  // namespace flexest
