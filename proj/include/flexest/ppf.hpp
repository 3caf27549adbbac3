#pragma once

// Monte-Carlo probabilistic power flow under Gaussian forecast errors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "flexest/grid_model.hpp"
#include "flexest/powerflow.hpp"

namespace flexest {

struct UncertaintySpec {
  double sigma_pq_frac = 0.10;  // relative std of load / uncontrollable DER P and Q
  double sigma_v_frac = 0.01;   // relative std of the external grid voltage
  int n_samples = 1000;
  std::uint64_t seed = 0;
  // Also perturb controllable-DER availability; their setpoints are clipped
  // to the sampled availability and capability curve.
  bool perturb_controllable = true;

  void check() const {
    if (sigma_pq_frac < 0.0 || sigma_v_frac < 0.0) throw ValidationError("uncertainty fractions must be >= 0");
    if (n_samples < 1) throw ValidationError("n_samples must be >= 1");
  }
};

struct PpfReport {
  Eigen::VectorXd viol_prob;  // per bus
  double aggregate_prob = 0.0;
  Eigen::VectorXd mean_v;
  Eigen::VectorXd std_v;
  int non_converged = 0;
  int n_samples = 0;
};

namespace detail {

inline double perturb(std::mt19937_64& rng, double value, double frac) {
  if (frac == 0.0 || value == 0.0) return value;
  std::normal_distribution<double> dist(value, frac * std::abs(value));
  return dist(rng);
}

}  // namespace detail

/// Perturbed copies of the network's operating state, one per sample. Draw
/// order per sample: loads (P then Q), DERs (availability then Q), slack voltage.
inline std::vector<Network> sample_networks(const Network& net, const UncertaintySpec& spec) {
  spec.check();
  std::mt19937_64 rng(spec.seed);
  std::vector<Network> out;
  out.reserve(spec.n_samples);
  for (int s = 0; s < spec.n_samples; ++s) {
    Network n = net;
    for (auto& l : n.loads) {
      l.p_mw = detail::perturb(rng, l.p_mw, spec.sigma_pq_frac);
      l.q_mvar = detail::perturb(rng, l.q_mvar, spec.sigma_pq_frac);
    }
    for (auto& d : n.ders) {
      if (d.controllable && !spec.perturb_controllable) continue;
      const double avail = std::clamp(detail::perturb(rng, d.p_avail_mw, spec.sigma_pq_frac), 0.0, d.p_inst_mw);
      const double ratio = d.p_avail_mw > 0.0 ? avail / d.p_avail_mw : 0.0;
      d.p_avail_mw = avail;
      if (d.controllable) {
        d.p_set_mw = std::min(d.p_set_mw, avail);
        const auto [lo, hi] = der_q_limits(d, d.p_set_mw);
        d.q_set_mvar = std::clamp(d.q_set_mvar, lo, hi);
      } else {
        d.p_set_mw = std::min(d.p_set_mw * ratio, avail);
        const auto [lo, hi] = der_q_limits(d, d.p_set_mw);
        d.q_set_mvar = std::clamp(detail::perturb(rng, d.q_set_mvar, spec.sigma_pq_frac), lo, hi);
      }
    }
    n.ext_grid.v_pu = detail::perturb(rng, n.ext_grid.v_pu, spec.sigma_v_frac);
    out.push_back(std::move(n));
  }
  return out;
}

/// Scenarios for each Monte-Carlo sample, sharing the network's admittances.
inline std::vector<Scenario> sample_states(const Network& net, const UncertaintySpec& spec,
                                           std::shared_ptr<const AdmittanceSet> adm = nullptr) {
  if (!adm) adm = std::make_shared<const AdmittanceSet>(build_admittances(net));
  std::vector<Scenario> out;
  out.reserve(spec.n_samples);
  for (const auto& n : sample_networks(net, spec)) out.push_back(make_scenario(n, adm));
  return out;
}

/// Violation statistics over solved samples. Non-converged samples count as
/// violating at every bus.
inline PpfReport summarize_mcs(const Network& net, const std::vector<PfResult>& results) {
  const auto nb = static_cast<Eigen::Index>(net.buses.size());
  PpfReport rep;
  rep.n_samples = static_cast<int>(results.size());
  rep.viol_prob = Eigen::VectorXd::Zero(nb);
  rep.mean_v = Eigen::VectorXd::Zero(nb);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(nb);
  int any = 0, converged = 0;
  for (const auto& r : results) {
    if (!r.converged) {
      ++rep.non_converged;
      ++any;
      rep.viol_prob.array() += 1.0;
      continue;
    }
    ++converged;
    bool violated = false;
    for (Eigen::Index b = 0; b < nb; ++b) {
      const double vm = std::abs(r.v[b]);
      rep.mean_v[b] += vm;
      sq[b] += vm * vm;
      if (vm < net.buses[b].vmin_pu || vm > net.buses[b].vmax_pu) {
        rep.viol_prob[b] += 1.0;
        violated = true;
      }
    }
    if (violated) ++any;
  }
  const double n = std::max(1, rep.n_samples);
  rep.viol_prob /= n;
  rep.aggregate_prob = any / n;
  if (converged > 0) {
    rep.mean_v /= converged;
    rep.std_v = (sq / converged - rep.mean_v.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
  } else {
    rep.std_v = Eigen::VectorXd::Zero(nb);
  }
  return rep;
}

/// Solves all samples (warm-started from the deterministic base case).
inline PpfReport run_mcs(const Network& net, const UncertaintySpec& spec, unsigned threads = default_parallelism(),
                         std::shared_ptr<const AdmittanceSet> adm = nullptr) {
  if (!adm) adm = std::make_shared<const AdmittanceSet>(build_admittances(net));
  const auto base = solve(make_scenario(net, adm));
  if (!base.converged) throw NumericalError("run_mcs: deterministic base case does not converge");
  const auto scenarios = sample_states(net, spec, adm);
  const std::vector<std::optional<Eigen::VectorXcd>> inits(scenarios.size(), base.v);
  return summarize_mcs(net, batch_solve(scenarios, inits, threads));
}

}  // namespace flexest
