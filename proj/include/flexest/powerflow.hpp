#pragma once

// Polar Newton-Raphson AC power flow with batched evaluation.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <cmath>
#include <memory>
#include <optional>
#include <unordered_map>
#include <span>
#include <string>
#include <vector>

#include "flexest/grid_model.hpp"
#include "flexest/parallel.hpp"
#include "flexest/sparse_lu.hpp"

namespace flexest {

struct Scenario {
  BusInjections injections;  // pu; the slack entry is ignored
  double slack_v_pu = 1.0;
  std::shared_ptr<const AdmittanceSet> admittances;
};

struct PfResult {
  Eigen::VectorXcd v;
  bool converged = false;
  int iterations = 0;
  double max_mismatch = 0.0;
  std::string diagnostic;

  Eigen::VectorXd i_f;  // pu magnitudes per branch
  Eigen::VectorXd i_t;
  Eigen::VectorXd lp;  // loading percent per branch
  Eigen::VectorXcd s_f;  // pu complex power entering each branch end
  Eigen::VectorXcd s_t;
  double interface_p_mw = 0.0;  // positive toward the external grid
  double interface_q_mvar = 0.0;

  [[nodiscard]] Eigen::VectorXd vm() const { return v.cwiseAbs(); }
};

struct SolverOptions {
  double tolerance = 1e-8;
  int max_iterations = 30;
};

struct BranchCurrents {
  Eigen::VectorXd i_f;
  Eigen::VectorXd i_t;
};

/// Branch-end current magnitudes |Yf V| and |Yt V| in pu.
inline BranchCurrents branch_currents(const Eigen::VectorXcd& v, const AdmittanceSet& adm) {
  return {(adm.yf * v).cwiseAbs(), (adm.yt * v).cwiseAbs()};
}

/// lp = max(i_f, i_t) / i_max * 100; zero for out-of-service branches.
inline Eigen::VectorXd loading_percent(const BranchCurrents& cur, const AdmittanceSet& adm) {
  const auto n = static_cast<Eigen::Index>(adm.branch_count());
  Eigen::VectorXd lp = Eigen::VectorXd::Zero(n);
  for (Eigen::Index k = 0; k < n; ++k)
    if (adm.in_service[k]) lp[k] = std::max(cur.i_f[k], cur.i_t[k]) / adm.i_max_pu[k] * 100.0;
  return lp;
}

/// Complex bus power S = V * conj(Ybus V).
inline Eigen::VectorXcd bus_power(const Eigen::VectorXcd& v, const AdmittanceSet& adm) {
  const Eigen::VectorXcd ibus = adm.ybus * v;
  return v.cwiseProduct(ibus.conjugate());
}

namespace detail {

// Jacobian sparsity derived from Ybus, restricted to non-slack buses.
// slot[4*e + block] indexes J's value array for the e-th Ybus nonzero
// (column-major traversal) and block 0..3 = (dP/dVa, dP/dVm, dQ/dVa, dQ/dVm).
struct JacobianLayout {
  Eigen::SparseMatrix<double> jac;
  std::vector<int> pos;  // bus -> unknown index, -1 for slack
  std::vector<Eigen::Index> slot;
  Eigen::Index unknowns = 0;
};

inline JacobianLayout make_layout(const AdmittanceSet& adm) {
  const auto nb = static_cast<Eigen::Index>(adm.bus_count());
  JacobianLayout lay;
  lay.pos.assign(nb, -1);
  Eigen::Index n = 0;
  for (Eigen::Index b = 0; b < nb; ++b)
    if (b != adm.slack_bus) lay.pos[b] = static_cast<int>(n++);
  lay.unknowns = n;

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(4 * adm.ybus.nonZeros());
  for (Eigen::Index col = 0; col < adm.ybus.outerSize(); ++col)
    for (SparseComplex::InnerIterator it(adm.ybus, col); it; ++it) {
      const int r = lay.pos[it.row()], c = lay.pos[it.col()];
      if (r < 0 || c < 0) continue;
      trip.emplace_back(r, c, 0.0);
      trip.emplace_back(r, c + n, 0.0);
      trip.emplace_back(r + n, c, 0.0);
      trip.emplace_back(r + n, c + n, 0.0);
    }
  lay.jac.resize(2 * n, 2 * n);
  lay.jac.setFromTriplets(trip.begin(), trip.end());
  lay.jac.makeCompressed();

  auto find_slot = [&](Eigen::Index r, Eigen::Index c) -> Eigen::Index {
    const auto* outer = lay.jac.outerIndexPtr();
    const auto* inner = lay.jac.innerIndexPtr();
    const auto* first = inner + outer[c];
    const auto* last = inner + outer[c + 1];
    const auto* hit = std::lower_bound(first, last, static_cast<int>(r));
    return static_cast<Eigen::Index>(hit - inner);
  };
  lay.slot.assign(4 * adm.ybus.nonZeros(), -1);
  Eigen::Index e = 0;
  for (Eigen::Index col = 0; col < adm.ybus.outerSize(); ++col)
    for (SparseComplex::InnerIterator it(adm.ybus, col); it; ++it, ++e) {
      const int r = lay.pos[it.row()], c = lay.pos[it.col()];
      if (r < 0 || c < 0) continue;
      lay.slot[4 * e + 0] = find_slot(r, c);
      lay.slot[4 * e + 1] = find_slot(r, c + n);
      lay.slot[4 * e + 2] = find_slot(r + n, c);
      lay.slot[4 * e + 3] = find_slot(r + n, c + n);
    }
  return lay;
}

// Per-thread cache of Jacobian layouts and symbolic factorizations keyed by
// AdmittanceSet::structure_id. Numeric results do not depend on cache state.
struct SolverPlan {
  JacobianLayout layout;
  StaticSparseLU lu;
};

inline SolverPlan& solver_plan(const AdmittanceSet& adm) {
  thread_local std::unordered_map<std::uint64_t, std::unique_ptr<SolverPlan>> cache;
  if (auto it = cache.find(adm.structure_id); it != cache.end() && adm.structure_id != 0) return *it->second;
  if (cache.size() >= 512) cache.clear();
  auto plan = std::make_unique<SolverPlan>();
  plan->layout = make_layout(adm);
  plan->lu.analyze(plan->layout.jac);
  auto& ref = *plan;
  cache[adm.structure_id] = std::move(plan);
  return ref;
}

inline void finish_result(PfResult& res, const AdmittanceSet& adm) {
  const Eigen::VectorXcd i_f = adm.yf * res.v;
  const Eigen::VectorXcd i_t = adm.yt * res.v;
  res.i_f = i_f.cwiseAbs();
  res.i_t = i_t.cwiseAbs();
  res.lp = loading_percent({res.i_f, res.i_t}, adm);
  const auto nbr = static_cast<Eigen::Index>(adm.branch_count());
  res.s_f.resize(nbr);
  res.s_t.resize(nbr);
  for (Eigen::Index k = 0; k < nbr; ++k) {
    res.s_f[k] = res.v[adm.branch_from[k]] * std::conj(i_f[k]);
    res.s_t[k] = res.v[adm.branch_to[k]] * std::conj(i_t[k]);
  }
  double p = 0.0, q = 0.0;
  for (int k : adm.interface_branches) {
    p -= res.s_f[k].real();
    q -= res.s_f[k].imag();
  }
  res.interface_p_mw = p * adm.base_mva;
  res.interface_q_mvar = q * adm.base_mva;
}

}  // namespace detail

/// Solves one scenario. Flat start (|V| = slack setpoint, angle 0) unless an
/// initial voltage vector is supplied. Singular Jacobians and divergence are
/// reported through converged = false plus a diagnostic, never thrown.
inline PfResult solve(const Scenario& sc, const std::optional<Eigen::VectorXcd>& init = std::nullopt,
                      const SolverOptions& opts = {}) {
  if (!sc.admittances) throw ValidationError("scenario has no admittance set");
  const AdmittanceSet& adm = *sc.admittances;
  const auto nb = static_cast<Eigen::Index>(adm.bus_count());
  if (sc.injections.p.size() != nb || sc.injections.q.size() != nb)
    throw ValidationError("scenario injections do not match the bus count");
  if (init && init->size() != nb) throw ValidationError("initial voltage vector has wrong length");

  PfResult res;
  if (init) {
    res.v = *init;
  } else {
    res.v = Eigen::VectorXcd::Constant(nb, Complex(sc.slack_v_pu, 0.0));
  }
  res.v[adm.slack_bus] = Complex(sc.slack_v_pu, 0.0);

  detail::SolverPlan& plan = detail::solver_plan(adm);
  const detail::JacobianLayout& layout = plan.layout;
  const Eigen::Index n = layout.unknowns;
  Eigen::SparseMatrix<double> jac = layout.jac;

  Eigen::VectorXd va(nb), vm(nb);
  for (Eigen::Index b = 0; b < nb; ++b) {
    va[b] = std::arg(res.v[b]);
    vm[b] = std::abs(res.v[b]);
  }
  Eigen::VectorXd f(2 * n);
  Eigen::VectorXcd ibus;

  for (int it = 0;; ++it) {
    ibus = adm.ybus * res.v;
    for (Eigen::Index b = 0; b < nb; ++b) {
      const int p = layout.pos[b];
      if (p < 0) continue;
      const Complex mis = res.v[b] * std::conj(ibus[b]) - Complex(sc.injections.p[b], sc.injections.q[b]);
      f[p] = mis.real();
      f[p + n] = mis.imag();
    }
    res.max_mismatch = n > 0 ? f.cwiseAbs().maxCoeff() : 0.0;
    res.iterations = it;
    if (!std::isfinite(res.max_mismatch)) {
      res.diagnostic = "diverged: non-finite mismatch";
      break;
    }
    if (res.max_mismatch < opts.tolerance) {
      res.converged = true;
      break;
    }
    if (it == opts.max_iterations) {
      res.diagnostic = "no convergence within " + std::to_string(opts.max_iterations) + " iterations";
      break;
    }

    double* val = jac.valuePtr();
    std::fill(val, val + jac.nonZeros(), 0.0);
    Eigen::Index e = 0;
    for (Eigen::Index col = 0; col < adm.ybus.outerSize(); ++col)
      for (SparseComplex::InnerIterator yit(adm.ybus, col); yit; ++yit, ++e) {
        if (layout.slot[4 * e] < 0) continue;
        const auto i = yit.row(), k = yit.col();
        const Complex y = yit.value();
        const Complex vnk = res.v[k] / vm[k];
        // dS_i/dVa_k = j V_i conj(delta_ik Ibus_i - Y_ik V_k)
        // dS_i/dVm_k = V_i conj(Y_ik Vn_k) + delta_ik conj(Ibus_i) Vn_i
        Complex ds_dva = Complex(0.0, 1.0) * res.v[i] * std::conj(-y * res.v[k]);
        Complex ds_dvm = res.v[i] * std::conj(y * vnk);
        if (i == k) {
          ds_dva += Complex(0.0, 1.0) * res.v[i] * std::conj(ibus[i]);
          ds_dvm += std::conj(ibus[i]) * vnk;
        }
        val[layout.slot[4 * e + 0]] += ds_dva.real();
        val[layout.slot[4 * e + 1]] += ds_dvm.real();
        val[layout.slot[4 * e + 2]] += ds_dva.imag();
        val[layout.slot[4 * e + 3]] += ds_dvm.imag();
      }

    Eigen::VectorXd dx = f;
    if (plan.lu.factorize(jac)) {
      plan.lu.solve(dx);
    } else {
      // static pivot order failed; retry with threshold pivoting
      Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
      lu.compute(jac);
      if (lu.info() != Eigen::Success) {
        res.diagnostic = "singular Jacobian at iteration " + std::to_string(it) + ": " + lu.lastErrorMessage();
        break;
      }
      dx = lu.solve(f);
    }
    for (Eigen::Index b = 0; b < nb; ++b) {
      const int p = layout.pos[b];
      if (p < 0) continue;
      va[b] -= dx[p];
      vm[b] -= dx[p + n];
      res.v[b] = std::polar(vm[b], va[b]);
    }
  }

  detail::finish_result(res, adm);
  return res;
}

/// Solves every scenario in parallel; element i equals solve(scenarios[i], inits[i]).
inline std::vector<PfResult> batch_solve(std::span<const Scenario> scenarios,
                                         std::span<const std::optional<Eigen::VectorXcd>> inits = {},
                                         unsigned threads = default_parallelism(),
                                         const SolverOptions& opts = {}) {
  if (!inits.empty() && inits.size() != scenarios.size())
    throw ValidationError("batch_solve: init count does not match scenario count");
  if (!scenarios.empty()) {
    const auto nb = scenarios.front().injections.p.size();
    for (const auto& sc : scenarios)
      if (sc.injections.p.size() != nb) throw ValidationError("batch_solve: scenarios differ in bus count");
  }
  std::vector<PfResult> out(scenarios.size());
  parallel_for(scenarios.size(), threads, [&](std::size_t i) {
    out[i] = solve(scenarios[i], inits.empty() ? std::nullopt : inits[i], opts);
  });
  return out;
}

/// Builds the base-case scenario of a network from its current device setpoints.
inline Scenario make_scenario(const Network& net, std::shared_ptr<const AdmittanceSet> adm = nullptr) {
  if (!adm) adm = std::make_shared<const AdmittanceSet>(build_admittances(net));
  return {aggregate_injections(net), net.ext_grid.v_pu, std::move(adm)};
}

}  // namespace flexest
