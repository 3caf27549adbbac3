#pragma once

// ANN-OPF agent: grid status features, action scaling onto DER setpoints,
// normalized interface objective with constraint penalties, finite-difference
// action gradients through batched power flow, and the two training stages.
// Also hosts the direct projected-gradient baseline.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "flexest/errors.hpp"
#include "flexest/grid_io.hpp"
#include "flexest/grid_model.hpp"
#include "flexest/neural.hpp"
#include "flexest/parallel.hpp"
#include "flexest/powerflow.hpp"

namespace flexest {

// ------------------------------------------------------------------ status

struct GridStatus {
  Eigen::VectorXd load_p;     // MW per load
  Eigen::VectorXd load_q;     // Mvar per load
  Eigen::VectorXd der_avail;  // MW per DER (all DERs)
  double ext_v = 1.0;
  std::vector<int> taps;  // per transformer

  bool operator==(const GridStatus&) const = default;
};

inline GridStatus status_of(const Network& net) {
  GridStatus s;
  s.load_p.resize(static_cast<Eigen::Index>(net.loads.size()));
  s.load_q.resize(s.load_p.size());
  for (std::size_t i = 0; i < net.loads.size(); ++i) {
    s.load_p[static_cast<Eigen::Index>(i)] = net.loads[i].p_mw;
    s.load_q[static_cast<Eigen::Index>(i)] = net.loads[i].q_mvar;
  }
  s.der_avail.resize(static_cast<Eigen::Index>(net.ders.size()));
  for (std::size_t i = 0; i < net.ders.size(); ++i) s.der_avail[static_cast<Eigen::Index>(i)] = net.ders[i].p_avail_mw;
  s.ext_v = net.ext_grid.v_pu;
  for (const auto& t : net.transformers) s.taps.push_back(t.tap_pos);
  return s;
}

/// Copy of `net` in the given operating state. Uncontrollable DERs feed in
/// their availability; controllable setpoints are clipped to the new limits.
inline Network apply_status(const Network& net, const GridStatus& s) {
  if (static_cast<std::size_t>(s.load_p.size()) != net.loads.size() ||
      static_cast<std::size_t>(s.load_q.size()) != net.loads.size() ||
      static_cast<std::size_t>(s.der_avail.size()) != net.ders.size() ||
      (!s.taps.empty() && s.taps.size() != net.transformers.size()))
    throw ValidationError("grid status does not match the network dimensions");
  Network out = net;
  for (std::size_t i = 0; i < out.loads.size(); ++i) {
    out.loads[i].p_mw = s.load_p[static_cast<Eigen::Index>(i)];
    out.loads[i].q_mvar = s.load_q[static_cast<Eigen::Index>(i)];
  }
  for (std::size_t i = 0; i < out.ders.size(); ++i) {
    auto& d = out.ders[i];
    d.p_avail_mw = std::clamp(s.der_avail[static_cast<Eigen::Index>(i)], 0.0, d.p_inst_mw);
    d.p_set_mw = d.controllable ? std::min(d.p_set_mw, d.p_avail_mw) : d.p_avail_mw;
    const auto [lo, hi] = der_q_limits(d, d.p_set_mw);
    d.q_set_mvar = std::clamp(d.q_set_mvar, lo, hi);
  }
  out.ext_grid.v_pu = s.ext_v;
  for (std::size_t t = 0; t < s.taps.size(); ++t) {
    auto& tr = out.transformers[t];
    if (s.taps[t] < tr.tap_min || s.taps[t] > tr.tap_max)
      throw ValidationError("tap position out of range on transformer " + std::to_string(tr.id));
    tr.tap_pos = s.taps[t];
  }
  return out;
}

// ------------------------------------------------------------ requirement

struct FlexBounds {
  double p_t_min = 0.0, p_t_max = 0.0;  // MW at the interface
  double q_t_min = 0.0, q_t_max = 0.0;  // Mvar at the interface

  [[nodiscard]] bool valid() const { return p_t_min < p_t_max && q_t_min < q_t_max; }
  bool operator==(const FlexBounds&) const = default;
};

struct PqRequirement {
  double r_p = 0.5, r_q = 0.5;
  double p_sp_mw = 0.0, q_sp_mvar = 0.0;

  bool operator==(const PqRequirement&) const = default;
};

inline PqRequirement resolve_requirement(double r_p, double r_q, const FlexBounds& b) {
  if (!(r_p >= 0.0 && r_p <= 1.0 && r_q >= 0.0 && r_q <= 1.0))
    throw ValidationError("requirement must lie in [0, 1]^2");
  return {r_p, r_q, b.p_t_min + r_p * (b.p_t_max - b.p_t_min), b.q_t_min + r_q * (b.q_t_max - b.q_t_min)};
}

/// Agent inputs: load P, load Q, DER availability, ext-grid voltage, r_p, r_q.
inline Eigen::VectorXd annopf_features(const GridStatus& s, double r_p, double r_q) {
  Eigen::VectorXd f(s.load_p.size() + s.load_q.size() + s.der_avail.size() + 3);
  f << s.load_p, s.load_q, s.der_avail, s.ext_v, r_p, r_q;
  return f;
}

// --------------------------------------------------------------- actions

struct DerSetpoints {
  Eigen::VectorXd p_mw;  // per controllable DER, in network order
  Eigen::VectorXd q_mvar;

  bool operator==(const DerSetpoints&) const = default;
};

inline constexpr double kActionLimit = 1.0 - 1e-9;

/// Curtailment scaling of P onto [0, min(avail, inst)] and P-dependent Q
/// scaling onto the capability band. Actions are interleaved [p0, q0, p1, ...].
inline DerSetpoints scale_actions(const Network& net, const Eigen::VectorXd& actions) {
  const auto ctrl = net.controllable_ders();
  if (actions.size() != static_cast<Eigen::Index>(2 * ctrl.size()))
    throw ValidationError("action vector length must be twice the controllable DER count");
  DerSetpoints sp{Eigen::VectorXd(static_cast<Eigen::Index>(ctrl.size())),
                  Eigen::VectorXd(static_cast<Eigen::Index>(ctrl.size()))};
  for (std::size_t k = 0; k < ctrl.size(); ++k) {
    const auto& d = net.ders[ctrl[k]];
    const double ap = std::clamp(actions[2 * k], -kActionLimit, kActionLimit);
    const double aq = std::clamp(actions[2 * k + 1], -kActionLimit, kActionLimit);
    const double p = (ap + 1.0) / 2.0 * std::min(d.p_avail_mw, d.p_inst_mw);
    const auto [lo, hi] = der_q_limits(d, p);
    sp.p_mw[k] = p;
    sp.q_mvar[k] = lo + (aq + 1.0) / 2.0 * (hi - lo);
  }
  return sp;
}

inline DerSetpoints scale_actions(const Network& net, const GridStatus& status, const Eigen::VectorXd& actions) {
  return scale_actions(apply_status(net, status), actions);
}

inline void apply_setpoints(Network& net, const DerSetpoints& sp) {
  const auto ctrl = net.controllable_ders();
  if (sp.p_mw.size() != static_cast<Eigen::Index>(ctrl.size()) || sp.q_mvar.size() != sp.p_mw.size())
    throw ValidationError("setpoint count does not match controllable DERs");
  for (std::size_t k = 0; k < ctrl.size(); ++k) {
    net.ders[ctrl[k]].p_set_mw = sp.p_mw[k];
    net.ders[ctrl[k]].q_set_mvar = sp.q_mvar[k];
  }
}

// ---------------------------------------------------------- flex bounds

namespace detail {

// The four probe settings: (P = avail, Q = 0), (P = 0, Q = 0),
// (P = avail, Q = q_hi), (P = avail, Q = q_lo).
inline std::array<DerSetpoints, 4> probe_setpoints(const Network& net) {
  const auto ctrl = net.controllable_ders();
  const auto n = static_cast<Eigen::Index>(ctrl.size());
  std::array<DerSetpoints, 4> out;
  for (auto& sp : out) sp = {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& d = net.ders[ctrl[k]];
    const double p = std::min(d.p_avail_mw, d.p_inst_mw);
    const auto [lo, hi] = der_q_limits(d, p);
    out[0].p_mw[k] = out[2].p_mw[k] = out[3].p_mw[k] = p;
    out[2].q_mvar[k] = hi;
    out[3].q_mvar[k] = lo;
  }
  return out;
}

inline std::optional<FlexBounds> bounds_from_probes(const PfResult* r) {
  for (int i = 0; i < 4; ++i)
    if (!r[i].converged) return std::nullopt;
  FlexBounds b;
  b.p_t_min = std::min(r[0].interface_p_mw, r[1].interface_p_mw);
  b.p_t_max = std::max(r[0].interface_p_mw, r[1].interface_p_mw);
  b.q_t_min = std::min(r[2].interface_q_mvar, r[3].interface_q_mvar);
  b.q_t_max = std::max(r[2].interface_q_mvar, r[3].interface_q_mvar);
  return b;
}

}  // namespace detail

/// Interface extremes from four probe power flows; nullopt if any diverges.
inline std::optional<FlexBounds> flex_bounds(const Network& net, std::shared_ptr<const AdmittanceSet> adm = nullptr) {
  if (!adm) adm = std::make_shared<const AdmittanceSet>(build_admittances(net));
  const auto probes = detail::probe_setpoints(net);
  std::vector<Scenario> batch;
  for (const auto& sp : probes) {
    Network n = net;
    apply_setpoints(n, sp);
    batch.push_back(make_scenario(n, adm));
  }
  const auto res = batch_solve(batch, {}, 1);
  return detail::bounds_from_probes(res.data());
}

inline std::optional<FlexBounds> flex_bounds(const Network& net, const GridStatus& status) {
  return flex_bounds(apply_status(net, status));
}

// -------------------------------------------------------------- loss terms

struct AugLossConfig {
  double w_v = 100.0;
  double w_lp = 1.0;
  double lp_max = 100.0;
  double robust_margin_v = 0.01;
  double prob_threshold = 0.10;
  // false trains on the interface objective alone (no constraint penalties)
  bool penalize = true;

  void check() const {
    if (!(w_v > 0.0 && w_lp > 0.0)) throw ValidationError("penalty weights must be positive");
    if (!(lp_max > 0.0)) throw ValidationError("lp_max must be positive");
    if (robust_margin_v < 0.0) throw ValidationError("robust_margin_v must be >= 0");
    if (!(prob_threshold >= 0.0 && prob_threshold <= 1.0)) throw ValidationError("prob_threshold must lie in [0, 1]");
  }
};

enum class ObjectiveMode { requirement, max_p, max_q, min_q };

inline ObjectiveMode parse_objective_mode(const std::string& s) {
  if (s == "requirement") return ObjectiveMode::requirement;
  if (s == "max-p" || s == "max_p") return ObjectiveMode::max_p;
  if (s == "max-q" || s == "max_q") return ObjectiveMode::max_q;
  if (s == "min-q" || s == "min_q") return ObjectiveMode::min_q;
  throw ValidationError("unknown objective mode '" + s + "'");
}

namespace detail {

inline double normalized(double num, double lo, double hi) { return hi > lo ? num / (hi - lo) : 0.0; }

}  // namespace detail

/// |P - P_sp| / (P_max - P_min) + |Q - Q_sp| / (Q_max - Q_min).
inline double objective_normalized(const PfResult& r, const PqRequirement& req, const FlexBounds& b) {
  return detail::normalized(std::abs(r.interface_p_mw - req.p_sp_mw), b.p_t_min, b.p_t_max) +
         detail::normalized(std::abs(r.interface_q_mvar - req.q_sp_mvar), b.q_t_min, b.q_t_max);
}

/// Objective for the extremal modes, normalized by the flexibility range.
inline double objective_value(const PfResult& r, const PqRequirement& req, const FlexBounds& b, ObjectiveMode mode) {
  switch (mode) {
    case ObjectiveMode::requirement: return objective_normalized(r, req, b);
    case ObjectiveMode::max_p: return detail::normalized(b.p_t_max - r.interface_p_mw, b.p_t_min, b.p_t_max);
    case ObjectiveMode::max_q: return detail::normalized(b.q_t_max - r.interface_q_mvar, b.q_t_min, b.q_t_max);
    case ObjectiveMode::min_q: return detail::normalized(r.interface_q_mvar - b.q_t_min, b.q_t_min, b.q_t_max);
  }
  return 0.0;
}

struct Penalties {
  double l_v = 0.0;   // pu, summed over buses
  double l_lp = 0.0;  // percent, summed over branches
};

inline Penalties penalties(const PfResult& r, const Network& net, const AugLossConfig& cfg) {
  Penalties p;
  for (std::size_t b = 0; b < net.buses.size(); ++b) {
    const double vm = std::abs(r.v[static_cast<Eigen::Index>(b)]);
    p.l_v += std::max({net.buses[b].vmin_pu - vm, vm - net.buses[b].vmax_pu, 0.0});
  }
  for (Eigen::Index k = 0; k < r.lp.size(); ++k) p.l_lp += std::max(r.lp[k] - cfg.lp_max, 0.0);
  return p;
}

struct LineMark {
  int branch = 0;          // line id
  double frozen_lp = 0.0;  // N-0 loading when marked
  double depth = 0.0;      // predicted N-1 overload above lp_max
};

struct BusMark {
  int bus = 0;
  bool upper = true;  // violated bound is vmax
};

struct SoftMarks {
  std::vector<LineMark> lines;
  std::vector<BusMark> buses;

  [[nodiscard]] bool empty() const { return lines.empty() && buses.empty(); }
};

struct LossBreakdown {
  double objective = 0.0;
  double l_v = 0.0;
  double l_lp = 0.0;
  double soft_lp = 0.0;
  double soft_v = 0.0;
  double total = 0.0;
  bool converged = true;
};

/// obj + w_v l_v + w_lp l_lp, plus the marked soft-constraint terms.
/// A diverged power flow costs a flat 10 w_v.
inline LossBreakdown augmented_loss(const PfResult& r, const Network& net, const PqRequirement& req,
                                    const FlexBounds& b, const AugLossConfig& cfg, const SoftMarks* marks = nullptr,
                                    ObjectiveMode mode = ObjectiveMode::requirement) {
  LossBreakdown out;
  if (!r.converged) {
    out.converged = false;
    out.total = 10.0 * cfg.w_v;
    return out;
  }
  out.objective = objective_value(r, req, b, mode);
  const auto pen = penalties(r, net, cfg);
  out.l_v = pen.l_v;
  out.l_lp = pen.l_lp;
  if (marks) {
    for (const auto& m : marks->lines) out.soft_lp += std::max(r.lp[m.branch] - (m.frozen_lp - m.depth), 0.0);
    for (const auto& m : marks->buses) {
      const double vm = std::abs(r.v[m.bus]);
      const auto& bus = net.buses[m.bus];
      out.soft_v += m.upper ? std::max(vm - (bus.vmax_pu - cfg.robust_margin_v), 0.0)
                            : std::max((bus.vmin_pu + cfg.robust_margin_v) - vm, 0.0);
    }
  }
  out.total = out.objective;
  if (cfg.penalize) out.total += cfg.w_v * (out.l_v + out.soft_v) + cfg.w_lp * (out.l_lp + out.soft_lp);
  return out;
}

// ------------------------------------------------------- dispatch problems

/// One operating state + requirement, prepared for fast repeated evaluation
/// of controllable-DER setpoints.
struct DispatchProblem {
  std::shared_ptr<const Network> net;  // status applied
  std::shared_ptr<const AdmittanceSet> adm;
  BusInjections fixed;  // all injections except controllable DERs, pu
  std::vector<int> ctrl;
  PqRequirement req;
  FlexBounds bounds;

  [[nodiscard]] Eigen::Index action_size() const { return static_cast<Eigen::Index>(2 * ctrl.size()); }

  [[nodiscard]] Scenario scenario(const DerSetpoints& sp) const {
    Scenario sc{fixed, net->ext_grid.v_pu, adm};
    for (std::size_t k = 0; k < ctrl.size(); ++k) {
      const int bus = net->ders[ctrl[k]].bus;
      sc.injections.p[bus] += sp.p_mw[static_cast<Eigen::Index>(k)] / net->base_mva;
      sc.injections.q[bus] += sp.q_mvar[static_cast<Eigen::Index>(k)] / net->base_mva;
    }
    return sc;
  }

  [[nodiscard]] Network network_with(const DerSetpoints& sp) const {
    Network n = *net;
    apply_setpoints(n, sp);
    return n;
  }
};

inline DispatchProblem make_problem(const Network& net_with_status, std::shared_ptr<const AdmittanceSet> adm,
                                    const PqRequirement& req, const FlexBounds& bounds) {
  DispatchProblem p;
  p.net = std::make_shared<const Network>(net_with_status);
  p.adm = adm ? std::move(adm) : std::make_shared<const AdmittanceSet>(build_admittances(net_with_status));
  p.ctrl = net_with_status.controllable_ders();
  Network fixed = net_with_status;
  for (int k : p.ctrl) fixed.ders[k].p_set_mw = fixed.ders[k].q_set_mvar = 0.0;
  p.fixed = aggregate_injections(fixed);
  p.req = req;
  p.bounds = bounds;
  return p;
}

// ------------------------------------------------------------------ samples

struct Sample {
  int step = 0;
  GridStatus status;
  PqRequirement req;
  FlexBounds bounds;

  bool operator==(const Sample&) const = default;
};

struct SampleSet {
  std::vector<Sample> samples;
  int dropped = 0;  // samples whose bound probes diverged
};

struct SampleConfig {
  int n_req_per_step = 10;
  double common_noise = 0.05;  // relative std of the per-sample profile scale
  double device_noise = 0.01;  // relative std of the per-device deviation
  std::uint64_t seed = 0;

  void check() const {
    if (n_req_per_step < 1) throw ValidationError("n_req_per_step must be >= 1");
    if (common_noise < 0.0 || device_noise < 0.0) throw ValidationError("noise fractions must be >= 0");
  }
};

/// Grid status of one profile step (loads scaled from the network values,
/// DER availability as a fraction of installed capacity).
inline GridStatus profile_status(const Network& net, const ProfileStep& step) {
  GridStatus s = status_of(net);
  s.load_p *= step.load_p_scale;
  s.load_q *= step.load_q_scale;
  for (std::size_t i = 0; i < net.ders.size(); ++i)
    s.der_avail[static_cast<Eigen::Index>(i)] = std::clamp(step.der_avail_scale, 0.0, 1.0) * net.ders[i].p_inst_mw;
  return s;
}

/// Builds per-sample admittances, sharing one assembly per tap configuration.
class AdmittanceCache {
 public:
  explicit AdmittanceCache(const Network& net) : net_(net) {}

  std::shared_ptr<const AdmittanceSet> get(const std::vector<int>& taps) {
    auto it = cache_.find(taps);
    if (it != cache_.end()) return it->second;
    GridStatus s = status_of(net_);
    s.taps = taps;
    auto adm = std::make_shared<const AdmittanceSet>(build_admittances(apply_status(net_, s)));
    cache_.emplace(taps, adm);
    return adm;
  }

 private:
  const Network& net_;
  std::map<std::vector<int>, std::shared_ptr<const AdmittanceSet>> cache_;
};

/// Noised profile states paired with uniform requirements. Per sample the
/// draw order is: common load scale, common DER scale, per-load P and Q
/// deviations, per-DER deviations, r_p, r_q.
inline SampleSet generate_samples(const Network& net, const Profiles& profiles, const SampleConfig& cfg,
                                  unsigned threads = default_parallelism()) {
  cfg.check();
  if (profiles.empty()) throw ValidationError("generate_samples: profile series is empty");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  auto factor = [&](double frac) { return frac > 0.0 ? std::max(0.0, 1.0 + frac * normal(rng)) : 1.0; };

  std::vector<Sample> raw;
  for (std::size_t k = 0; k < profiles.size(); ++k) {
    const GridStatus base = profile_status(net, profiles[k]);
    for (int r = 0; r < cfg.n_req_per_step; ++r) {
      Sample s;
      s.step = static_cast<int>(k);
      s.status = base;
      const double load_scale = factor(cfg.common_noise);
      const double der_scale = factor(cfg.common_noise);
      for (Eigen::Index i = 0; i < s.status.load_p.size(); ++i) {
        s.status.load_p[i] *= load_scale * factor(cfg.device_noise);
        s.status.load_q[i] *= load_scale * factor(cfg.device_noise);
      }
      for (Eigen::Index i = 0; i < s.status.der_avail.size(); ++i)
        s.status.der_avail[i] = std::min(s.status.der_avail[i] * der_scale * factor(cfg.device_noise),
                                         net.ders[static_cast<std::size_t>(i)].p_inst_mw);
      s.req.r_p = uniform(rng);
      s.req.r_q = uniform(rng);
      raw.push_back(std::move(s));
    }
  }

  // Four probe flows per sample, solved as one batch.
  AdmittanceCache cache(net);
  std::vector<Scenario> batch;
  batch.reserve(4 * raw.size());
  for (const auto& s : raw) {
    const Network n = apply_status(net, s.status);
    const auto adm = cache.get(s.status.taps);
    for (const auto& sp : detail::probe_setpoints(n)) {
      Network m = n;
      apply_setpoints(m, sp);
      batch.push_back(make_scenario(m, adm));
    }
  }
  const auto res = batch_solve(batch, {}, threads);

  SampleSet out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto b = detail::bounds_from_probes(&res[4 * i]);
    if (!b) {
      ++out.dropped;
      continue;
    }
    raw[i].bounds = *b;
    raw[i].req = resolve_requirement(raw[i].req.r_p, raw[i].req.r_q, *b);
    out.samples.push_back(std::move(raw[i]));
  }
  return out;
}

inline std::vector<DispatchProblem> make_problems(const Network& net, const std::vector<Sample>& samples) {
  AdmittanceCache cache(net);
  std::vector<DispatchProblem> out;
  out.reserve(samples.size());
  for (const auto& s : samples)
    out.push_back(make_problem(apply_status(net, s.status), cache.get(s.status.taps), s.req, s.bounds));
  return out;
}

inline Eigen::MatrixXd sample_features(const std::vector<Sample>& samples) {
  if (samples.empty()) return {};
  const auto f0 = annopf_features(samples[0].status, samples[0].req.r_p, samples[0].req.r_q);
  Eigen::MatrixXd x(f0.size(), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i)
    x.col(static_cast<Eigen::Index>(i)) = annopf_features(samples[i].status, samples[i].req.r_p, samples[i].req.r_q);
  return x;
}

// ------------------------------------------------------- soft-constraint screen

/// Predicted soft-constraint quantities for one solved operating point.
struct ScreenResult {
  std::vector<int> line_ids;  // lines covered by lp_n1
  Eigen::VectorXd lp_n1;      // N-1 maximum loading, percent
  Eigen::VectorXd bus_prob;   // voltage-violation probability per bus
};

struct ScreenInput {
  const DispatchProblem* problem = nullptr;
  const DerSetpoints* setpoints = nullptr;
  const PfResult* base = nullptr;  // converged base-case flow
};

class SoftConstraintScreen {
 public:
  virtual ~SoftConstraintScreen() = default;
  [[nodiscard]] virtual std::vector<ScreenResult> screen(const std::vector<ScreenInput>& inputs) const = 0;
};

/// Lines predicted above lp_max and buses above the probability threshold.
inline SoftMarks make_marks(const ScreenResult& s, const PfResult& base, const Network& net, const AugLossConfig& cfg) {
  SoftMarks m;
  for (std::size_t j = 0; j < s.line_ids.size(); ++j) {
    const double pred = s.lp_n1[static_cast<Eigen::Index>(j)];
    if (pred > cfg.lp_max) m.lines.push_back({s.line_ids[j], base.lp[s.line_ids[j]], pred - cfg.lp_max});
  }
  for (Eigen::Index b = 0; b < s.bus_prob.size(); ++b) {
    if (!(s.bus_prob[b] > cfg.prob_threshold)) continue;
    const double vm = std::abs(base.v[b]);
    const auto& bus = net.buses[static_cast<std::size_t>(b)];
    m.buses.push_back({static_cast<int>(b), bus.vmax_pu - vm < vm - bus.vmin_pu});
  }
  return m;
}

// ------------------------------------------------------------ gradients

struct GradientOptions {
  double step = 1e-3;  // raw action space
  unsigned threads = default_parallelism();
  ObjectiveMode mode = ObjectiveMode::requirement;
};

struct ActionEval {
  LossBreakdown loss;
  Eigen::VectorXd grad;  // d loss / d action
  DerSetpoints setpoints;
  PfResult base;
  SoftMarks marks;
};

/// Computes marks for a batch after the base flows are known.
using MarkFn = std::function<std::vector<SoftMarks>(const std::vector<ScreenInput>&)>;

inline MarkFn screen_marks(const SoftConstraintScreen& screen, const AugLossConfig& cfg) {
  return [&screen, cfg](const std::vector<ScreenInput>& in) {
    const auto res = screen.screen(in);
    std::vector<SoftMarks> marks;
    marks.reserve(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) marks.push_back(make_marks(res[i], *in[i].base, *in[i].problem->net, cfg));
    return marks;
  };
}

inline Eigen::VectorXd clamp_actions(const Eigen::VectorXd& a) { return a.cwiseMax(-kActionLimit).cwiseMin(kActionLimit); }

/// Base setpoints and flows for a batch of (problem, action) pairs.
inline std::vector<std::pair<DerSetpoints, PfResult>> solve_dispatch(const std::vector<const DispatchProblem*>& problems,
                                                                     const Eigen::MatrixXd& actions,
                                                                     unsigned threads = default_parallelism()) {
  if (actions.cols() != static_cast<Eigen::Index>(problems.size()))
    throw ValidationError("solve_dispatch: one action column per problem required");
  std::vector<DerSetpoints> sps;
  std::vector<Scenario> batch;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    sps.push_back(scale_actions(*problems[i]->net, actions.col(static_cast<Eigen::Index>(i))));
    batch.push_back(problems[i]->scenario(sps.back()));
  }
  auto res = batch_solve(batch, {}, threads);
  std::vector<std::pair<DerSetpoints, PfResult>> out;
  out.reserve(problems.size());
  for (std::size_t i = 0; i < problems.size(); ++i) out.emplace_back(std::move(sps[i]), std::move(res[i]));
  return out;
}

/// Central finite differences of the augmented loss in raw action space, all
/// perturbations of all problems solved as one batch warm-started from each
/// base flow. Marks come from `fixed_marks` (one per problem) or are computed
/// by `mark_fn` from the base flows, and stay frozen across perturbations.
inline std::vector<ActionEval> action_gradients(const std::vector<const DispatchProblem*>& problems,
                                                const Eigen::MatrixXd& actions, const AugLossConfig& cfg,
                                                const GradientOptions& opts = {},
                                                const std::vector<SoftMarks>* fixed_marks = nullptr,
                                                const MarkFn* mark_fn = nullptr) {
  const std::size_t n = problems.size();
  if (fixed_marks && fixed_marks->size() != n) throw ValidationError("action_gradients: one mark set per problem");
  if (!(opts.step > 0.0)) throw ValidationError("action_gradients: step must be positive");
  Eigen::MatrixXd a(actions.rows(), actions.cols());
  for (Eigen::Index j = 0; j < actions.cols(); ++j) a.col(j) = clamp_actions(actions.col(j));
  auto base = solve_dispatch(problems, a, opts.threads);

  std::vector<ActionEval> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].setpoints = std::move(base[i].first);
    out[i].base = std::move(base[i].second);
    out[i].grad = Eigen::VectorXd::Zero(problems[i]->action_size());
  }
  if (fixed_marks) {
    for (std::size_t i = 0; i < n; ++i) out[i].marks = (*fixed_marks)[i];
  } else if (mark_fn && *mark_fn) {
    std::vector<ScreenInput> in;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (out[i].base.converged) {
        in.push_back({problems[i], &out[i].setpoints, &out[i].base});
        idx.push_back(i);
      }
    if (!in.empty()) {
      auto marks = (*mark_fn)(in);
      for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]].marks = std::move(marks[k]);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    out[i].loss = augmented_loss(out[i].base, *problems[i]->net, problems[i]->req, problems[i]->bounds, cfg,
                                 &out[i].marks, opts.mode);

  // Perturbed evaluations: (problem, coordinate, +/-).
  struct Probe {
    std::size_t sample;
    Eigen::Index coord;
    double at;
  };
  std::vector<Probe> probes;
  std::vector<Scenario> batch;
  std::vector<std::optional<Eigen::VectorXcd>> inits;
  for (std::size_t i = 0; i < n; ++i) {
    if (!out[i].base.converged) continue;
    const Eigen::Index m = problems[i]->action_size();
    for (Eigen::Index c = 0; c < m; ++c)
      for (double sign : {1.0, -1.0}) {
        Eigen::VectorXd ap = a.col(static_cast<Eigen::Index>(i));
        ap[c] = std::clamp(ap[c] + sign * opts.step, -kActionLimit, kActionLimit);
        probes.push_back({i, c, ap[c]});
        batch.push_back(problems[i]->scenario(scale_actions(*problems[i]->net, ap)));
        inits.emplace_back(out[i].base.v);
      }
  }
  const auto res = batch_solve(batch, inits, opts.threads);

  for (std::size_t k = 0; k < probes.size(); k += 2) {
    const auto i = probes[k].sample;
    const auto* p = problems[i];
    const double a0 = a(probes[k].coord, static_cast<Eigen::Index>(i));
    auto loss_at = [&](std::size_t j) {
      return augmented_loss(res[j], *p->net, p->req, p->bounds, cfg, &out[i].marks, opts.mode).total;
    };
    const bool up_ok = res[k].converged && probes[k].at != a0;
    const bool dn_ok = res[k + 1].converged && probes[k + 1].at != a0;
    double g = 0.0;
    if (up_ok && dn_ok)
      g = (loss_at(k) - loss_at(k + 1)) / (probes[k].at - probes[k + 1].at);
    else if (up_ok)
      g = (loss_at(k) - out[i].loss.total) / (probes[k].at - a0);
    else if (dn_ok)
      g = (out[i].loss.total - loss_at(k + 1)) / (a0 - probes[k + 1].at);
    out[i].grad[probes[k].coord] = g;
  }
  return out;
}

/// Single-problem form.
inline Eigen::VectorXd action_gradients(const DispatchProblem& problem, const Eigen::VectorXd& actions,
                                        const AugLossConfig& cfg, const SoftMarks& marks = {},
                                        const GradientOptions& opts = {}) {
  const std::vector<SoftMarks> m{marks};
  return action_gradients({&problem}, Eigen::MatrixXd(actions), cfg, opts, &m).front().grad;
}

// ------------------------------------------------------------- training

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double objective = 0.0;
  double l_v = 0.0;
  double l_lp = 0.0;
  int marked_lines = 0;
  int marked_buses = 0;
  int non_converged = 0;
};

inline void write_telemetry(const std::vector<EpochStats>& log, const std::string& path, const std::string& stage) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw ValidationError("cannot write telemetry file " + path);
  if (os.tellp() == 0) os << "stage,epoch,mean_loss,mean_objective,mean_l_v,mean_l_lp,marked_lines,marked_buses,non_converged\n";
  for (const auto& e : log)
    os << stage << ',' << e.epoch << ',' << detail::fmt(e.loss) << ',' << detail::fmt(e.objective) << ','
       << detail::fmt(e.l_v) << ',' << detail::fmt(e.l_lp) << ',' << e.marked_lines << ',' << e.marked_buses << ','
       << e.non_converged << '\n';
}

/// Fresh agent network: features -> hidden ReLU layers -> tanh actions, with
/// the input standardizer fitted on the sample features.
inline Mlp make_annopf(const Network& net, const std::vector<Sample>& samples, int hidden = 500, int hidden_layers = 1,
                       std::uint64_t seed = 0) {
  if (samples.empty()) throw ValidationError("make_annopf: no samples");
  if (hidden < 1 || hidden_layers < 1) throw ValidationError("make_annopf: bad hidden layer configuration");
  const auto x = sample_features(samples);
  std::vector<int> sizes{static_cast<int>(x.rows())};
  for (int l = 0; l < hidden_layers; ++l) sizes.push_back(hidden);
  sizes.push_back(static_cast<int>(2 * net.controllable_ders().size()));
  if (sizes.back() == 0) throw ValidationError("make_annopf: network has no controllable DERs");
  Mlp m = make_mlp(sizes, Activation::tanh, seed);
  m.input = Standardizer::fit(x);
  return m;
}

/// Raw agent actions for a set of samples.
inline Eigen::MatrixXd predict_actions(const Mlp& model, const std::vector<Sample>& samples) {
  return forward(model, model.input.apply(sample_features(samples)));
}

namespace detail {

inline std::vector<EpochStats> train_dispatch(Mlp& model, const Network& net, const std::vector<Sample>& samples,
                                              const AugLossConfig& cfg, const TrainConfig& tc,
                                              const GradientOptions& opts, const SoftConstraintScreen* screen,
                                              const std::function<void(const EpochStats&)>& on_epoch) {
  cfg.check();
  tc.check();
  if (samples.empty()) throw ValidationError("training needs at least one sample");
  const auto problems = make_problems(net, samples);
  const Eigen::MatrixXd x = model.input.apply(sample_features(samples));
  if (model.outputs() != problems.front().action_size()) throw ValidationError("model output size does not match the DER count");
  const MarkFn marks = screen ? screen_marks(*screen, cfg) : MarkFn{};

  std::mt19937_64 rng(tc.seed);
  std::vector<Eigen::Index> order(x.cols());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  AdamState adam;
  std::vector<EpochStats> log;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats st;
    st.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      const std::vector<Eigen::Index> idx(order.begin() + start, order.begin() + end);
      const Eigen::MatrixXd xb = x(Eigen::all, idx);
      std::vector<const DispatchProblem*> pb;
      for (auto i : idx) pb.push_back(&problems[i]);
      const Eigen::MatrixXd ab = forward(model, xb);
      const auto evals = action_gradients(pb, ab, cfg, opts, nullptr, screen ? &marks : nullptr);
      Eigen::MatrixXd grad(ab.rows(), ab.cols());
      const double inv = 1.0 / static_cast<double>(idx.size());
      for (std::size_t k = 0; k < evals.size(); ++k) {
        const auto& e = evals[k];
        if (!std::isfinite(e.loss.total) || !e.grad.allFinite())
          throw NumericalError("training diverged: non-finite loss in epoch " + std::to_string(epoch));
        grad.col(static_cast<Eigen::Index>(k)) = e.grad * inv;
        st.loss += e.loss.total;
        st.objective += e.loss.objective;
        st.l_v += e.loss.l_v;
        st.l_lp += e.loss.l_lp;
        st.marked_lines += static_cast<int>(e.marks.lines.size());
        st.marked_buses += static_cast<int>(e.marks.buses.size());
        st.non_converged += e.loss.converged ? 0 : 1;
      }
      backprop_action_grads(model, xb, grad, adam, tc);
    }
    const double n = static_cast<double>(order.size());
    st.loss /= n;
    st.objective /= n;
    st.l_v /= n;
    st.l_lp /= n;
    log.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return log;
}

}  // namespace detail

/// Self-supervised training against the hard-constraint augmented loss.
inline std::vector<EpochStats> train_stage1(Mlp& model, const Network& net, const std::vector<Sample>& samples,
                                            const AugLossConfig& cfg, const TrainConfig& tc,
                                            const GradientOptions& opts = {},
                                            const std::function<void(const EpochStats&)>& on_epoch = {}) {
  return detail::train_dispatch(model, net, samples, cfg, tc, opts, nullptr, on_epoch);
}

/// Continues training with soft-constraint marks from `screen`, recomputed
/// per batch from the base flows.
inline std::vector<EpochStats> train_stage2(Mlp& model, const Network& net, const std::vector<Sample>& samples,
                                            const SoftConstraintScreen& screen, const AugLossConfig& cfg,
                                            const TrainConfig& tc, const GradientOptions& opts = {},
                                            const std::function<void(const EpochStats&)>& on_epoch = {}) {
  return detail::train_dispatch(model, net, samples, cfg, tc, opts, &screen, on_epoch);
}

// ------------------------------------------------------------- baseline

struct BaselineOptions {
  int iterations = 200;
  double initial_step = 0.5;  // raw action units along the normalized gradient
  double min_step = 1e-6;
  GradientOptions gradient;
};

struct BaselineResult {
  Eigen::VectorXd actions;
  DerSetpoints setpoints;
  PfResult result;
  LossBreakdown loss;
  bool feasible = false;
  int iterations = 0;
  std::string diagnostic;
};

/// Projected gradient descent directly on the raw actions with one step size
/// per action (sign-based, grown while the gradient sign holds and halved when
/// it flips). A single global step stalls at the first active limit: every
/// move along the objective gradient crosses it. Returns the best
/// hard-feasible iterate, or the best iterate overall flagged infeasible.
inline BaselineResult baseline_optimize(const DispatchProblem& problem, const AugLossConfig& cfg, ObjectiveMode mode,
                                        const BaselineOptions& opts = {},
                                        std::optional<Eigen::VectorXd> start = std::nullopt) {
  GradientOptions gopt = opts.gradient;
  gopt.mode = mode;
  AugLossConfig penalized = cfg;
  penalized.penalize = true;
  Eigen::VectorXd a = start ? clamp_actions(*start) : Eigen::VectorXd::Zero(problem.action_size());
  if (a.size() != problem.action_size()) throw ValidationError("baseline: start vector has the wrong length");

  auto eval = action_gradients({&problem}, Eigen::MatrixXd(a), penalized, gopt).front();
  if (!eval.base.converged) throw NumericalError("baseline: start point does not converge");

  BaselineResult best_feasible, best_any;
  auto consider = [&](const Eigen::VectorXd& act, const DerSetpoints& sp, const PfResult& r, const LossBreakdown& l) {
    if (!r.converged) return;
    const bool feasible = l.l_v == 0.0 && l.l_lp == 0.0;
    auto& slot = feasible ? best_feasible : best_any;
    const bool empty = slot.actions.size() == 0;
    const double key = feasible ? l.objective : l.total;
    const double prev = feasible ? slot.loss.objective : slot.loss.total;
    if (empty || key < prev) {
      slot.actions = act;
      slot.setpoints = sp;
      slot.result = r;
      slot.loss = l;
      slot.feasible = feasible;
    }
  };
  consider(a, eval.setpoints, eval.base, eval.loss);

  Eigen::VectorXd step = Eigen::VectorXd::Constant(a.size(), opts.initial_step);
  Eigen::VectorXd prev_sign = Eigen::VectorXd::Zero(a.size());
  int it = 0;
  for (; it < opts.iterations; ++it) {
    // drop components pushing further into an active box bound
    Eigen::VectorXd g = eval.grad;
    for (Eigen::Index i = 0; i < g.size(); ++i)
      if ((a[i] >= kActionLimit && g[i] < 0.0) || (a[i] <= -kActionLimit && g[i] > 0.0)) g[i] = 0.0;
    if (!(g.cwiseAbs().maxCoeff() > 0.0)) break;
    double free_step = 0.0;
    for (Eigen::Index i = 0; i < g.size(); ++i)
      if (g[i] != 0.0) free_step = std::max(free_step, step[i]);
    if (free_step < opts.min_step) break;
    Eigen::VectorXd sign(g.size());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      sign[i] = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      if (sign[i] * prev_sign[i] < 0.0)
        step[i] *= 0.5;
      else if (sign[i] * prev_sign[i] > 0.0)
        step[i] = std::min(1.0, step[i] * 1.2);
    }
    const Eigen::VectorXd cand = clamp_actions(a - step.cwiseProduct(sign));
    auto next = action_gradients({&problem}, Eigen::MatrixXd(cand), penalized, gopt).front();
    if (!next.base.converged) {
      step *= 0.5;
      continue;
    }
    consider(cand, next.setpoints, next.base, next.loss);
    a = cand;
    eval = std::move(next);
    prev_sign = sign;
  }
  BaselineResult out = best_feasible.actions.size() > 0 ? best_feasible : best_any;
  out.iterations = it;
  if (!out.feasible) {
    out.diagnostic = "no hard-feasible iterate: l_v=" + detail::fmt(out.loss.l_v) + " l_lp=" + detail::fmt(out.loss.l_lp);
  }
  return out;
}

}  // namespace flexest
