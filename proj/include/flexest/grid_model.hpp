#pragma once

// Static grid data, per-unit admittance assembly and DER capability curve.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flexest/errors.hpp"

namespace flexest {

using Complex = std::complex<double>;
using SparseComplex = Eigen::SparseMatrix<Complex>;

enum class BusKind { slack, pq };

struct Bus {
  int id = 0;
  double vn_kv = 110.0;
  double vmin_pu = 0.90;
  double vmax_pu = 1.10;
  BusKind kind = BusKind::pq;

  bool operator==(const Bus&) const = default;
};

struct Line {
  int id = 0;
  int from_bus = 0;
  int to_bus = 0;
  double r_ohm = 0.0;
  double x_ohm = 0.0;
  double b_total_us = 0.0;  // total shunt susceptance, split half to each end
  double i_max_ka = 1.0;
  bool in_service = true;

  bool operator==(const Line&) const = default;
};

struct Transformer {
  int id = 0;
  int hv_bus = 0;
  int lv_bus = 0;
  double sn_mva = 100.0;
  double vk_percent = 12.0;
  double vkr_percent = 0.3;
  int tap_pos = 0;
  int tap_min = -9;
  int tap_max = 9;
  double tap_step_percent = 1.5;
  bool is_interface = false;

  /// Off-nominal ratio applied on the HV side.
  [[nodiscard]] double ratio() const { return 1.0 + tap_pos * tap_step_percent / 100.0; }

  bool operator==(const Transformer&) const = default;
};

struct Load {
  int bus = 0;
  double p_mw = 0.0;
  double q_mvar = 0.0;

  bool operator==(const Load&) const = default;
};

// Conventional generation with fixed output. The bundled grids have none.
struct Generator {
  int bus = 0;
  double p_mw = 0.0;
  double q_mvar = 0.0;

  bool operator==(const Generator&) const = default;
};

struct Der {
  int bus = 0;
  double p_inst_mw = 0.0;
  double p_avail_mw = 0.0;
  bool controllable = false;
  double q_frac = 0.33;  // max |Q| at full output, as a fraction of p_inst_mw
  double p_set_mw = 0.0;
  double q_set_mvar = 0.0;

  bool operator==(const Der&) const = default;
};

struct ExtGrid {
  int bus = 0;
  double v_pu = 1.0;

  bool operator==(const ExtGrid&) const = default;
};

struct Network {
  std::vector<Bus> buses;
  std::vector<Line> lines;
  std::vector<Transformer> transformers;
  std::vector<Load> loads;
  std::vector<Generator> generators;
  std::vector<Der> ders;
  ExtGrid ext_grid;
  double base_mva = 100.0;

  [[nodiscard]] std::size_t bus_count() const { return buses.size(); }
  [[nodiscard]] std::size_t branch_count() const { return lines.size() + transformers.size(); }

  [[nodiscard]] std::vector<int> controllable_ders() const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < ders.size(); ++i)
      if (ders[i].controllable) idx.push_back(static_cast<int>(i));
    return idx;
  }

  bool operator==(const Network&) const = default;
};

// Per-unit admittances. Branch rows are ordered lines first, then transformers.
struct AdmittanceSet {
  SparseComplex ybus;
  SparseComplex yf;
  SparseComplex yt;

  std::vector<int> branch_from;
  std::vector<int> branch_to;
  std::vector<double> i_max_pu;
  std::vector<bool> in_service;
  std::vector<int> interface_branches;  // transformer rows marked is_interface
  std::size_t line_count = 0;
  int slack_bus = 0;
  double base_mva = 100.0;
  std::optional<int> outage;
  std::uint64_t structure_id = 0;  // unique per assembly; keys cached solver analyses

  [[nodiscard]] std::size_t bus_count() const { return static_cast<std::size_t>(ybus.rows()); }
  [[nodiscard]] std::size_t branch_count() const { return branch_from.size(); }
};

struct BusInjections {
  Eigen::VectorXd p;  // pu
  Eigen::VectorXd q;  // pu
};

struct ValidationOptions {
  bool require_interface = true;
  bool require_connected = true;
};

namespace detail {

inline void check_bus(const Network& net, int bus, const std::string& what) {
  if (bus < 0 || static_cast<std::size_t>(bus) >= net.buses.size())
    throw ValidationError(what + " references unknown bus " + std::to_string(bus));
}

// Union-find connectivity over in-service lines and all transformers.
inline bool is_connected(const Network& net, std::optional<int> skip_line = std::nullopt) {
  const auto n = net.buses.size();
  if (n == 0) return true;
  std::vector<int> parent(n);
  for (std::size_t i = 0; i < n; ++i) parent[i] = static_cast<int>(i);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto unite = [&](int a, int b) { parent[find(a)] = find(b); };
  for (std::size_t k = 0; k < net.lines.size(); ++k) {
    const auto& l = net.lines[k];
    if (!l.in_service || (skip_line && *skip_line == static_cast<int>(k))) continue;
    unite(l.from_bus, l.to_bus);
  }
  for (const auto& t : net.transformers) unite(t.hv_bus, t.lv_bus);
  const int root = find(0);
  for (std::size_t i = 1; i < n; ++i)
    if (find(static_cast<int>(i)) != root) return false;
  return true;
}

}  // namespace detail

/// Capability curve: full band q_frac * p_inst above 20% of installed capacity,
/// linear ramp to zero below it. Returns (q_min, q_max) in Mvar.
inline std::pair<double, double> der_q_limits(const Der& der, double p_mw) {
  const double tol = 1e-9 * std::max(1.0, der.p_inst_mw);
  if (p_mw < -tol || p_mw > der.p_inst_mw + tol)
    throw ValidationError("der_q_limits: p = " + std::to_string(p_mw) + " outside [0, " +
                          std::to_string(der.p_inst_mw) + "]");
  const double q_full = der.q_frac * der.p_inst_mw;
  const double knee = 0.2 * der.p_inst_mw;
  double q_max = q_full;
  if (p_mw < knee) q_max = knee > 0.0 ? std::max(p_mw, 0.0) / knee * q_full : 0.0;
  return {-q_max, q_max};
}

/// Throws ValidationError describing the first violated invariant.
inline void validate(const Network& net, const ValidationOptions& opts = {}) {
  if (net.buses.empty()) throw ValidationError("network has no buses");
  if (!(net.base_mva > 0.0)) throw ValidationError("base_mva must be positive");
  int slack_count = 0;
  for (std::size_t i = 0; i < net.buses.size(); ++i) {
    const auto& b = net.buses[i];
    if (b.id != static_cast<int>(i))
      throw ValidationError("bus ids must be dense 0..B-1 (row " + std::to_string(i) + ")");
    if (!(b.vmin_pu < b.vmax_pu))
      throw ValidationError("bus " + std::to_string(i) + ": vmin_pu must be below vmax_pu");
    if (!(b.vn_kv > 0.0)) throw ValidationError("bus " + std::to_string(i) + ": vn_kv must be positive");
    if (b.kind == BusKind::slack) ++slack_count;
  }
  if (slack_count != 1) throw ValidationError("network must have exactly one slack bus");
  detail::check_bus(net, net.ext_grid.bus, "ext grid");
  if (net.buses[net.ext_grid.bus].kind != BusKind::slack)
    throw ValidationError("ext grid must sit on the slack bus");

  for (std::size_t k = 0; k < net.lines.size(); ++k) {
    const auto& l = net.lines[k];
    const auto tag = "line " + std::to_string(k);
    if (l.id != static_cast<int>(k)) throw ValidationError(tag + ": ids must be dense 0..E-1");
    detail::check_bus(net, l.from_bus, tag);
    detail::check_bus(net, l.to_bus, tag);
    if (l.from_bus == l.to_bus) throw ValidationError(tag + ": from_bus equals to_bus");
    if (l.r_ohm == 0.0 && l.x_ohm == 0.0) throw ValidationError(tag + ": zero impedance");
    if (!(l.i_max_ka > 0.0)) throw ValidationError(tag + ": i_max_ka must be positive");
  }
  bool has_interface = false;
  for (std::size_t k = 0; k < net.transformers.size(); ++k) {
    const auto& t = net.transformers[k];
    const auto tag = "transformer " + std::to_string(k);
    if (t.id != static_cast<int>(k)) throw ValidationError(tag + ": ids must be dense");
    detail::check_bus(net, t.hv_bus, tag);
    detail::check_bus(net, t.lv_bus, tag);
    if (t.hv_bus == t.lv_bus) throw ValidationError(tag + ": hv_bus equals lv_bus");
    if (!(t.tap_min <= t.tap_pos && t.tap_pos <= t.tap_max))
      throw ValidationError(tag + ": tap position outside [tap_min, tap_max]");
    if (!(t.vk_percent > 0.0)) throw ValidationError(tag + ": zero impedance");
    if (t.vkr_percent < 0.0 || t.vkr_percent > t.vk_percent)
      throw ValidationError(tag + ": vkr_percent must lie in [0, vk_percent]");
    if (!(t.sn_mva > 0.0)) throw ValidationError(tag + ": sn_mva must be positive");
    has_interface = has_interface || t.is_interface;
  }
  if (opts.require_interface && !has_interface)
    throw ValidationError("network needs at least one interface transformer");

  for (std::size_t k = 0; k < net.loads.size(); ++k)
    detail::check_bus(net, net.loads[k].bus, "load " + std::to_string(k));
  for (std::size_t k = 0; k < net.generators.size(); ++k)
    detail::check_bus(net, net.generators[k].bus, "generator " + std::to_string(k));
  for (std::size_t k = 0; k < net.ders.size(); ++k) {
    const auto& d = net.ders[k];
    const auto tag = "der " + std::to_string(k);
    detail::check_bus(net, d.bus, tag);
    const double tol = 1e-9 * std::max(1.0, d.p_inst_mw);
    if (d.p_avail_mw < -tol || d.p_avail_mw > d.p_inst_mw + tol)
      throw ValidationError(tag + ": p_avail_mw outside [0, p_inst_mw]");
    if (d.p_set_mw < -tol || d.p_set_mw > std::min(d.p_avail_mw, d.p_inst_mw) + tol)
      throw ValidationError(tag + ": p_set_mw outside [0, min(p_avail, p_inst)]");
    if (d.q_frac < 0.0) throw ValidationError(tag + ": q_frac must be non-negative");
    const auto [qlo, qhi] = der_q_limits(d, std::clamp(d.p_set_mw, 0.0, d.p_inst_mw));
    if (d.q_set_mvar < qlo - tol || d.q_set_mvar > qhi + tol)
      throw ValidationError(tag + ": q_set_mvar outside capability curve");
  }
  if (opts.require_connected && !detail::is_connected(net))
    throw ValidationError("network is not connected");
}

namespace detail {

struct BranchStamp {
  Complex yff, yft, ytf, ytt;
};

inline BranchStamp line_stamp(const Network& net, const Line& l) {
  const double vn = net.buses[l.from_bus].vn_kv;
  const double zbase = vn * vn / net.base_mva;
  const Complex ys = 1.0 / (Complex(l.r_ohm, l.x_ohm) / zbase);
  const Complex half_shunt(0.0, 0.5 * l.b_total_us * 1e-6 * zbase);
  return {ys + half_shunt, -ys, -ys, ys + half_shunt};
}

inline BranchStamp transformer_stamp(const Network& net, const Transformer& t) {
  const double scale = net.base_mva / t.sn_mva;
  const double z = t.vk_percent / 100.0 * scale;
  const double r = t.vkr_percent / 100.0 * scale;
  const double x = std::sqrt(std::max(z * z - r * r, 0.0));
  const Complex ys = 1.0 / Complex(r, x);
  const double tap = t.ratio();
  return {ys / (tap * tap), -ys / tap, -ys / tap, ys};
}

}  // namespace detail

/// Assembles Ybus and the branch-side matrices Yf/Yt (per unit). The optional
/// outage removes one line, identical to marking it out of service.
inline AdmittanceSet build_admittances(const Network& net, std::optional<int> outage = std::nullopt) {
  validate(net, {.require_interface = false, .require_connected = false});
  if (outage) {
    if (*outage < 0 || static_cast<std::size_t>(*outage) >= net.lines.size())
      throw ValidationError("outage references unknown line " + std::to_string(*outage));
    if (!net.lines[*outage].in_service)
      throw ValidationError("outage references out-of-service line " + std::to_string(*outage));
  }
  const auto nb = static_cast<Eigen::Index>(net.buses.size());
  const auto nbr = static_cast<Eigen::Index>(net.branch_count());

  static std::atomic<std::uint64_t> next_structure_id{1};
  AdmittanceSet adm;
  adm.structure_id = next_structure_id.fetch_add(1);
  adm.base_mva = net.base_mva;
  adm.slack_bus = net.ext_grid.bus;
  adm.line_count = net.lines.size();
  adm.outage = outage;
  adm.branch_from.reserve(nbr);
  adm.branch_to.reserve(nbr);
  adm.i_max_pu.reserve(nbr);
  adm.in_service.reserve(nbr);

  using Triplet = Eigen::Triplet<Complex>;
  std::vector<Triplet> ybus_t, yf_t, yt_t;
  ybus_t.reserve(4 * nbr + nb);
  for (Eigen::Index i = 0; i < nb; ++i) ybus_t.emplace_back(i, i, Complex(0.0, 0.0));

  auto stamp = [&](Eigen::Index row, int f, int t, const detail::BranchStamp& s) {
    ybus_t.emplace_back(f, f, s.yff);
    ybus_t.emplace_back(f, t, s.yft);
    ybus_t.emplace_back(t, f, s.ytf);
    ybus_t.emplace_back(t, t, s.ytt);
    yf_t.emplace_back(row, f, s.yff);
    yf_t.emplace_back(row, t, s.yft);
    yt_t.emplace_back(row, f, s.ytf);
    yt_t.emplace_back(row, t, s.ytt);
  };

  Eigen::Index row = 0;
  for (std::size_t k = 0; k < net.lines.size(); ++k, ++row) {
    const auto& l = net.lines[k];
    const bool active = l.in_service && !(outage && *outage == static_cast<int>(k));
    const double i_base_ka = net.base_mva / (std::sqrt(3.0) * net.buses[l.from_bus].vn_kv);
    adm.branch_from.push_back(l.from_bus);
    adm.branch_to.push_back(l.to_bus);
    adm.i_max_pu.push_back(l.i_max_ka / i_base_ka);
    adm.in_service.push_back(active);
    if (active) stamp(row, l.from_bus, l.to_bus, detail::line_stamp(net, l));
  }
  for (const auto& t : net.transformers) {
    adm.branch_from.push_back(t.hv_bus);
    adm.branch_to.push_back(t.lv_bus);
    adm.i_max_pu.push_back(t.sn_mva / net.base_mva);
    adm.in_service.push_back(true);
    if (t.is_interface) adm.interface_branches.push_back(static_cast<int>(row));
    stamp(row, t.hv_bus, t.lv_bus, detail::transformer_stamp(net, t));
    ++row;
  }

  adm.ybus.resize(nb, nb);
  adm.ybus.setFromTriplets(ybus_t.begin(), ybus_t.end());
  adm.yf.resize(nbr, nb);
  adm.yf.setFromTriplets(yf_t.begin(), yf_t.end());
  adm.yt.resize(nbr, nb);
  adm.yt.setFromTriplets(yt_t.begin(), yt_t.end());
  adm.ybus.makeCompressed();
  adm.yf.makeCompressed();
  adm.yt.makeCompressed();
  return adm;
}

/// Net bus injection = generation + DER setpoints - load, per unit on base_mva.
inline BusInjections aggregate_injections(const Network& net) {
  const auto nb = static_cast<Eigen::Index>(net.buses.size());
  BusInjections inj{Eigen::VectorXd::Zero(nb), Eigen::VectorXd::Zero(nb)};
  for (const auto& g : net.generators) {
    inj.p[g.bus] += g.p_mw;
    inj.q[g.bus] += g.q_mvar;
  }
  for (const auto& d : net.ders) {
    inj.p[d.bus] += d.p_set_mw;
    inj.q[d.bus] += d.q_set_mvar;
  }
  for (const auto& l : net.loads) {
    inj.p[l.bus] -= l.p_mw;
    inj.q[l.bus] -= l.q_mvar;
  }
  inj.p /= net.base_mva;
  inj.q /= net.base_mva;
  return inj;
}

}  // namespace flexest
