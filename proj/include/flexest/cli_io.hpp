#pragma once

// Run configuration, reproducibility manifest and sample-set files used by
// the command-line tool.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flexest/annopf.hpp"
#include "flexest/approximators.hpp"
#include "flexest/errors.hpp"
#include "flexest/grid_io.hpp"
#include "flexest/ppf.hpp"

namespace flexest {

inline constexpr const char* kVersion = "1.0.0";

struct RunConfig {
  // limits: optional band override for every non-slack bus
  std::optional<double> vmin;
  std::optional<double> vmax;
  AugLossConfig loss;
  UncertaintySpec uncertainty;
  SampleConfig samples;
  TrainConfig stage1{1e-3, 32, 200, 0.9, 0.999, 1e-8, 0};
  TrainConfig stage2{5e-4, 32, 50, 0.9, 0.999, 1e-8, 0};
  int annopf_hidden = 500;
  int annopf_layers = 1;
  ApproxConfig approx;
  FeatureSet n1_feature = FeatureSet::lp;
  FeatureSet ppf_feature = FeatureSet::v;
  SampleMode dataset_mode = SampleMode::on_sample;
  double test_fraction = 0.2;
  int grid_n = 20;
  double fd_step = 1e-3;
  int baseline_iterations = 200;
  std::uint64_t seed = 0;

  /// Canonical JSON of the effective configuration.
  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json limits{{"lp_max", loss.lp_max}};
    if (vmin) limits["vmin"] = *vmin;
    if (vmax) limits["vmax"] = *vmax;
    return {
        {"seed", seed},
        {"limits", limits},
        {"uncertainty",
         {{"sigma_pq_frac", uncertainty.sigma_pq_frac},
          {"sigma_v_frac", uncertainty.sigma_v_frac},
          {"n_samples", uncertainty.n_samples},
          {"perturb_controllable", uncertainty.perturb_controllable}}},
        {"samples",
         {{"n_req_per_step", samples.n_req_per_step},
          {"common_noise", samples.common_noise},
          {"device_noise", samples.device_noise}}},
        {"training",
         {{"stage1_epochs", stage1.epochs},
          {"stage2_epochs", stage2.epochs},
          {"learning_rate", stage1.learning_rate},
          {"stage2_learning_rate", stage2.learning_rate},
          {"batch_size", stage1.batch_size}}},
        {"annopf", {{"hidden", annopf_hidden}, {"hidden_layers", annopf_layers}, {"fd_step", fd_step}}},
        {"approximators",
         {{"hidden", approx.hidden},
          {"hidden_layers", approx.hidden_layers},
          {"epochs", approx.train.epochs},
          {"learning_rate", approx.train.learning_rate},
          {"batch_size", approx.train.batch_size},
          {"n1_feature", to_string(n1_feature)},
          {"ppf_feature", to_string(ppf_feature)},
          {"mode", dataset_mode == SampleMode::on_sample ? "on_sample" : "off_sample"},
          {"test_fraction", test_fraction}}},
        {"estimation", {{"n", grid_n}}},
        {"baseline", {{"iterations", baseline_iterations}}},
        {"penalties",
         {{"w_v", loss.w_v},
          {"w_lp", loss.w_lp},
          {"prob_threshold", loss.prob_threshold},
          {"robust_margin_v", loss.robust_margin_v}}},
    };
  }

  void check() const {
    loss.check();
    uncertainty.check();
    samples.check();
    stage1.check();
    stage2.check();
    approx.train.check();
    if (vmin && vmax && !(*vmin < *vmax)) throw ValidationError("config: limits.vmin must be below limits.vmax");
    if (annopf_hidden < 1 || annopf_layers < 1 || approx.hidden < 1 || approx.hidden_layers < 1)
      throw ValidationError("config: hidden sizes must be positive");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ValidationError("config: test_fraction must lie in (0, 1)");
    if (grid_n < 2) throw ValidationError("config: estimation.n must be >= 2");
    if (!(fd_step > 0.0)) throw ValidationError("config: annopf.fd_step must be positive");
    if (baseline_iterations < 1) throw ValidationError("config: baseline.iterations must be >= 1");
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::string& where, std::set<std::string> known) {
  if (!obj.is_object()) throw ValidationError("config: '" + where + "' must be an object");
  for (const auto& [k, v] : obj.items())
    if (!known.count(k)) throw ValidationError("config: unknown key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <typename T>
void read(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config: '" + where + "." + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Parses and validates a configuration document. Missing keys keep their
/// defaults; unknown keys and wrong types are rejected.
inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::read;
  RunConfig c;
  detail::reject_unknown(j, "",
                         {"seed", "limits", "uncertainty", "samples", "training", "annopf", "approximators", "estimation",
                          "baseline", "penalties"});
  read(j, "seed", c.seed, "");
  if (j.contains("limits")) {
    const auto& s = j["limits"];
    detail::reject_unknown(s, "limits", {"vmin", "vmax", "lp_max"});
    if (s.contains("vmin")) {
      double v = 0;
      read(s, "vmin", v, "limits");
      c.vmin = v;
    }
    if (s.contains("vmax")) {
      double v = 0;
      read(s, "vmax", v, "limits");
      c.vmax = v;
    }
    read(s, "lp_max", c.loss.lp_max, "limits");
  }
  if (j.contains("uncertainty")) {
    const auto& s = j["uncertainty"];
    detail::reject_unknown(s, "uncertainty", {"sigma_pq_frac", "sigma_v_frac", "n_samples", "perturb_controllable"});
    read(s, "sigma_pq_frac", c.uncertainty.sigma_pq_frac, "uncertainty");
    read(s, "sigma_v_frac", c.uncertainty.sigma_v_frac, "uncertainty");
    read(s, "n_samples", c.uncertainty.n_samples, "uncertainty");
    read(s, "perturb_controllable", c.uncertainty.perturb_controllable, "uncertainty");
  }
  if (j.contains("samples")) {
    const auto& s = j["samples"];
    detail::reject_unknown(s, "samples", {"n_req_per_step", "common_noise", "device_noise"});
    read(s, "n_req_per_step", c.samples.n_req_per_step, "samples");
    read(s, "common_noise", c.samples.common_noise, "samples");
    read(s, "device_noise", c.samples.device_noise, "samples");
  }
  if (j.contains("training")) {
    const auto& s = j["training"];
    detail::reject_unknown(s, "training",
                           {"stage1_epochs", "stage2_epochs", "learning_rate", "stage2_learning_rate", "batch_size"});
    read(s, "stage1_epochs", c.stage1.epochs, "training");
    read(s, "stage2_epochs", c.stage2.epochs, "training");
    read(s, "learning_rate", c.stage1.learning_rate, "training");
    read(s, "stage2_learning_rate", c.stage2.learning_rate, "training");
    read(s, "batch_size", c.stage1.batch_size, "training");
    c.stage2.batch_size = c.stage1.batch_size;
  }
  if (j.contains("annopf")) {
    const auto& s = j["annopf"];
    detail::reject_unknown(s, "annopf", {"hidden", "hidden_layers", "fd_step"});
    read(s, "hidden", c.annopf_hidden, "annopf");
    read(s, "hidden_layers", c.annopf_layers, "annopf");
    read(s, "fd_step", c.fd_step, "annopf");
  }
  if (j.contains("approximators")) {
    const auto& s = j["approximators"];
    detail::reject_unknown(s, "approximators",
                           {"hidden", "hidden_layers", "epochs", "learning_rate", "batch_size", "n1_feature",
                            "ppf_feature", "mode", "test_fraction"});
    read(s, "hidden", c.approx.hidden, "approximators");
    read(s, "hidden_layers", c.approx.hidden_layers, "approximators");
    read(s, "epochs", c.approx.train.epochs, "approximators");
    read(s, "learning_rate", c.approx.train.learning_rate, "approximators");
    read(s, "batch_size", c.approx.train.batch_size, "approximators");
    read(s, "test_fraction", c.test_fraction, "approximators");
    std::string f;
    if (s.contains("n1_feature")) {
      read(s, "n1_feature", f, "approximators");
      c.n1_feature = parse_feature_set(f);
    }
    if (s.contains("ppf_feature")) {
      read(s, "ppf_feature", f, "approximators");
      c.ppf_feature = parse_feature_set(f);
    }
    if (s.contains("mode")) {
      read(s, "mode", f, "approximators");
      if (f == "on_sample")
        c.dataset_mode = SampleMode::on_sample;
      else if (f == "off_sample")
        c.dataset_mode = SampleMode::off_sample;
      else
        throw ValidationError("config: approximators.mode must be on_sample or off_sample");
    }
  }
  if (j.contains("estimation")) {
    detail::reject_unknown(j["estimation"], "estimation", {"n"});
    read(j["estimation"], "n", c.grid_n, "estimation");
  }
  if (j.contains("baseline")) {
    detail::reject_unknown(j["baseline"], "baseline", {"iterations"});
    read(j["baseline"], "iterations", c.baseline_iterations, "baseline");
  }
  if (j.contains("penalties")) {
    const auto& s = j["penalties"];
    detail::reject_unknown(s, "penalties", {"w_v", "w_lp", "prob_threshold", "robust_margin_v"});
    read(s, "w_v", c.loss.w_v, "penalties");
    read(s, "w_lp", c.loss.w_lp, "penalties");
    read(s, "prob_threshold", c.loss.prob_threshold, "penalties");
    read(s, "robust_margin_v", c.loss.robust_margin_v, "penalties");
  }
  c.check();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

/// Applies the configured voltage band override to every non-slack bus.
inline void apply_limits(Network& net, const RunConfig& c) {
  for (auto& b : net.buses) {
    if (b.kind == BusKind::slack) continue;
    if (c.vmin) b.vmin_pu = *c.vmin;
    if (c.vmax) b.vmax_pu = *c.vmax;
  }
  validate(net);
}

// --------------------------------------------------------------- hashing

inline std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline std::string config_hash(const RunConfig& c) { return hex(fnv1a(c.to_json().dump())); }

/// Hash over the bundle's tables in a fixed order.
inline std::string grid_hash(const std::filesystem::path& dir) {
  std::uint64_t h = 14695981039346656037ull;
  for (const char* f : {"bus.csv", "line.csv", "trafo.csv", "load.csv", "gen.csv", "der.csv", "extgrid.csv", "profiles.csv"}) {
    std::ifstream is(dir / f, std::ios::binary);
    if (!is) continue;
    std::stringstream ss;
    ss << is.rdbuf();
    h = fnv1a(f, h);
    h = fnv1a(ss.str(), h);
  }
  return hex(h);
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return "";
  std::stringstream ss;
  ss << is.rdbuf();
  return hex(fnv1a(ss.str()));
}

// --------------------------------------------------------------- samples

/// One row per sample: step, requirement, bounds, ext-grid voltage, taps,
/// load P, load Q, DER availability.
inline void save_samples(const SampleSet& set, const Network& net, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write samples " + path.string());
  os << "step,r_p,r_q,p_sp_mw,q_sp_mvar,p_t_min,p_t_max,q_t_min,q_t_max,ext_v";
  for (std::size_t i = 0; i < net.transformers.size(); ++i) os << ",tap" << i;
  for (std::size_t i = 0; i < net.loads.size(); ++i) os << ",load_p" << i;
  for (std::size_t i = 0; i < net.loads.size(); ++i) os << ",load_q" << i;
  for (std::size_t i = 0; i < net.ders.size(); ++i) os << ",der_avail" << i;
  os << '\n';
  using detail::fmt;
  for (const auto& s : set.samples) {
    os << s.step << ',' << fmt(s.req.r_p) << ',' << fmt(s.req.r_q) << ',' << fmt(s.req.p_sp_mw) << ','
       << fmt(s.req.q_sp_mvar) << ',' << fmt(s.bounds.p_t_min) << ',' << fmt(s.bounds.p_t_max) << ','
       << fmt(s.bounds.q_t_min) << ',' << fmt(s.bounds.q_t_max) << ',' << fmt(s.status.ext_v);
    for (int t : s.status.taps) os << ',' << t;
    for (double v : s.status.load_p) os << ',' << fmt(v);
    for (double v : s.status.load_q) os << ',' << fmt(v);
    for (double v : s.status.der_avail) os << ',' << fmt(v);
    os << '\n';
  }
}

inline SampleSet load_samples(const Network& net, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open samples " + path.string());
  const std::size_t nt = net.transformers.size(), nl = net.loads.size(), nd = net.ders.size();
  const std::size_t expected = 10 + nt + 2 * nl + nd;
  std::string line;
  if (!std::getline(is, line)) throw ValidationError(path.string() + ": empty samples file");
  SampleSet set;
  int row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      try {
        v.push_back(detail::parse_double(cell));
      } catch (const ValidationError&) {
        throw ValidationError(path.string() + ":" + std::to_string(row) + ": non-numeric field '" + cell + "'");
      }
    }
    if (v.size() != expected)
      throw ValidationError(path.string() + ":" + std::to_string(row) + ": expected " + std::to_string(expected) +
                            " fields for this grid, found " + std::to_string(v.size()));
    Sample s;
    s.step = static_cast<int>(v[0]);
    s.req = {v[1], v[2], v[3], v[4]};
    s.bounds = {v[5], v[6], v[7], v[8]};
    s.status.ext_v = v[9];
    std::size_t k = 10;
    for (std::size_t i = 0; i < nt; ++i) s.status.taps.push_back(static_cast<int>(v[k++]));
    s.status.load_p.resize(static_cast<Eigen::Index>(nl));
    s.status.load_q.resize(static_cast<Eigen::Index>(nl));
    s.status.der_avail.resize(static_cast<Eigen::Index>(nd));
    for (std::size_t i = 0; i < nl; ++i) s.status.load_p[static_cast<Eigen::Index>(i)] = v[k++];
    for (std::size_t i = 0; i < nl; ++i) s.status.load_q[static_cast<Eigen::Index>(i)] = v[k++];
    for (std::size_t i = 0; i < nd; ++i) s.status.der_avail[static_cast<Eigen::Index>(i)] = v[k++];
    set.samples.push_back(std::move(s));
  }
  return set;
}

// --------------------------------------------------------------- manifest

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_hash;
  std::string grid_hash;
  std::uint64_t seed = 0;
  nlohmann::json config;
  nlohmann::json inputs = nlohmann::json::object();   // file -> hash
  nlohmann::json outputs = nlohmann::json::object();  // file -> hash

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"version", kVersion}, {"command", command},   {"argv", argv},     {"config_hash", config_hash},
            {"grid_hash", grid_hash}, {"seed", seed},     {"config", config}, {"inputs", inputs},
            {"outputs", outputs}};
  }

  void write(const std::filesystem::path& dir) const {
    std::ofstream os(dir / "manifest.json");
    if (!os) throw ValidationError("cannot write manifest in " + dir.string());
    os << to_json().dump(2) << '\n';
  }
};

}  // namespace flexest
