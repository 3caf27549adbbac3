#pragma once

// Supervised surrogates for the soft constraints: N-1 maximum line loading
// and per-bus voltage-violation probability. Includes label generation with
// the exact solvers, training, metrics and the screens used by training and
// area estimation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flexest/annopf.hpp"
#include "flexest/contingency.hpp"
#include "flexest/errors.hpp"
#include "flexest/neural.hpp"
#include "flexest/ppf.hpp"

namespace flexest {

enum class FeatureSet { lp, v, pq, lp_v, v_qder };

inline std::string to_string(FeatureSet f) {
  switch (f) {
    case FeatureSet::lp: return "lp";
    case FeatureSet::v: return "v";
    case FeatureSet::pq: return "pq";
    case FeatureSet::lp_v: return "lp_v";
    case FeatureSet::v_qder: return "v_qder";
  }
  return "lp";
}

inline FeatureSet parse_feature_set(const std::string& s) {
  if (s == "lp") return FeatureSet::lp;
  if (s == "v") return FeatureSet::v;
  if (s == "pq") return FeatureSet::pq;
  if (s == "lp_v") return FeatureSet::lp_v;
  if (s == "v_qder") return FeatureSet::v_qder;
  throw ValidationError("unknown feature set '" + s + "'");
}

enum class ApproxKind { n1, ppf };

inline std::string to_string(ApproxKind k) { return k == ApproxKind::n1 ? "n1" : "ppf"; }

inline ApproxKind parse_approx_kind(const std::string& s) {
  if (s == "n1") return ApproxKind::n1;
  if (s == "ppf") return ApproxKind::ppf;
  throw ValidationError("unknown approximator kind '" + s + "'");
}

enum class SampleMode { on_sample, off_sample };

inline std::vector<int> in_service_lines(const Network& net) {
  std::vector<int> ids;
  for (const auto& l : net.lines)
    if (l.in_service) ids.push_back(l.id);
  return ids;
}

/// Input features of one solved operating point. `net` carries the setpoints.
inline Eigen::VectorXd approx_features(FeatureSet f, const Network& net, const PfResult& base,
                                       const std::vector<int>& line_ids) {
  auto lp = [&] {
    Eigen::VectorXd x(static_cast<Eigen::Index>(line_ids.size()));
    for (std::size_t j = 0; j < line_ids.size(); ++j) x[static_cast<Eigen::Index>(j)] = base.lp[line_ids[j]];
    return x;
  };
  const Eigen::VectorXd vm = base.vm();
  switch (f) {
    case FeatureSet::lp: return lp();
    case FeatureSet::v: return vm;
    case FeatureSet::pq: {
      const auto inj = aggregate_injections(net);
      Eigen::VectorXd x(inj.p.size() + inj.q.size());
      x << inj.p, inj.q;
      return x;
    }
    case FeatureSet::lp_v: {
      const auto l = lp();
      Eigen::VectorXd x(l.size() + vm.size());
      x << l, vm;
      return x;
    }
    case FeatureSet::v_qder: {
      Eigen::VectorXd x(vm.size() + static_cast<Eigen::Index>(net.ders.size()));
      x.head(vm.size()) = vm;
      for (std::size_t i = 0; i < net.ders.size(); ++i) x[vm.size() + static_cast<Eigen::Index>(i)] = net.ders[i].q_set_mvar;
      return x;
    }
  }
  return lp();
}

inline bool needs_network(FeatureSet f) { return f == FeatureSet::pq || f == FeatureSet::v_qder; }

// ------------------------------------------------------------------ datasets

struct ApproxDataset {
  ApproxKind kind = ApproxKind::n1;
  FeatureSet feature = FeatureSet::lp;
  Eigen::MatrixXd inputs;  // features x samples
  Eigen::MatrixXd labels;  // outputs x samples
  std::vector<int> line_ids;
  std::vector<int> sample_index;  // originating sample per column
  int dropped = 0;
  std::uint64_t seed = 0;
  std::string mode;

  [[nodiscard]] Eigen::Index size() const { return inputs.cols(); }

  [[nodiscard]] ApproxDataset subset(const std::vector<Eigen::Index>& cols) const {
    ApproxDataset d = *this;
    d.inputs = inputs(Eigen::all, cols);
    d.labels = labels(Eigen::all, cols);
    d.sample_index.clear();
    for (auto c : cols) d.sample_index.push_back(sample_index.empty() ? static_cast<int>(c) : sample_index[c]);
    return d;
  }
};

struct DatasetPair {
  ApproxDataset n1;
  ApproxDataset ppf;
};

struct DatasetConfig {
  SampleMode mode = SampleMode::on_sample;
  UncertaintySpec uncertainty;  // per-sample MC seed = uncertainty.seed + sample index
  FeatureSet n1_feature = FeatureSet::lp;
  FeatureSet ppf_feature = FeatureSet::v;
  double lp_max = 100.0;
  unsigned threads = default_parallelism();
};

/// Setpoints used for labeling: the agent's prediction (on-sample) or natural
/// availability at unity power factor (off-sample).
inline std::vector<DerSetpoints> labeling_setpoints(const std::vector<DispatchProblem>& problems,
                                                    const std::vector<Sample>& samples, const Mlp* model,
                                                    SampleMode mode) {
  std::vector<DerSetpoints> out;
  out.reserve(problems.size());
  if (mode == SampleMode::on_sample) {
    if (!model) throw ValidationError("on-sample dataset creation requires a stage-1 model");
    const Eigen::MatrixXd a = predict_actions(*model, samples);
    for (std::size_t i = 0; i < problems.size(); ++i)
      out.push_back(scale_actions(*problems[i].net, a.col(static_cast<Eigen::Index>(i))));
  } else {
    for (const auto& p : problems) {
      const auto n = static_cast<Eigen::Index>(p.ctrl.size());
      DerSetpoints sp{Eigen::VectorXd(n), Eigen::VectorXd::Zero(n)};
      for (Eigen::Index k = 0; k < n; ++k) {
        const auto& d = p.net->ders[p.ctrl[k]];
        sp.p_mw[k] = std::min(d.p_avail_mw, d.p_inst_mw);
      }
      out.push_back(std::move(sp));
    }
  }
  return out;
}

/// Exact labels for one operating point.
struct ExactLabels {
  bool base_converged = false;
  PfResult base;
  N1Report n1;
  PpfReport ppf;
};

namespace detail {

// Contingency sets keyed by the base admittance assembly (i.e. tap setting).
class ContingencyCache {
 public:
  const ContingencySet& get(const Network& net, const AdmittanceSet& adm) {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(adm.structure_id);
    if (it == cache_.end()) it = cache_.emplace(adm.structure_id, prepare_contingencies(net)).first;
    return it->second;
  }

 private:
  std::mutex mutex_;
  std::map<std::uint64_t, ContingencySet> cache_;
};

}  // namespace detail

/// Exact N-1 and Monte-Carlo labels of one dispatch, solved sequentially.
inline ExactLabels exact_labels(const DispatchProblem& p, const DerSetpoints& sp, const UncertaintySpec& spec,
                                double lp_max, const ContingencySet& cs) {
  ExactLabels out;
  const Scenario sc = p.scenario(sp);
  out.base = solve(sc);
  out.base_converged = out.base.converged;
  if (!out.base.converged) return out;
  out.n1 = n1_analysis(cs, sc, out.base, lp_max, 1);
  const Network n = p.network_with(sp);
  const auto states = sample_states(n, spec, p.adm);
  const std::vector<std::optional<Eigen::VectorXcd>> inits(states.size(), out.base.v);
  out.ppf = summarize_mcs(n, batch_solve(states, inits, 1));
  return out;
}

/// Labels every sample with exact N-1 analysis and Monte-Carlo PPF. Samples
/// whose base flow diverges are dropped from both sets; samples with a
/// diverged outage case are dropped from the N-1 set only.
inline DatasetPair build_datasets(const Network& net, const std::vector<Sample>& samples, const Mlp* model,
                                  const DatasetConfig& cfg) {
  cfg.uncertainty.check();
  if (samples.empty()) throw ValidationError("build_datasets: no samples");
  const auto problems = make_problems(net, samples);
  const auto setpoints = labeling_setpoints(problems, samples, model, cfg.mode);
  const auto line_ids = in_service_lines(net);
  detail::ContingencyCache cache;

  std::vector<ExactLabels> labels(samples.size());
  parallel_for(samples.size(), cfg.threads, [&](std::size_t i) {
    UncertaintySpec spec = cfg.uncertainty;
    spec.seed = cfg.uncertainty.seed + i;
    const auto& cs = cache.get(*problems[i].net, *problems[i].adm);
    labels[i] = exact_labels(problems[i], setpoints[i], spec, cfg.lp_max, cs);
  });

  DatasetPair out;
  const std::string mode = cfg.mode == SampleMode::on_sample ? "on_sample" : "off_sample";
  out.n1 = {ApproxKind::n1, cfg.n1_feature, {}, {}, line_ids, {}, 0, cfg.uncertainty.seed, mode};
  out.ppf = {ApproxKind::ppf, cfg.ppf_feature, {}, {}, line_ids, {}, 0, cfg.uncertainty.seed, mode};
  std::vector<Eigen::VectorXd> n1_x, n1_y, ppf_x, ppf_y;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& l = labels[i];
    if (!l.base_converged) {
      ++out.n1.dropped;
      ++out.ppf.dropped;
      continue;
    }
    const Network n = needs_network(cfg.n1_feature) || needs_network(cfg.ppf_feature) ? problems[i].network_with(setpoints[i])
                                                                                       : Network{};
    if (l.n1.non_converged_cases > 0 || !l.n1.lp_n1.allFinite()) {
      ++out.n1.dropped;
    } else {
      n1_x.push_back(approx_features(cfg.n1_feature, n, l.base, line_ids));
      n1_y.push_back(l.n1.lp_n1);
      out.n1.sample_index.push_back(static_cast<int>(i));
    }
    ppf_x.push_back(approx_features(cfg.ppf_feature, n, l.base, line_ids));
    ppf_y.push_back(l.ppf.viol_prob);
    out.ppf.sample_index.push_back(static_cast<int>(i));
  }
  auto stack = [](const std::vector<Eigen::VectorXd>& cols) {
    if (cols.empty()) return Eigen::MatrixXd();
    Eigen::MatrixXd m(cols.front().size(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = cols[j];
    return m;
  };
  out.n1.inputs = stack(n1_x);
  out.n1.labels = stack(n1_y);
  out.ppf.inputs = stack(ppf_x);
  out.ppf.labels = stack(ppf_y);
  return out;
}

/// Seeded split into (train, test) with `test_fraction` of the columns held out.
inline std::pair<ApproxDataset, ApproxDataset> split(const ApproxDataset& d, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ValidationError("test fraction must lie in [0, 1)");
  std::vector<Eigen::Index> idx(d.size());
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
  const std::vector<Eigen::Index> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  const std::vector<Eigen::Index> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  return {d.subset(train), d.subset(test)};
}

// -------------------------------------------------------------- training

struct Approximator {
  ApproxKind kind = ApproxKind::n1;
  FeatureSet feature = FeatureSet::lp;
  std::vector<int> line_ids;
  Mlp model;
};

struct ApproxConfig {
  int hidden = 300;
  int hidden_layers = 1;
  TrainConfig train{1e-3, 64, 300, 0.9, 0.999, 1e-8, 0};
  double beta = 1.0;  // smooth-L1 threshold in the training label space
};

namespace detail {

inline Approximator train_approximator(const ApproxDataset& d, const ApproxConfig& cfg, Activation out_act,
                                       bool scale_labels) {
  if (d.size() == 0) throw ValidationError("cannot train an approximator on an empty dataset");
  std::vector<int> sizes{static_cast<int>(d.inputs.rows())};
  for (int l = 0; l < cfg.hidden_layers; ++l) sizes.push_back(cfg.hidden);
  sizes.push_back(static_cast<int>(d.labels.rows()));
  Approximator a{d.kind, d.feature, d.line_ids, make_mlp(sizes, out_act, cfg.train.seed)};
  a.model.input = Standardizer::fit(d.inputs);
  Eigen::MatrixXd y = d.labels;
  if (scale_labels) {
    a.model.output = Standardizer::fit(d.labels);
    y = a.model.output->apply(d.labels);
  }
  train_supervised(a.model, a.model.input.apply(d.inputs), y, cfg.train, cfg.beta);
  return a;
}

}  // namespace detail

/// N-1 loading regressor: identity output trained on standardized labels.
inline Approximator train_n1(const ApproxDataset& d, const ApproxConfig& cfg = {}) {
  return detail::train_approximator(d, cfg, Activation::identity, true);
}

/// Violation-probability regressor: sigmoid output, labels in [0, 1].
inline Approximator train_ppf(const ApproxDataset& d, const ApproxConfig& cfg = {}) {
  return detail::train_approximator(d, cfg, Activation::sigmoid, false);
}

inline Eigen::MatrixXd approx_predict(const Approximator& a, const Eigen::MatrixXd& inputs) {
  return predict(a.model, inputs);
}

struct ApproxMetrics {
  double mae = 0.0;            // percentage points
  double class_success = 0.0;  // agreement of violation flags
  long long elements = 0;
};

/// MAE (scaled to percentage points by `to_percent`) and flag agreement with
/// flag = value > threshold.
inline ApproxMetrics evaluate(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& labels, double threshold,
                              double to_percent = 1.0) {
  if (pred.rows() != labels.rows() || pred.cols() != labels.cols()) throw ValidationError("evaluate: shape mismatch");
  ApproxMetrics m;
  m.elements = static_cast<long long>(pred.size());
  if (m.elements == 0) return m;
  m.mae = (pred - labels).cwiseAbs().mean() * to_percent;
  long long agree = 0;
  for (Eigen::Index j = 0; j < pred.cols(); ++j)
    for (Eigen::Index i = 0; i < pred.rows(); ++i) agree += (pred(i, j) > threshold) == (labels(i, j) > threshold);
  m.class_success = static_cast<double>(agree) / static_cast<double>(m.elements);
  return m;
}

/// Threshold lp_max for N-1 approximators, `prob_threshold` for PPF ones.
inline ApproxMetrics evaluate(const Approximator& a, const ApproxDataset& d, double threshold) {
  return evaluate(approx_predict(a, d.inputs), d.labels, threshold, a.kind == ApproxKind::ppf ? 100.0 : 1.0);
}

// ------------------------------------------------------------ persistence

inline void save_dataset(const ApproxDataset& d, const std::filesystem::path& csv) {
  std::ofstream os(csv);
  if (!os) throw ValidationError("cannot write dataset " + csv.string());
  for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) os << (i ? "," : "") << 'x' << i;
  for (Eigen::Index i = 0; i < d.labels.rows(); ++i) os << (d.inputs.rows() + i ? "," : "") << 'y' << i;
  os << '\n';
  for (Eigen::Index j = 0; j < d.size(); ++j) {
    for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) os << (i ? "," : "") << detail::fmt(d.inputs(i, j));
    for (Eigen::Index i = 0; i < d.labels.rows(); ++i)
      os << (d.inputs.rows() + i ? "," : "") << detail::fmt(d.labels(i, j));
    os << '\n';
  }
  nlohmann::json meta{{"kind", to_string(d.kind)},          {"feature", to_string(d.feature)},
                      {"n_features", d.inputs.rows()},       {"n_labels", d.labels.rows()},
                      {"n_samples", d.size()},               {"dropped", d.dropped},
                      {"seed", d.seed},                      {"mode", d.mode},
                      {"line_ids", d.line_ids},              {"sample_index", d.sample_index}};
  std::ofstream js(csv.string() + ".json");
  js << meta.dump(2) << '\n';
}

inline ApproxDataset load_dataset(const std::filesystem::path& csv) {
  std::ifstream js(csv.string() + ".json");
  if (!js) throw ValidationError("missing dataset sidecar " + csv.string() + ".json");
  nlohmann::json meta;
  try {
    js >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad dataset sidecar: " + std::string(e.what()));
  }
  ApproxDataset d;
  d.kind = parse_approx_kind(meta.at("kind").get<std::string>());
  d.feature = parse_feature_set(meta.at("feature").get<std::string>());
  const auto nf = meta.at("n_features").get<Eigen::Index>();
  const auto nl = meta.at("n_labels").get<Eigen::Index>();
  const auto ns = meta.at("n_samples").get<Eigen::Index>();
  d.dropped = meta.value("dropped", 0);
  d.seed = meta.value("seed", std::uint64_t{0});
  d.mode = meta.value("mode", std::string{});
  d.line_ids = meta.value("line_ids", std::vector<int>{});
  d.sample_index = meta.value("sample_index", std::vector<int>{});
  d.inputs.resize(nf, ns);
  d.labels.resize(nl, ns);
  std::ifstream is(csv);
  if (!is) throw ValidationError("cannot open dataset " + csv.string());
  std::string line;
  std::getline(is, line);
  for (Eigen::Index j = 0; j < ns; ++j) {
    if (!std::getline(is, line)) throw ValidationError(csv.string() + ": fewer rows than the sidecar declares");
    std::stringstream ss(line);
    std::string cell;
    for (Eigen::Index i = 0; i < nf + nl; ++i) {
      if (!std::getline(ss, cell, ',')) throw ValidationError(csv.string() + ": short row " + std::to_string(j + 2));
      const double v = detail::parse_double(cell);
      if (i < nf)
        d.inputs(i, j) = v;
      else
        d.labels(i - nf, j) = v;
    }
  }
  return d;
}

inline void save_approximator(const Approximator& a, const std::filesystem::path& path) {
  save_mlp(a.model, path.string());
  nlohmann::json meta{{"kind", to_string(a.kind)}, {"feature", to_string(a.feature)}, {"line_ids", a.line_ids}};
  std::ofstream js(path.string() + ".json");
  js << meta.dump(2) << '\n';
}

inline Approximator load_approximator(const std::filesystem::path& path) {
  Approximator a;
  a.model = load_mlp(path.string());
  std::ifstream js(path.string() + ".json");
  if (!js) throw ValidationError("missing approximator sidecar " + path.string() + ".json");
  nlohmann::json meta;
  try {
    js >> meta;
    a.kind = parse_approx_kind(meta.at("kind").get<std::string>());
    a.feature = parse_feature_set(meta.at("feature").get<std::string>());
    a.line_ids = meta.at("line_ids").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad approximator sidecar: " + std::string(e.what()));
  }
  return a;
}

// ------------------------------------------------------------------ screens

/// Soft-constraint screen backed by the trained approximators.
class ApproximatorScreen : public SoftConstraintScreen {
 public:
  ApproximatorScreen(const Approximator& n1, const Approximator& ppf) : n1_(n1), ppf_(ppf) {
    if (n1.kind != ApproxKind::n1 || ppf.kind != ApproxKind::ppf)
      throw ValidationError("approximator screen: expected an N-1 and a PPF approximator");
  }

  [[nodiscard]] std::vector<ScreenResult> screen(const std::vector<ScreenInput>& in) const override {
    std::vector<ScreenResult> out(in.size());
    if (in.empty()) return out;
    auto features = [&](const Approximator& a) {
      Eigen::MatrixXd x;
      for (std::size_t i = 0; i < in.size(); ++i) {
        const Network n = needs_network(a.feature) ? in[i].problem->network_with(*in[i].setpoints) : Network{};
        const auto f = approx_features(a.feature, n, *in[i].base, a.line_ids);
        if (i == 0) x.resize(f.size(), static_cast<Eigen::Index>(in.size()));
        x.col(static_cast<Eigen::Index>(i)) = f;
      }
      return x;
    };
    const Eigen::MatrixXd lp = approx_predict(n1_, features(n1_));
    const Eigen::MatrixXd pr = approx_predict(ppf_, features(ppf_));
    for (std::size_t i = 0; i < in.size(); ++i) {
      out[i].line_ids = n1_.line_ids;
      out[i].lp_n1 = lp.col(static_cast<Eigen::Index>(i));
      out[i].bus_prob = pr.col(static_cast<Eigen::Index>(i));
    }
    return out;
  }

 private:
  const Approximator& n1_;
  const Approximator& ppf_;
};

/// Screen that runs the exact N-1 analysis and Monte-Carlo PPF. Point i uses
/// MC seed `spec.seed + i`.
class ExactScreen : public SoftConstraintScreen {
 public:
  ExactScreen(UncertaintySpec spec, double lp_max, unsigned threads = default_parallelism())
      : spec_(spec), lp_max_(lp_max), threads_(threads) {
    spec_.check();
  }

  [[nodiscard]] std::vector<ScreenResult> screen(const std::vector<ScreenInput>& in) const override {
    std::vector<ScreenResult> out(in.size());
    detail::ContingencyCache cache;
    parallel_for(in.size(), threads_, [&](std::size_t i) {
      UncertaintySpec spec = spec_;
      spec.seed = spec_.seed + i;
      const auto& p = *in[i].problem;
      const auto l = exact_labels(p, *in[i].setpoints, spec, lp_max_, cache.get(*p.net, *p.adm));
      out[i].line_ids = l.n1.line_ids;
      out[i].lp_n1 = l.base_converged ? l.n1.lp_n1 : Eigen::VectorXd();
      out[i].bus_prob = l.base_converged ? l.ppf.viol_prob : Eigen::VectorXd::Ones(static_cast<Eigen::Index>(p.net->buses.size()));
    });
    return out;
  }

 private:
  UncertaintySpec spec_;
  double lp_max_;
  unsigned threads_;
};

}  // namespace flexest
