#pragma once

// Small dense multilayer perceptron trained with Adam. Samples are stored
// column-wise: a batch is a (features x samples) matrix.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flexest/errors.hpp"

namespace flexest {

enum class Activation { relu, tanh, sigmoid, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "identity";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "identity") return Activation::identity;
  throw ValidationError("unknown activation '" + s + "'");
}

struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  /// Fits per-row statistics; zero-variance rows get std = 1.
  static Standardizer fit(const Eigen::MatrixXd& x) {
    Standardizer s;
    const auto n = static_cast<double>(std::max<Eigen::Index>(x.cols(), 1));
    s.mean = x.rowwise().sum() / n;
    s.std = ((x.colwise() - s.mean).array().square().rowwise().sum() / n).sqrt().matrix();
    for (Eigen::Index i = 0; i < s.std.size(); ++i)
      if (!(s.std[i] > 1e-12)) s.std[i] = 1.0;
    return s;
  }

  static Standardizer identity(Eigen::Index n) { return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Ones(n)}; }

  [[nodiscard]] Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    if (x.rows() != mean.size()) throw ValidationError("standardizer: feature count mismatch");
    return (x.colwise() - mean).array().colwise() / std.array();
  }

  [[nodiscard]] Eigen::MatrixXd invert(const Eigen::MatrixXd& z) const {
    if (z.rows() != mean.size()) throw ValidationError("standardizer: feature count mismatch");
    return (z.array().colwise() * std.array()).matrix().colwise() + mean;
  }

  bool operator==(const Standardizer&) const = default;
};

struct Mlp {
  std::vector<int> layer_sizes;
  std::vector<Eigen::MatrixXd> weights;  // weights[l]: sizes[l+1] x sizes[l]
  std::vector<Eigen::VectorXd> biases;
  Activation hidden_activation = Activation::relu;
  Activation output_activation = Activation::tanh;
  Standardizer input;
  std::optional<Standardizer> output;  // label scaling for identity-output regressors
  std::string config_hash;

  [[nodiscard]] int inputs() const { return layer_sizes.front(); }
  [[nodiscard]] int outputs() const { return layer_sizes.back(); }
  [[nodiscard]] std::size_t layers() const { return weights.size(); }

  [[nodiscard]] Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  /// Flat parameter view: per layer, weights column-major then biases.
  [[nodiscard]] Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(parameter_count());
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      p.segment(k, weights[l].size()) = weights[l].reshaped();
      k += weights[l].size();
      p.segment(k, biases[l].size()) = biases[l];
      k += biases[l].size();
    }
    return p;
  }

  void set_parameters(const Eigen::VectorXd& p) {
    if (p.size() != parameter_count()) throw ValidationError("set_parameters: size mismatch");
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l].reshaped() = p.segment(k, weights[l].size());
      k += weights[l].size();
      biases[l] = p.segment(k, biases[l].size());
      k += biases[l].size();
    }
  }

  bool operator==(const Mlp&) const = default;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
inline Mlp make_mlp(std::vector<int> layer_sizes, Activation output_activation, std::uint64_t seed,
                    Activation hidden_activation = Activation::relu) {
  if (layer_sizes.size() < 2) throw ValidationError("mlp needs at least an input and an output layer");
  for (int s : layer_sizes)
    if (s < 1) throw ValidationError("mlp layer sizes must be positive");
  Mlp m;
  m.layer_sizes = std::move(layer_sizes);
  m.hidden_activation = hidden_activation;
  m.output_activation = output_activation;
  m.input = Standardizer::identity(m.layer_sizes.front());
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.layer_sizes[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    Eigen::MatrixXd w(m.layer_sizes[l + 1], m.layer_sizes[l]);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
    Eigen::VectorXd b(m.layer_sizes[l + 1]);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = u(rng);
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  return m;
}

namespace detail {

inline void activate(Eigen::MatrixXd& z, Activation a) {
  switch (a) {
    case Activation::relu: z = z.cwiseMax(0.0); break;
    case Activation::tanh: z = z.array().tanh(); break;
    case Activation::sigmoid: z = (1.0 / (1.0 + (-z.array()).exp())).matrix(); break;
    case Activation::identity: break;
  }
}

// Derivative expressed through the activation output y.
inline Eigen::MatrixXd activation_slope(const Eigen::MatrixXd& y, Activation a) {
  switch (a) {
    case Activation::relu: return (y.array() > 0.0).cast<double>();
    case Activation::tanh: return 1.0 - y.array().square();
    case Activation::sigmoid: return y.array() * (1.0 - y.array());
    case Activation::identity: return Eigen::MatrixXd::Ones(y.rows(), y.cols());
  }
  return Eigen::MatrixXd::Ones(y.rows(), y.cols());
}

}  // namespace detail

/// Layer activations for standardized inputs; acts[0] = x, acts.back() = output.
inline std::vector<Eigen::MatrixXd> forward_trace(const Mlp& m, const Eigen::MatrixXd& x) {
  if (x.rows() != m.inputs()) throw ValidationError("forward: input size mismatch");
  std::vector<Eigen::MatrixXd> acts;
  acts.reserve(m.layers() + 1);
  acts.push_back(x);
  for (std::size_t l = 0; l < m.layers(); ++l) {
    Eigen::MatrixXd z = m.weights[l] * acts.back();
    z.colwise() += m.biases[l];
    detail::activate(z, l + 1 == m.layers() ? m.output_activation : m.hidden_activation);
    acts.push_back(std::move(z));
  }
  return acts;
}

/// Network output for standardized inputs (one column per sample).
inline Eigen::MatrixXd forward(const Mlp& m, const Eigen::MatrixXd& x) { return forward_trace(m, x).back(); }

inline Eigen::VectorXd forward(const Mlp& m, const Eigen::VectorXd& x) {
  return forward(m, Eigen::MatrixXd(x)).col(0);
}

/// Raw features in, physical outputs out (applies both standardizers).
inline Eigen::MatrixXd predict(const Mlp& m, const Eigen::MatrixXd& raw) {
  Eigen::MatrixXd y = forward(m, m.input.apply(raw));
  if (m.output) y = m.output->invert(y);
  return y;
}

struct LossGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // d loss / d pred
};

/// Smooth L1 (Huber with threshold beta), mean over all elements.
inline LossGrad smooth_l1(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& label, double beta = 1.0) {
  if (!(beta > 0.0)) throw ValidationError("smooth_l1: beta must be positive");
  if (pred.rows() != label.rows() || pred.cols() != label.cols())
    throw ValidationError("smooth_l1: shape mismatch");
  const auto n = static_cast<double>(std::max<Eigen::Index>(pred.size(), 1));
  LossGrad out;
  out.grad.resize(pred.rows(), pred.cols());
  double sum = 0.0;
  for (Eigen::Index j = 0; j < pred.cols(); ++j)
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
      const double d = pred(i, j) - label(i, j);
      const double ad = std::abs(d);
      if (ad < beta) {
        sum += 0.5 * d * d / beta;
        out.grad(i, j) = d / beta / n;
      } else {
        sum += ad - 0.5 * beta;
        out.grad(i, j) = (d > 0 ? 1.0 : -1.0) / n;
      }
    }
  out.loss = sum / n;
  return out;
}

struct Gradients {
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;

  static Gradients zeros_like(const Mlp& m) {
    Gradients g;
    for (std::size_t l = 0; l < m.layers(); ++l) {
      g.w.push_back(Eigen::MatrixXd::Zero(m.weights[l].rows(), m.weights[l].cols()));
      g.b.push_back(Eigen::VectorXd::Zero(m.biases[l].size()));
    }
    return g;
  }

  [[nodiscard]] Eigen::VectorXd flat() const {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l < w.size(); ++l) n += w[l].size() + b[l].size();
    Eigen::VectorXd p(n);
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < w.size(); ++l) {
      p.segment(k, w[l].size()) = w[l].reshaped();
      k += w[l].size();
      p.segment(k, b[l].size()) = b[l];
      k += b[l].size();
    }
    return p;
  }
};

/// d L / d params for L whose gradient w.r.t. the outputs is `dl_dout`
/// (summed over columns).
inline Gradients parameter_gradients(const Mlp& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& dl_dout) {
  const auto acts = forward_trace(m, x);
  if (dl_dout.rows() != m.outputs() || dl_dout.cols() != x.cols())
    throw ValidationError("parameter_gradients: output gradient shape mismatch");
  Gradients g = Gradients::zeros_like(m);
  Eigen::MatrixXd delta =
      dl_dout.cwiseProduct(detail::activation_slope(acts.back(), m.output_activation));
  for (std::size_t l = m.layers(); l-- > 0;) {
    g.w[l].noalias() = delta * acts[l].transpose();
    g.b[l] = delta.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd back = m.weights[l].transpose() * delta;
      delta = back.cwiseProduct(detail::activation_slope(acts[l], m.hidden_activation));
    }
  }
  return g;
}

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 256;
  int epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;

  void check() const {
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
    if (batch_size < 1) throw ValidationError("batch_size must be positive");
    if (epochs < 0) throw ValidationError("epochs must be >= 0");
  }
};

struct AdamState {
  Gradients m;
  Gradients v;
  long long t = 0;
};

inline void adam_step(Mlp& model, const Gradients& g, AdamState& st, const TrainConfig& cfg) {
  if (st.m.w.empty()) {
    st.m = Gradients::zeros_like(model);
    st.v = Gradients::zeros_like(model);
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
    param.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
  };
  for (std::size_t l = 0; l < model.layers(); ++l) {
    update(model.weights[l], g.w[l], st.m.w[l], st.v.w[l]);
    update(model.biases[l], g.b[l], st.m.b[l], st.v.b[l]);
  }
}

/// Chain rule from an externally computed output gradient, followed by one
/// Adam step. Returns the parameter gradient that was applied.
inline Gradients backprop_action_grads(Mlp& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& dl_da,
                                       AdamState& state, const TrainConfig& cfg) {
  if (dl_da.rows() != model.outputs()) throw ValidationError("backprop_action_grads: gradient size mismatch");
  Gradients g = parameter_gradients(model, x, dl_da);
  adam_step(model, g, state, cfg);
  return g;
}

/// Mini-batch Adam on smooth-L1. `x` is standardized; `y` is in the model's
/// output space. Returns the per-epoch mean loss.
inline std::vector<double> train_supervised(Mlp& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                                            const TrainConfig& cfg, double beta = 1.0) {
  cfg.check();
  if (x.cols() == 0) throw ValidationError("train_supervised: empty dataset");
  if (x.cols() != y.cols() || y.rows() != model.outputs() || x.rows() != model.inputs())
    throw ValidationError("train_supervised: dataset shape mismatch");
  std::mt19937_64 rng(cfg.seed);
  std::vector<Eigen::Index> order(x.cols());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  AdamState state;
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::vector<Eigen::Index> idx(order.begin() + start, order.begin() + end);
      const Eigen::MatrixXd xb = x(Eigen::all, idx);
      const Eigen::MatrixXd yb = y(Eigen::all, idx);
      const auto lg = smooth_l1(forward(model, xb), yb, beta);
      if (!std::isfinite(lg.loss))
        throw NumericalError("train_supervised: non-finite loss in epoch " + std::to_string(epoch));
      total += lg.loss * static_cast<double>(idx.size());
      adam_step(model, parameter_gradients(model, xb, lg.grad), state, cfg);
    }
    history.push_back(total / static_cast<double>(order.size()));
  }
  return history;
}

// ---------------------------------------------------------------- persistence

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline double parse_double(const std::string& tok) {
  double v = 0.0;
  const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (r.ec != std::errc{} || r.ptr != tok.data() + tok.size()) throw ValidationError("model file: bad number '" + tok + "'");
  return v;
}

}  // namespace detail

inline constexpr const char* kModelMagic = "flexest-mlp";
inline constexpr int kModelVersion = 1;

inline void save_mlp(const Mlp& m, std::ostream& os) {
  os << kModelMagic << ' ' << kModelVersion << '\n';
  os << "config_hash " << (m.config_hash.empty() ? "-" : m.config_hash) << '\n';
  os << "activations " << to_string(m.hidden_activation) << ' ' << to_string(m.output_activation) << '\n';
  os << "layers " << m.layer_sizes.size();
  for (int s : m.layer_sizes) os << ' ' << s;
  os << '\n';
  auto vec = [&](const char* name, const Eigen::VectorXd& v) {
    os << name;
    for (double x : v) os << ' ' << detail::fmt(x);
    os << '\n';
  };
  vec("input_mean", m.input.mean);
  vec("input_std", m.input.std);
  os << "output_scaler " << (m.output ? 1 : 0) << '\n';
  if (m.output) {
    vec("output_mean", m.output->mean);
    vec("output_std", m.output->std);
  }
  for (std::size_t l = 0; l < m.layers(); ++l) {
    os << "weights " << l;
    for (Eigen::Index i = 0; i < m.weights[l].rows(); ++i)
      for (Eigen::Index j = 0; j < m.weights[l].cols(); ++j) os << ' ' << detail::fmt(m.weights[l](i, j));
    os << '\n';
    vec("bias", m.biases[l]);
  }
}

inline Mlp load_mlp(std::istream& is) {
  std::string line;
  auto next = [&](const std::string& key) {
    if (!std::getline(is, line)) throw ValidationError("model file: truncated before '" + key + "'");
    std::istringstream ss(line);
    std::string k;
    ss >> k;
    if (k != key) throw ValidationError("model file: expected '" + key + "', found '" + k + "'");
    std::vector<std::string> toks;
    for (std::string t; ss >> t;) toks.push_back(t);
    return toks;
  };
  auto doubles = [&](const std::vector<std::string>& toks, std::size_t from, Eigen::Index n) {
    if (static_cast<Eigen::Index>(toks.size() - from) != n) throw ValidationError("model file: wrong value count");
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = detail::parse_double(toks[from + i]);
    return v;
  };
  const auto head = next(kModelMagic);
  if (head.size() != 1 || head[0] != std::to_string(kModelVersion))
    throw ValidationError("model file: unsupported version");
  Mlp m;
  const auto hash = next("config_hash");
  m.config_hash = hash.empty() || hash[0] == "-" ? "" : hash[0];
  const auto acts = next("activations");
  if (acts.size() != 2) throw ValidationError("model file: bad activations line");
  m.hidden_activation = parse_activation(acts[0]);
  m.output_activation = parse_activation(acts[1]);
  const auto layers = next("layers");
  if (layers.empty()) throw ValidationError("model file: bad layers line");
  const auto count = static_cast<std::size_t>(detail::parse_double(layers[0]));
  if (count < 2 || layers.size() != count + 1) throw ValidationError("model file: bad layers line");
  for (std::size_t i = 1; i <= count; ++i) {
    const int s = static_cast<int>(detail::parse_double(layers[i]));
    if (s < 1) throw ValidationError("model file: bad layer size");
    m.layer_sizes.push_back(s);
  }
  const Eigen::Index nin = m.layer_sizes.front(), nout = m.layer_sizes.back();
  m.input.mean = doubles(next("input_mean"), 0, nin);
  m.input.std = doubles(next("input_std"), 0, nin);
  const auto scaler = next("output_scaler");
  if (scaler.size() == 1 && scaler[0] == "1") {
    Standardizer s;
    s.mean = doubles(next("output_mean"), 0, nout);
    s.std = doubles(next("output_std"), 0, nout);
    m.output = s;
  }
  for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
    const auto rows = m.layer_sizes[l + 1], cols = m.layer_sizes[l];
    const auto flat = doubles(next("weights"), 1, static_cast<Eigen::Index>(rows) * cols);
    Eigen::MatrixXd w(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = flat[i * cols + j];
    m.weights.push_back(std::move(w));
    m.biases.push_back(doubles(next("bias"), 0, rows));
  }
  for (const auto& w : m.weights)
    if (!w.allFinite()) throw ValidationError("model file: non-finite weights");
  return m;
}

inline void save_mlp(const Mlp& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write model file " + path);
  save_mlp(m, os);
}

inline Mlp load_mlp(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open model file " + path);
  return load_mlp(is);
}

}  // namespace flexest
