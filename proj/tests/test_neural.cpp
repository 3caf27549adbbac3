#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "flexest/neural.hpp"

using namespace flexest;

namespace {

double smooth_l1_ref(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = n(rng);
  return m;
}

double loss_at(Mlp m, const Eigen::VectorXd& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  m.set_parameters(p);
  return smooth_l1(forward(m, x), y, 0.5).loss;
}

}  // namespace

TEST(Neural, InitIsSeededUniformFanIn) {
  const auto a = make_mlp({20, 30, 4}, Activation::tanh, 5);
  const auto b = make_mlp({20, 30, 4}, Activation::tanh, 5);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, make_mlp({20, 30, 4}, Activation::tanh, 6));
  EXPECT_LE(a.weights[0].cwiseAbs().maxCoeff(), 1.0 / std::sqrt(20.0));
  EXPECT_LE(a.weights[1].cwiseAbs().maxCoeff(), 1.0 / std::sqrt(30.0));
  EXPECT_GT(a.weights[0].cwiseAbs().maxCoeff(), 0.9 / std::sqrt(20.0));
  EXPECT_EQ(a.parameter_count(), 20 * 30 + 30 + 30 * 4 + 4);
  EXPECT_THROW(make_mlp({3}, Activation::tanh, 0), ValidationError);
}

TEST(Neural, SmoothL1MatchesDefinition) {
  Eigen::MatrixXd p(2, 2), y(2, 2);
  p << 0.2, 3.0, -1.5, 0.0;
  y << 0.0, 0.5, 0.5, 0.1;
  const double beta = 1.0;
  const auto lg = smooth_l1(p, y, beta);
  double ref = 0.0;
  for (Eigen::Index i = 0; i < 4; ++i) ref += smooth_l1_ref(p(i) - y(i), beta);
  EXPECT_DOUBLE_EQ(lg.loss, ref / 4.0);
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double h = 1e-6;
    const double fd = (smooth_l1_ref(p(i) + h - y(i), beta) - smooth_l1_ref(p(i) - h - y(i), beta)) / (2 * h) / 4.0;
    EXPECT_NEAR(lg.grad(i), fd, 1e-8);
  }
}

TEST(Neural, BackpropMatchesFiniteDifferences) {
  for (auto out : {Activation::tanh, Activation::sigmoid, Activation::identity}) {
    const Mlp m = make_mlp({3, 4, 3, 2}, out, 9, Activation::tanh);  // 39 parameters
    ASSERT_LE(m.parameter_count(), 50);
    const auto x = random_matrix(3, 6, 1);
    const auto y = random_matrix(2, 6, 2, 0.5);
    const auto lg = smooth_l1(forward(m, x), y, 0.5);
    const auto g = parameter_gradients(m, x, lg.grad).flat();
    const auto p = m.parameters();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double h = 1e-5;
      auto up = p, dn = p;
      up[i] += h;
      dn[i] -= h;
      const double fd = (loss_at(m, up, x, y) - loss_at(m, dn, x, y)) / (2 * h);
      EXPECT_NEAR(g[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << to_string(out) << " param " << i;
    }
  }
}

TEST(Neural, ReluBackpropAwayFromKinks) {
  Mlp m = make_mlp({2, 6, 1}, Activation::identity, 4);
  const auto x = random_matrix(2, 5, 7);
  const auto y = random_matrix(1, 5, 8);
  const auto lg = smooth_l1(forward(m, x), y, 1.0);
  const auto g = parameter_gradients(m, x, lg.grad).flat();
  const auto p = m.parameters();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    auto up = p, dn = p;
    up[i] += 1e-6;
    dn[i] -= 1e-6;
    Mlp a = m, b = m;
    a.set_parameters(up);
    b.set_parameters(dn);
    const double fd = (smooth_l1(forward(a, x), y, 1.0).loss - smooth_l1(forward(b, x), y, 1.0).loss) / 2e-6;
    EXPECT_NEAR(g[i], fd, 1e-6);
  }
}

TEST(Neural, AdamFirstStepIsSignedLearningRate) {
  Mlp m = make_mlp({2, 3, 1}, Activation::identity, 1);
  const auto before = m.parameters();
  Gradients g = Gradients::zeros_like(m);
  g.w[0](0, 0) = 0.3;
  g.w[1](0, 1) = -2.0;
  AdamState st;
  TrainConfig tc;
  tc.learning_rate = 0.01;
  adam_step(m, g, st, tc);
  const Eigen::VectorXd d = m.parameters() - before;
  // bias-corrected first step: -lr * g / (|g| + eps)
  EXPECT_NEAR(d[0], -0.01 * 0.3 / (0.3 + 1e-8), 1e-12);
  EXPECT_NEAR((m.weights[1] - make_mlp({2, 3, 1}, Activation::identity, 1).weights[1])(0, 1), 0.01, 1e-9);
  EXPECT_EQ((d.array() != 0.0).count(), 2);
}

TEST(Neural, SupervisedTrainingFitsAndIsDeterministic) {
  const auto x = random_matrix(2, 200, 3);
  Eigen::MatrixXd y(1, 200);
  for (Eigen::Index j = 0; j < 200; ++j) y(0, j) = std::sin(x(0, j)) + 0.5 * x(1, j);
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.batch_size = 32;
  tc.epochs = 150;
  tc.seed = 4;
  Mlp a = make_mlp({2, 32, 1}, Activation::identity, 2);
  Mlp b = a;
  const auto ha = train_supervised(a, x, y, tc);
  const auto hb = train_supervised(b, x, y, tc);
  EXPECT_EQ(a, b);
  EXPECT_EQ(ha, hb);
  EXPECT_LT(ha.back(), 0.05 * ha.front());
}

TEST(Neural, NonFiniteLossThrows) {
  Mlp m = make_mlp({1, 2, 1}, Activation::identity, 0);
  Eigen::MatrixXd x(1, 2), y(1, 2);
  x << 1.0, 2.0;
  y << std::nan(""), 0.0;
  EXPECT_THROW(train_supervised(m, x, y, {}), NumericalError);
}

TEST(Neural, SaveLoadRoundTripIsBitExact) {
  Mlp m = make_mlp({4, 7, 3}, Activation::sigmoid, 11);
  m.input = Standardizer::fit(random_matrix(4, 30, 5, 3.0));
  m.output = Standardizer::fit(random_matrix(3, 30, 6, 0.1));
  m.config_hash = "0123456789abcdef";
  std::stringstream ss;
  save_mlp(m, ss);
  const auto back = load_mlp(ss);
  EXPECT_EQ(back, m);
  const auto x = random_matrix(4, 5, 9);
  EXPECT_EQ(predict(back, x), predict(m, x));
}

TEST(Neural, LoadRejectsGarbage) {
  std::stringstream bad("not-a-model 1\n");
  EXPECT_THROW(load_mlp(bad), ValidationError);
  Mlp m = make_mlp({2, 2, 1}, Activation::tanh, 0);
  std::stringstream ss;
  save_mlp(m, ss);
  auto text = ss.str();
  text.resize(text.size() / 2);
  std::stringstream cut(text);
  EXPECT_THROW(load_mlp(cut), ValidationError);
}

TEST(Neural, StandardizerInverts) {
  const auto x = random_matrix(3, 40, 2, 5.0);
  const auto s = Standardizer::fit(x);
  const auto z = s.apply(x);
  EXPECT_LT(z.rowwise().mean().cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((s.invert(z) - x).cwiseAbs().maxCoeff(), 1e-12);
}
