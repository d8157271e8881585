#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "exitsim/nncore.hpp"
#include "support.hpp"

namespace exitsim::nn {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Net = Mlp<double>;

Net two_layer(int in, int hidden, int out, Activation head, std::uint64_t seed) {
  const int dims[] = {in, hidden, out};
  const Activation acts[] = {Activation::relu, head};
  auto net = Net::make(dims, acts, seed);
  std::mt19937_64 rng(seed ^ 0xb1a5);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& l : net.layers())
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = u(rng);
  return net;
}

VectorXd random_input(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g;
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

TEST(Forward, ZeroNetWithSigmoidHeadGivesHalf) {
  const int dims[] = {5, 3};
  const Activation acts[] = {Activation::sigmoid};
  auto net = Net::make(dims, acts, 1);
  net.layers()[0].weights.setZero();
  std::mt19937_64 rng(2);
  const VectorXd out = forward(net, random_input(rng, 5));
  for (Eigen::Index i = 0; i < out.size(); ++i) EXPECT_EQ(out(i), 0.5);
}

TEST(Forward, IdentityLayerReturnsInput) {
  DenseLayer<double> l{MatrixXd::Identity(4, 4), VectorXd::Zero(4), Activation::identity};
  const Net net({l}, 0);
  std::mt19937_64 rng(3);
  const VectorXd x = random_input(rng, 4);
  EXPECT_EQ(forward(net, x), x);
}

TEST(Forward, TwoLayerMatchesHandArithmetic) {
  const auto net = two_layer(3, 5, 2, Activation::identity, 42);
  const auto& l1 = net.layers()[0];
  const auto& l2 = net.layers()[1];
  const double x[3] = {0.3, -1.2, 2.0};
  double h[5];
  for (int r = 0; r < 5; ++r) {
    double z = l1.bias(r);
    for (int c = 0; c < 3; ++c) z += l1.weights(r, c) * x[c];
    h[r] = z > 0.0 ? z : 0.0;
  }
  const VectorXd out = forward(net, VectorXd(Eigen::Map<const VectorXd>(x, 3)));
  for (int r = 0; r < 2; ++r) {
    double z = l2.bias(r);
    for (int c = 0; c < 5; ++c) z += l2.weights(r, c) * h[c];
    EXPECT_NEAR(out(r), z, 1e-12);
  }
}

TEST(Forward, DimensionMismatchThrows) {
  const auto net = two_layer(3, 4, 2, Activation::identity, 1);
  EXPECT_THROW(forward(net, VectorXd(VectorXd::Zero(4))), DimensionError);
  DenseLayer<double> a{MatrixXd::Zero(3, 2), VectorXd::Zero(3), Activation::relu};
  DenseLayer<double> b{MatrixXd::Zero(1, 4), VectorXd::Zero(1), Activation::identity};
  EXPECT_THROW(Net({a, b}, 0), DimensionError);
}

TEST(Forward, InitializationIsGlorotUniform) {
  const int dims[] = {30, 20};
  const Activation acts[] = {Activation::identity};
  const auto net = Net::make(dims, acts, 9);
  const double limit = std::sqrt(6.0 / 50.0);
  EXPECT_LE(net.layers()[0].weights.cwiseAbs().maxCoeff(), limit);
  EXPECT_GT(net.layers()[0].weights.cwiseAbs().maxCoeff(), 0.9 * limit);
  EXPECT_TRUE(net.layers()[0].bias.isZero());
}

TEST(Activations, SoftmaxSumsToOneAndSigmoidIsOpen) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 30.0);
  for (int trial = 0; trial < 200; ++trial) {
    MatrixXd z(7, 3);
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = g(rng);
    const MatrixXd p = softmax(z);
    EXPECT_GE(p.minCoeff(), 0.0);
    for (Eigen::Index c = 0; c < 3; ++c) EXPECT_NEAR(p.col(c).sum(), 1.0, 1e-9);
    const MatrixXd s = sigmoid(z / 10.0);
    EXPECT_GT(s.minCoeff(), 0.0);
    EXPECT_LT(s.maxCoeff(), 1.0);
  }
}

TEST(Losses, BceAtSymmetricPoint) {
  EXPECT_NEAR(bce_loss(VectorXd::Constant(2, 0.5), VectorXd((VectorXd(2) << 1, 0).finished())), std::log(2.0), 1e-15);
}

TEST(Losses, BcePerfectFitIsBoundedByClamp) {
  const VectorXd y = (VectorXd(4) << 1, 0, 1, 0).finished();
  EXPECT_LE(bce_loss(y, y), -std::log(1.0 - kBceClamp) + 1e-15);
  EXPECT_GE(bce_loss(y, y), 0.0);
}

TEST(Losses, BceMatchesScalarLoop) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  VectorXd s(8), y(8);
  double oracle = 0.0;
  for (int i = 0; i < 8; ++i) {
    s(i) = u(rng);
    y(i) = u(rng) < 0.5 ? 0.0 : 1.0;
    oracle += y(i) == 1.0 ? -std::log(s(i)) : -std::log(1.0 - s(i));
  }
  EXPECT_NEAR(bce_loss(s, y), oracle / 8.0, 1e-12);
  EXPECT_THROW(bce_loss(s, VectorXd::Zero(7)), DimensionError);
}

TEST(Losses, WeightedCeOfUniformLogitsIsLogP) {
  const std::vector<VectorXd> z(3, VectorXd::Constant(6, 0.7));
  const double w[] = {0.2, 0.3, 0.5};
  EXPECT_NEAR(weighted_ce_loss<double>(z, 4, w), std::log(6.0), 1e-12);
}

TEST(Losses, WeightedCeWithIdenticalLogitsIsPlainCe) {
  const VectorXd logits = (VectorXd(4) << 1.5, -0.3, 0.2, 2.2).finished();
  const std::vector<VectorXd> z(3, logits);
  const double w[] = {0.2, 0.3, 0.5};
  EXPECT_NEAR(weighted_ce_loss<double>(z, 1, w), cross_entropy(logits, 1), 1e-12);
}

TEST(Losses, WeightedCeMatchesPerExitLoop) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g(0.0, 2.0);
  std::vector<VectorXd> z;
  const double w[] = {0.7, 0.1, 1.3};
  double oracle = 0.0;
  const int label = 2;
  for (int n = 0; n < 3; ++n) {
    VectorXd v(4);
    double norm = 0.0;
    for (int k = 0; k < 4; ++k) {
      v(k) = g(rng);
      norm += std::exp(v(k));
    }
    oracle += w[n] * -std::log(std::exp(v(label)) / norm);
    z.push_back(v);
  }
  EXPECT_NEAR(weighted_ce_loss<double>(z, label, w), oracle, 1e-12);
  const double short_w[] = {1.0, 1.0};
  EXPECT_THROW(weighted_ce_loss<double>(z, label, short_w), DimensionError);
}

TEST(Training, SeparableTwoPointTaskConverges) {
  const int dims[] = {2, 8, 1};
  const Activation acts[] = {Activation::relu, Activation::sigmoid};
  const MatrixXd x = (MatrixXd(2, 2) << 1, -1, 1, -1).finished();
  const MatrixXd y = (MatrixXd(1, 2) << 1, 0).finished();
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.epochs = 200;
  cfg.batch_size = 2;
  const auto r = train(Net::make(dims, acts, 4), x, y, LossSpec<double>::bce(), cfg);
  ASSERT_EQ(r.loss_curve.size(), 200u);
  EXPECT_LT(r.loss_curve.back(), 0.1);
}

TEST(Training, ZeroEpochsLeavesParametersUnchanged) {
  const auto net = two_layer(3, 4, 2, Activation::sigmoid, 5);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto r = train(net, MatrixXd(MatrixXd::Ones(3, 4)), MatrixXd(MatrixXd::Zero(2, 4)), LossSpec<double>::bce(), cfg);
  EXPECT_EQ(r.net, net);
  EXPECT_TRUE(r.loss_curve.empty());
}

TEST(Training, SameSeedIsBitIdentical) {
  std::mt19937_64 rng(6);
  MatrixXd x(4, 50), y(2, 50);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = std::normal_distribution<double>()(rng);
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = rng() % 2;
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 7;
  cfg.weight_decay = 2e-4;
  cfg.learning_rate = 0.1;
  cfg.final_learning_rate = 1e-4;
  cfg.anneal_epochs = 15;
  const auto net = two_layer(4, 6, 2, Activation::sigmoid, 3);
  const auto a = train(net, x, y, LossSpec<double>::bce(), cfg);
  const auto b = train(net, x, y, LossSpec<double>::bce(), cfg);
  EXPECT_EQ(a.net, b.net);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  cfg.seed = 2;
  EXPECT_FALSE(train(net, x, y, LossSpec<double>::bce(), cfg).net == a.net);
}

TEST(Training, DivergenceReportsEpoch) {
  const MatrixXd x = MatrixXd::Constant(1, 4, 100.0);
  const MatrixXd y = MatrixXd::Constant(1, 4, 1.0);
  DenseLayer<double> l{MatrixXd::Constant(1, 1, 1.0), VectorXd::Zero(1), Activation::identity};
  TrainConfig cfg;
  cfg.learning_rate = 10.0;
  cfg.epochs = 500;
  cfg.batch_size = 4;
  try {
    train(Net({l}, 0), x, y, LossSpec<double>::mse(), cfg);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.epoch(), 1);
  }
}

TEST(Training, CosineScheduleEndpoints) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.final_learning_rate = 1e-4;
  cfg.anneal_epochs = 200;
  cfg.epochs = 220;
  EXPECT_DOUBLE_EQ(cfg.rate_at(0), 0.1);
  EXPECT_NEAR(cfg.rate_at(100), 0.5 * (0.1 + 1e-4), 1e-12);
  EXPECT_DOUBLE_EQ(cfg.rate_at(210), 1e-4);
  cfg.anneal_epochs = 300;
  EXPECT_THROW(cfg.validate(), InvariantError);
}

TEST(GradientCheck, BceOnRandomTwoLayerNets) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto net = two_layer(4, 6, 3, Activation::sigmoid, 100 + trial);
    VectorXd t(3);
    for (int i = 0; i < 3; ++i) t(i) = rng() % 2;
    EXPECT_LT(numeric_gradient_check(net, random_input(rng, 4), t, LossSpec<double>::bce()), 1e-5) << trial;
  }
}

TEST(GradientCheck, WeightedCeOnRandomTwoLayerNets) {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const int exits = 3, classes = 4;
    const auto net = two_layer(5, 6, exits * classes, Activation::identity, 200 + trial);
    VectorXd t = VectorXd::Zero(classes);
    t(static_cast<Eigen::Index>(rng() % classes)) = 1.0;
    const auto loss = LossSpec<double>::weighted({0.2, 0.3, 0.5});
    EXPECT_LT(numeric_gradient_check(net, random_input(rng, 5), t, loss), 1e-5) << trial;
  }
}

TEST(GradientCheck, LinearSigmoidAtSymmetricPointMatchesClosedForm) {
  DenseLayer<double> l{MatrixXd::Zero(2, 3), VectorXd::Zero(2), Activation::sigmoid};
  const Net net({l}, 0);
  const VectorXd x = (VectorXd(3) << 0.5, -2.0, 1.5).finished();
  const VectorXd y = (VectorXd(2) << 1.0, 0.0).finished();
  const auto grads = loss_gradients(net, MatrixXd(x), MatrixXd(y), LossSpec<double>::bce()).second;
  // dL/dW = (s - y) x^T / 2 with s = 0.5.
  for (int r = 0; r < 2; ++r) {
    EXPECT_NEAR(grads[0].bias(r), (0.5 - y(r)) / 2.0, 1e-7);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(grads[0].weights(r, c), (0.5 - y(r)) * x(c) / 2.0, 1e-7);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto net = two_layer(4, 7, 3, Activation::softmax, 77);
  const auto dir = testing::scratch_dir("mlp-checkpoint");
  save_checkpoint(net, dir / "net.json");
  EXPECT_EQ(load_checkpoint<double>(dir / "net.json"), net);
  EXPECT_EQ(mlp_from_json<double>(to_json(net)), net);
}

TEST(Checkpoint, RejectsMalformedDocuments) {
  auto j = to_json(two_layer(2, 3, 1, Activation::sigmoid, 1));
  j["layers"][0]["weights"].erase(0);
  EXPECT_THROW(mlp_from_json<double>(j), Error);
  EXPECT_THROW(mlp_from_json<double>(nlohmann::json{{"format", "other"}}), Error);
}

}  // namespace
}  // namespace exitsim::nn
