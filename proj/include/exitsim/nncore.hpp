#pragma once

// Minimal dense network core: forward, backward, losses and plain SGD.
//
// Batches are column-major: an input batch is (input_dim x batch), one sample
// per column. Everything is templated on the scalar type; the rest of the
// project instantiates it with double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "exitsim/error.hpp"
#include "exitsim/io.hpp"

namespace exitsim::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class Activation { relu, sigmoid, softmax, identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softmax: return "softmax";
    case Activation::identity: return "identity";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "softmax") return Activation::softmax;
  if (s == "identity") return Activation::identity;
  throw InvariantError("unknown activation '" + s + "'");
}

template <typename Scalar>
struct DenseLayer {
  Matrix<Scalar> weights;  // out x in
  Vector<Scalar> bias;     // out
  Activation activation = Activation::identity;

  Eigen::Index in() const { return weights.cols(); }
  Eigen::Index out() const { return weights.rows(); }
};

template <typename Scalar>
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::vector<DenseLayer<Scalar>> layers, std::uint64_t seed) : layers_(std::move(layers)), seed_(seed) {
    if (layers_.empty()) throw DimensionError("mlp: at least one layer required");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.out()) throw DimensionError("mlp: bias/weight mismatch in layer " + std::to_string(i));
      if (i > 0 && layers_[i - 1].out() != l.in()) {
        throw DimensionError("mlp: layer " + std::to_string(i) + " input does not chain");
      }
      if (!l.weights.allFinite() || !l.bias.allFinite()) {
        throw InvariantError("mlp: non-finite parameter in layer " + std::to_string(i));
      }
    }
  }

  /// Fully connected net with dims = {in, h1, ..., out} and one activation per
  /// layer. Weights are Glorot-uniform from `seed`, biases zero.
  static Mlp make(std::span<const int> dims, std::span<const Activation> activations, std::uint64_t seed) {
    if (dims.size() < 2 || activations.size() != dims.size() - 1) {
      throw DimensionError("mlp: need dims.size() == activations.size() + 1 >= 2");
    }
    std::mt19937_64 rng(seed);
    std::vector<DenseLayer<Scalar>> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const int fan_in = dims[i], fan_out = dims[i + 1];
      if (fan_in <= 0 || fan_out <= 0) throw DimensionError("mlp: layer widths must be positive");
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      DenseLayer<Scalar> layer;
      layer.weights.resize(fan_out, fan_in);
      for (Eigen::Index r = 0; r < fan_out; ++r)
        for (Eigen::Index c = 0; c < fan_in; ++c) layer.weights(r, c) = static_cast<Scalar>(dist(rng));
      layer.bias = Vector<Scalar>::Zero(fan_out);
      layer.activation = activations[i];
      layers.push_back(std::move(layer));
    }
    return Mlp(std::move(layers), seed);
  }

  Eigen::Index input_dim() const { return layers_.front().in(); }
  Eigen::Index output_dim() const { return layers_.back().out(); }
  std::uint64_t seed() const { return seed_; }
  const std::vector<DenseLayer<Scalar>>& layers() const { return layers_; }
  std::vector<DenseLayer<Scalar>>& layers() { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
    return n;
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (a.seed_ != b.seed_ || a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      const auto& x = a.layers_[i];
      const auto& y = b.layers_[i];
      if (x.activation != y.activation || x.weights.rows() != y.weights.rows() || x.weights.cols() != y.weights.cols() ||
          x.weights != y.weights || x.bias != y.bias)
        return false;
    }
    return true;
  }

 private:
  std::vector<DenseLayer<Scalar>> layers_;
  std::uint64_t seed_ = 0;
};

// ---------------------------------------------------------------------------
// Activations

template <typename Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  return z.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
}

/// Column-wise softmax, shifted by the column max.
template <typename Derived>
Matrix<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out(z.rows(), z.cols());
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    const Scalar peak = z.col(c).maxCoeff();
    out.col(c) = (z.col(c).array() - peak).exp().matrix();
    out.col(c) /= out.col(c).sum();
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> activate(Activation a, const Matrix<Scalar>& z) {
  switch (a) {
    case Activation::relu: return z.cwiseMax(Scalar(0));
    case Activation::sigmoid: return sigmoid(z);
    case Activation::softmax: return softmax(z);
    case Activation::identity: return z;
  }
  return z;
}

/// Gradient w.r.t. pre-activation given gradient w.r.t. the activation output.
template <typename Scalar>
Matrix<Scalar> activation_backward(Activation a, const Matrix<Scalar>& grad_out, const Matrix<Scalar>& pre,
                                   const Matrix<Scalar>& post) {
  switch (a) {
    case Activation::relu:
      return grad_out.cwiseProduct((pre.array() > Scalar(0)).template cast<Scalar>().matrix());
    case Activation::sigmoid:
      return grad_out.cwiseProduct(post.cwiseProduct((Scalar(1) - post.array()).matrix()));
    case Activation::softmax: {
      Matrix<Scalar> g(grad_out.rows(), grad_out.cols());
      for (Eigen::Index c = 0; c < grad_out.cols(); ++c) {
        const Scalar dot = post.col(c).dot(grad_out.col(c));
        g.col(c) = post.col(c).cwiseProduct((grad_out.col(c).array() - dot).matrix());
      }
      return g;
    }
    case Activation::identity: return grad_out;
  }
  return grad_out;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename Scalar>
struct ForwardCache {
  std::vector<Matrix<Scalar>> inputs;  // input to each layer
  std::vector<Matrix<Scalar>> pre;     // pre-activation of each layer
  std::vector<Matrix<Scalar>> post;    // output of each layer

  const Matrix<Scalar>& output() const { return post.back(); }
  const Matrix<Scalar>& logits() const { return pre.back(); }
};

template <typename Scalar>
ForwardCache<Scalar> forward_cached(const Mlp<Scalar>& net, const Matrix<Scalar>& batch) {
  if (batch.rows() != net.input_dim()) {
    throw DimensionError("forward: input has " + std::to_string(batch.rows()) + " rows, net expects " +
                         std::to_string(net.input_dim()));
  }
  ForwardCache<Scalar> cache;
  const auto n = net.layers().size();
  cache.inputs.reserve(n);
  cache.pre.reserve(n);
  cache.post.reserve(n);
  const Matrix<Scalar>* x = &batch;
  for (const auto& layer : net.layers()) {
    cache.inputs.push_back(*x);
    Matrix<Scalar> z = layer.weights * (*x);
    z.colwise() += layer.bias;
    cache.post.push_back(activate(layer.activation, z));
    cache.pre.push_back(std::move(z));
    x = &cache.post.back();
  }
  return cache;
}

template <typename Scalar>
Matrix<Scalar> forward_batch(const Mlp<Scalar>& net, const Matrix<Scalar>& batch) {
  if (batch.rows() != net.input_dim()) {
    throw DimensionError("forward: input has " + std::to_string(batch.rows()) + " rows, net expects " +
                         std::to_string(net.input_dim()));
  }
  Matrix<Scalar> x = batch;
  for (const auto& layer : net.layers()) {
    Matrix<Scalar> z = layer.weights * x;
    z.colwise() += layer.bias;
    x = activate(layer.activation, z);
  }
  return x;
}

template <typename Scalar>
Vector<Scalar> forward(const Mlp<Scalar>& net, const Vector<Scalar>& input) {
  return forward_batch(net, Matrix<Scalar>(input)).col(0);
}

template <typename Scalar>
struct LayerGradient {
  Matrix<Scalar> weights;
  Vector<Scalar> bias;
};

template <typename Scalar>
using Gradients = std::vector<LayerGradient<Scalar>>;

template <typename Scalar>
Gradients<Scalar> zero_gradients(const Mlp<Scalar>& net) {
  Gradients<Scalar> g;
  for (const auto& l : net.layers()) g.push_back({Matrix<Scalar>::Zero(l.out(), l.in()), Vector<Scalar>::Zero(l.out())});
  return g;
}

template <typename Scalar>
struct BackwardResult {
  Gradients<Scalar> grads;
  Matrix<Scalar> input_grad;
};

/// Where the incoming gradient is taken: the last layer's pre-activation
/// (fused loss heads) or its activated output.
enum class GradientAt { logits, output };

template <typename Scalar>
BackwardResult<Scalar> backward(const Mlp<Scalar>& net, const ForwardCache<Scalar>& cache, Matrix<Scalar> grad,
                                GradientAt at) {
  const auto& layers = net.layers();
  BackwardResult<Scalar> result;
  result.grads.resize(layers.size());
  if (at == GradientAt::output) {
    grad = activation_backward(layers.back().activation, grad, cache.pre.back(), cache.post.back());
  }
  for (std::size_t i = layers.size(); i-- > 0;) {
    result.grads[i].weights = grad * cache.inputs[i].transpose();
    result.grads[i].bias = grad.rowwise().sum();
    Matrix<Scalar> upstream = layers[i].weights.transpose() * grad;
    if (i == 0) {
      result.input_grad = std::move(upstream);
    } else {
      grad = activation_backward(layers[i - 1].activation, upstream, cache.pre[i - 1], cache.post[i - 1]);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Losses

/// Scores are clamped to [kBceClamp, 1 - kBceClamp] before taking logs.
inline constexpr double kBceClamp = 1e-7;

/// Mean over elements of -(y ln s + (1-y) ln(1-s)).
template <typename DerivedS, typename DerivedT>
typename DerivedS::Scalar bce_loss(const Eigen::MatrixBase<DerivedS>& scores, const Eigen::MatrixBase<DerivedT>& targets) {
  using Scalar = typename DerivedS::Scalar;
  if (scores.rows() != targets.rows() || scores.cols() != targets.cols()) {
    throw DimensionError("bce_loss: scores and targets differ in shape");
  }
  const Scalar lo = Scalar(kBceClamp), hi = Scalar(1) - Scalar(kBceClamp);
  Scalar total = 0;
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      const Scalar s = std::clamp(static_cast<Scalar>(scores(r, c)), lo, hi);
      const Scalar y = static_cast<Scalar>(targets(r, c));
      total -= y * std::log(s) + (Scalar(1) - y) * std::log(Scalar(1) - s);
    }
  }
  return total / static_cast<Scalar>(scores.size());
}

/// Cross entropy of softmax(logits) against a class index.
template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& logits, int label) {
  using Scalar = typename Derived::Scalar;
  if (label < 0 || label >= logits.size()) throw DimensionError("cross_entropy: label out of range");
  const Scalar peak = logits.maxCoeff();
  const Scalar log_norm = peak + std::log((logits.array() - peak).exp().sum());
  return log_norm - logits(label);
}

/// sum_n w_n * CE(softmax(z_n), onehot(label)) for one sample.
template <typename Scalar>
Scalar weighted_ce_loss(const std::vector<Vector<Scalar>>& per_exit_logits, int label, std::span<const Scalar> weights) {
  if (per_exit_logits.size() != weights.size()) {
    throw DimensionError("weighted_ce_loss: " + std::to_string(per_exit_logits.size()) + " exits but " +
                         std::to_string(weights.size()) + " weights");
  }
  if (per_exit_logits.empty()) return Scalar(0);
  const auto p = per_exit_logits.front().size();
  Scalar total = 0;
  for (std::size_t n = 0; n < weights.size(); ++n) {
    if (per_exit_logits[n].size() != p) throw DimensionError("weighted_ce_loss: logit vectors differ in length");
    total += weights[n] * cross_entropy(per_exit_logits[n], label);
  }
  return total;
}

enum class LossKind {
  bce,            // sigmoid head, binary targets; mean over elements
  cross_entropy,  // softmax head, one-hot targets; mean over samples
  weighted_ce,    // identity head of width N*P read as N logit blocks; mean over samples
  mse,            // any head; mean over elements
};

template <typename Scalar>
struct LossSpec {
  LossKind kind = LossKind::bce;
  std::vector<Scalar> exit_weights;  // weighted_ce only

  static LossSpec bce() { return {LossKind::bce, {}}; }
  static LossSpec cross_entropy() { return {LossKind::cross_entropy, {}}; }
  static LossSpec mse() { return {LossKind::mse, {}}; }
  static LossSpec weighted(std::vector<Scalar> w) { return {LossKind::weighted_ce, std::move(w)}; }
};

template <typename Scalar>
struct LossEval {
  Scalar value = 0;
  Matrix<Scalar> grad;  // w.r.t. logits or output, see `at`
  GradientAt at = GradientAt::logits;
};

/// Loss value and its gradient at the head. For bce and cross_entropy the
/// gradient is the fused (s - y) form w.r.t. the logits.
template <typename Scalar>
LossEval<Scalar> evaluate_loss(const LossSpec<Scalar>& loss, const ForwardCache<Scalar>& cache,
                               const Matrix<Scalar>& targets, Activation head) {
  const Matrix<Scalar>& out = cache.output();
  const auto batch = static_cast<Scalar>(out.cols());
  LossEval<Scalar> e;
  switch (loss.kind) {
    case LossKind::bce: {
      if (head != Activation::sigmoid) throw InvariantError("bce loss requires a sigmoid head");
      if (targets.rows() != out.rows() || targets.cols() != out.cols()) throw DimensionError("bce: target shape");
      e.value = bce_loss(out, targets);
      e.grad = (out - targets) / static_cast<Scalar>(out.size());
      e.at = GradientAt::logits;
      break;
    }
    case LossKind::cross_entropy: {
      if (head != Activation::softmax) throw InvariantError("cross-entropy loss requires a softmax head");
      if (targets.rows() != out.rows() || targets.cols() != out.cols()) throw DimensionError("ce: target shape");
      Scalar total = 0;
      for (Eigen::Index c = 0; c < out.cols(); ++c) {
        for (Eigen::Index r = 0; r < out.rows(); ++r) {
          if (targets(r, c) != Scalar(0)) total -= targets(r, c) * std::log(std::max(out(r, c), Scalar(1e-300)));
        }
      }
      e.value = total / batch;
      e.grad = (out - targets) / batch;
      e.at = GradientAt::logits;
      break;
    }
    case LossKind::weighted_ce: {
      if (head != Activation::identity) throw InvariantError("weighted ce loss requires an identity head");
      const auto exits = static_cast<Eigen::Index>(loss.exit_weights.size());
      const Eigen::Index p = targets.rows();
      if (exits == 0 || out.rows() != exits * p || targets.cols() != out.cols()) {
        throw DimensionError("weighted ce: output must hold exits x P logits per sample");
      }
      e.grad.resize(out.rows(), out.cols());
      Scalar total = 0;
      for (Eigen::Index n = 0; n < exits; ++n) {
        const auto block = out.middleRows(n * p, p);
        const Matrix<Scalar> probs = softmax(block);
        const Scalar w = loss.exit_weights[static_cast<std::size_t>(n)];
        for (Eigen::Index c = 0; c < out.cols(); ++c) {
          for (Eigen::Index r = 0; r < p; ++r) {
            if (targets(r, c) != Scalar(0)) total -= w * targets(r, c) * std::log(std::max(probs(r, c), Scalar(1e-300)));
          }
        }
        e.grad.middleRows(n * p, p) = w * (probs - targets) / batch;
      }
      e.value = total / batch;
      e.at = GradientAt::logits;
      break;
    }
    case LossKind::mse: {
      if (targets.rows() != out.rows() || targets.cols() != out.cols()) throw DimensionError("mse: target shape");
      const Matrix<Scalar> diff = out - targets;
      e.value = diff.squaredNorm() / static_cast<Scalar>(out.size());
      e.grad = Scalar(2) * diff / static_cast<Scalar>(out.size());
      e.at = GradientAt::output;
      break;
    }
  }
  return e;
}

template <typename Scalar>
Scalar loss_value(const Mlp<Scalar>& net, const Matrix<Scalar>& inputs, const Matrix<Scalar>& targets,
                  const LossSpec<Scalar>& loss) {
  return evaluate_loss(loss, forward_cached(net, inputs), targets, net.layers().back().activation).value;
}

/// Loss value and parameter gradients over a batch.
template <typename Scalar>
std::pair<Scalar, Gradients<Scalar>> loss_gradients(const Mlp<Scalar>& net, const Matrix<Scalar>& inputs,
                                                    const Matrix<Scalar>& targets, const LossSpec<Scalar>& loss) {
  const auto cache = forward_cached(net, inputs);
  auto e = evaluate_loss(loss, cache, targets, net.layers().back().activation);
  auto back = backward(net, cache, std::move(e.grad), e.at);
  return {e.value, std::move(back.grads)};
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 0.05;
  double final_learning_rate = 0.0;  // cosine-annealing end value
  int anneal_epochs = 0;             // 0 keeps the rate constant
  int epochs = 100;
  int batch_size = 32;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw InvariantError("train config: learning_rate must be > 0");
    if (!(final_learning_rate >= 0.0)) throw InvariantError("train config: final_learning_rate must be >= 0");
    if (epochs < 0) throw InvariantError("train config: epochs must be >= 0");
    if (batch_size <= 0) throw InvariantError("train config: batch_size must be > 0");
    if (anneal_epochs < 0 || anneal_epochs > epochs) throw InvariantError("train config: anneal_epochs must lie in [0, epochs]");
    if (!(weight_decay >= 0.0)) throw InvariantError("train config: weight_decay must be >= 0");
  }

  /// Cosine annealing from learning_rate to final_learning_rate over
  /// anneal_epochs, then held at the final value.
  double rate_at(int epoch) const {
    if (anneal_epochs == 0) return learning_rate;
    if (epoch >= anneal_epochs) return final_learning_rate;
    const double t = static_cast<double>(epoch) / anneal_epochs;
    return final_learning_rate + 0.5 * (learning_rate - final_learning_rate) * (1.0 + std::cos(M_PI * t));
  }
};

/// Plain SGD step with weight decay folded into every parameter's gradient.
template <typename Scalar>
void sgd_step(Mlp<Scalar>& net, const Gradients<Scalar>& grads, double rate, double weight_decay) {
  auto& layers = net.layers();
  const auto lr = static_cast<Scalar>(rate);
  const auto wd = static_cast<Scalar>(weight_decay);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weights -= lr * (grads[i].weights + wd * layers[i].weights);
    layers[i].bias -= lr * (grads[i].bias + wd * layers[i].bias);
  }
}

template <typename Scalar>
struct TrainResult {
  Mlp<Scalar> net;
  std::vector<Scalar> loss_curve;  // full-dataset loss after each epoch
};

/// Epoch-wise shuffled minibatch orders, drawn from one seeded generator.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t samples, std::uint64_t seed) : order_(samples), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }
  const std::vector<std::size_t>& next_epoch() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    return order_;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
};

template <typename Scalar>
Matrix<Scalar> gather_columns(const Matrix<Scalar>& m, std::span<const std::size_t> cols) {
  Matrix<Scalar> out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(cols[i]));
  return out;
}

template <typename Scalar>
TrainResult<Scalar> train(Mlp<Scalar> net, const Matrix<Scalar>& inputs, const Matrix<Scalar>& targets,
                          const LossSpec<Scalar>& loss, const TrainConfig& cfg) {
  cfg.validate();
  if (inputs.cols() == 0) throw DimensionError("train: empty dataset");
  if (inputs.cols() != targets.cols()) throw DimensionError("train: inputs and targets differ in sample count");
  if (inputs.rows() != net.input_dim()) throw DimensionError("train: input width does not match the net");

  TrainResult<Scalar> result;
  BatchSchedule schedule(static_cast<std::size_t>(inputs.cols()), cfg.seed);
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double rate = cfg.rate_at(epoch);
    const auto& order = schedule.next_epoch();
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch, order.size() - start));
      auto [value, grads] = loss_gradients(net, gather_columns(inputs, idx), gather_columns(targets, idx), loss);
      sgd_step(net, grads, rate, cfg.weight_decay);
    }
    const Scalar epoch_loss = loss_value(net, inputs, targets, loss);
    if (!std::isfinite(static_cast<double>(epoch_loss))) throw DivergenceError("training loss is not finite", epoch + 1);
    result.loss_curve.push_back(epoch_loss);
  }
  result.net = std::move(net);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
/// parameters with vanishing gradients from dominating through round-off.
inline constexpr double kRelativeErrorFloor = 1e-4;

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kRelativeErrorFloor});
  return std::abs(analytic - numeric) / scale;
}

/// Max relative error between backprop and central differences (step 1e-4)
/// over every parameter, for a single (input, target) pair.
template <typename Scalar>
double numeric_gradient_check(const Mlp<Scalar>& net, const Vector<Scalar>& input, const Vector<Scalar>& target,
                              const LossSpec<Scalar>& loss, double step = 1e-4) {
  const Matrix<Scalar> x = input;
  const Matrix<Scalar> t = target;
  const auto analytic = loss_gradients(net, x, t, loss).second;
  Mlp<Scalar> probe = net;
  double worst = 0.0;
  auto central = [&](Scalar& param) {
    const Scalar saved = param;
    param = saved + static_cast<Scalar>(step);
    const double up = static_cast<double>(loss_value(probe, x, t, loss));
    param = saved - static_cast<Scalar>(step);
    const double down = static_cast<double>(loss_value(probe, x, t, loss));
    param = saved;
    return (up - down) / (2.0 * step);
  };
  for (std::size_t i = 0; i < probe.layers().size(); ++i) {
    auto& layer = probe.layers()[i];
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) {
        worst = std::max(worst, relative_error(analytic[i].weights(r, c), central(layer.weights(r, c))));
      }
      worst = std::max(worst, relative_error(analytic[i].bias(r), central(layer.bias(r))));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints: structured text (JSON) with dims, activation tags, row-major
// parameters and the seed. Doubles are written shortest-round-trip.

template <typename Scalar>
nlohmann::json to_json(const Mlp<Scalar>& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weights.size()));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(static_cast<double>(l.weights(r, c)));
    std::vector<double> b(l.bias.data(), l.bias.data() + l.bias.size());
    layers.push_back({{"in", l.in()}, {"out", l.out()}, {"activation", to_string(l.activation)}, {"weights", w}, {"bias", b}});
  }
  return {{"format", "exitsim-mlp"}, {"seed", net.seed()}, {"layers", layers}};
}

template <typename Scalar>
Mlp<Scalar> mlp_from_json(const nlohmann::json& j) {
  try {
    std::vector<DenseLayer<Scalar>> layers;
    for (const auto& lj : j.at("layers")) {
      const auto in = lj.at("in").get<Eigen::Index>();
      const auto out = lj.at("out").get<Eigen::Index>();
      const auto w = lj.at("weights").get<std::vector<double>>();
      const auto b = lj.at("bias").get<std::vector<double>>();
      if (in <= 0 || out <= 0 || static_cast<Eigen::Index>(w.size()) != in * out || static_cast<Eigen::Index>(b.size()) != out) {
        throw DimensionError("checkpoint: layer parameter count does not match its dims");
      }
      DenseLayer<Scalar> layer;
      layer.weights.resize(out, in);
      for (Eigen::Index r = 0; r < out; ++r)
        for (Eigen::Index c = 0; c < in; ++c) layer.weights(r, c) = static_cast<Scalar>(w[static_cast<std::size_t>(r * in + c)]);
      layer.bias.resize(out);
      for (Eigen::Index r = 0; r < out; ++r) layer.bias(r) = static_cast<Scalar>(b[static_cast<std::size_t>(r)]);
      layer.activation = activation_from_string(lj.at("activation").get<std::string>());
      layers.push_back(std::move(layer));
    }
    return Mlp<Scalar>(std::move(layers), j.at("seed").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 1);
  }
}

template <typename Scalar>
void save_checkpoint(const Mlp<Scalar>& net, const std::filesystem::path& path) {
  atomic_write(path, to_json(net).dump(1) + "\n");
}

template <typename Scalar>
Mlp<Scalar> load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 1);
  }
  return mlp_from_json<Scalar>(j);
}

}  // namespace exitsim::nn
