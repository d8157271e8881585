#include "exitsim/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "exitsim/error.hpp"
#include "exitsim/io.hpp"

namespace exitsim::zoo {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;

// Per-sample sub-seed so emission does not depend on evaluation order.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

MatrixXd one_hot(std::span<const int> labels, int classes) {
  MatrixXd t = MatrixXd::Zero(classes, static_cast<Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) t(labels[i], static_cast<Index>(i)) = 1.0;
  return t;
}

void check_labels(const ToyEarlyExitNet& net, const MatrixXd& inputs, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != inputs.cols()) throw DimensionError("toy net: label count differs from batch");
  for (int l : labels)
    if (l < 0 || l >= net.num_classes()) throw DimensionError("toy net: label out of range");
}

struct JointForward {
  std::vector<nn::ForwardCache<double>> segments;
  std::vector<nn::ForwardCache<double>> heads;
  nn::ForwardCache<double> final_head;
};

JointForward joint_forward(const ToyEarlyExitNet& net, const MatrixXd& inputs) {
  JointForward f;
  f.segments.reserve(net.segments.size());
  f.heads.reserve(net.heads.size());
  const MatrixXd* x = &inputs;
  for (std::size_t n = 0; n < net.segments.size(); ++n) {
    f.segments.push_back(nn::forward_cached(net.segments[n], *x));
    x = &f.segments.back().output();
    f.heads.push_back(nn::forward_cached(net.heads[n], *x));
  }
  f.final_head = nn::forward_cached(net.final_head, *x);
  return f;
}

double cross_entropy_sum(const MatrixXd& probs, std::span<const int> labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) total -= std::log(std::max(probs(labels[i], static_cast<Index>(i)), 1e-300));
  return total;
}

template <typename Fn>
void for_each_net(ToyEarlyExitNet& net, Fn&& fn) {
  for (auto& s : net.segments) fn(s);
  for (auto& h : net.heads) fn(h);
  fn(net.final_head);
}

}  // namespace

Dataset Dataset::subset(Index first, Index count) const {
  if (first < 0 || count < 0 || first + count > size()) throw DimensionError("dataset: subset out of range");
  Dataset d;
  d.inputs = inputs.middleCols(first, count);
  d.labels.assign(labels.begin() + first, labels.begin() + first + count);
  d.num_classes = num_classes;
  return d;
}

void SynthSpec::validate() const {
  if (num_classes < 2) throw InvariantError("synth: P must be >= 2");
  if (num_samples < 0) throw InvariantError("synth: num_samples must be >= 0");
  if (input_dim <= 0) throw InvariantError("synth: input_dim must be > 0");
  if (modes_per_class < 1) throw InvariantError("synth: modes_per_class must be >= 1");
  const Index modes = static_cast<Index>(num_classes) * modes_per_class;
  if (centers.rows() != input_dim || centers.cols() != modes) throw DimensionError("synth: centers must be dim x (P * modes)");
  if (spreads.size() != modes) throw DimensionError("synth: spreads must have P * modes entries");
  if ((spreads.array() < 0.0).any() || !spreads.allFinite()) throw InvariantError("synth: spreads must be >= 0");
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw InvariantError("synth: label_noise must lie in [0,1]");
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) throw InvariantError("synth: flip_probability must lie in [0,1]");
}

SynthSpec SynthSpec::blobs(int num_samples, int num_classes, int input_dim, double separation, double spread,
                           std::uint64_t seed, int modes_per_class) {
  SynthSpec s;
  s.num_samples = num_samples;
  s.num_classes = num_classes;
  s.input_dim = input_dim;
  s.modes_per_class = modes_per_class;
  s.seed = seed;
  const int modes = num_classes * modes_per_class;
  s.centers.resize(input_dim, modes);
  std::mt19937_64 rng(mix_seed(seed, 0xC3));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int k = 0; k < modes; ++k) {
    Eigen::VectorXd v(input_dim);
    for (int d = 0; d < input_dim; ++d) v(d) = normal(rng);
    s.centers.col(k) = separation * v / v.norm();
  }
  s.spreads = Eigen::VectorXd::Constant(modes, spread);
  return s;
}

Dataset generate_dataset(const SynthSpec& spec) {
  spec.validate();
  Dataset d;
  d.num_classes = spec.num_classes;
  d.inputs.resize(spec.input_dim, spec.num_samples);
  d.labels.resize(static_cast<std::size_t>(spec.num_samples));
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> pick_class(0, spec.num_classes - 1);
  std::uniform_int_distribution<int> pick_other(1, spec.num_classes - 1);
  std::uniform_int_distribution<int> pick_mode(0, spec.modes_per_class - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < spec.num_samples; ++i) {
    const int k = pick_class(rng);
    const int c = spec.modes_per_class > 1 ? k + spec.num_classes * pick_mode(rng) : k;
    for (int j = 0; j < spec.input_dim; ++j) {
      d.inputs(j, i) = canonical_real(spec.centers(j, c) + spec.spreads(c) * normal(rng));
    }
    int label = k;
    if (spec.label_noise > 0.0 && unit(rng) < spec.label_noise) label = (k + pick_other(rng)) % spec.num_classes;
    d.labels[static_cast<std::size_t>(i)] = label;
  }
  return d;
}

std::vector<MatrixXd> ToyEarlyExitNet::exit_probabilities(const MatrixXd& inputs) const {
  std::vector<MatrixXd> probs;
  MatrixXd x = inputs;
  for (std::size_t n = 0; n < segments.size(); ++n) {
    x = nn::forward_batch(segments[n], x);
    probs.push_back(nn::forward_batch(heads[n], x));
  }
  probs.push_back(nn::forward_batch(final_head, x));
  return probs;
}

ToyEarlyExitNet make_toy_net(const ToyNetSpec& spec, std::vector<double> exit_weights) {
  const int exits = spec.num_exits();
  if (exits < 2) throw DimensionError("toy net: need at least one early exit");
  if (static_cast<int>(exit_weights.size()) != exits) throw DimensionError("toy net: need one weight per exit");
  for (double w : exit_weights)
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvariantError("toy net: exit weights must be finite and >= 0");

  using nn::Activation;
  ToyEarlyExitNet net;
  net.exit_weights = std::move(exit_weights);
  std::uint64_t stream = 0;
  int width = spec.input_dim;
  for (int w : spec.segment_widths) {
    const int seg_dims[] = {width, w};
    const Activation seg_act[] = {Activation::relu};
    net.segments.push_back(Net::make(seg_dims, seg_act, mix_seed(spec.seed, stream++)));
    const int head_dims[] = {w, spec.num_classes};
    const Activation head_act[] = {Activation::softmax};
    net.heads.push_back(Net::make(head_dims, head_act, mix_seed(spec.seed, stream++)));
    width = w;
  }
  const int final_dims[] = {width, spec.final_hidden, spec.num_classes};
  const Activation final_act[] = {Activation::relu, Activation::softmax};
  net.final_head = Net::make(final_dims, final_act, mix_seed(spec.seed, stream++));
  return net;
}

double joint_loss(const ToyEarlyExitNet& net, const MatrixXd& inputs, std::span<const int> labels) {
  check_labels(net, inputs, labels);
  const auto probs = net.exit_probabilities(inputs);
  double total = 0.0;
  for (std::size_t n = 0; n < probs.size(); ++n) total += net.exit_weights[n] * cross_entropy_sum(probs[n], labels);
  return total / static_cast<double>(labels.size());
}

std::pair<double, ToyGradients> joint_loss_gradients(const ToyEarlyExitNet& net, const MatrixXd& inputs,
                                                     std::span<const int> labels) {
  check_labels(net, inputs, labels);
  const JointForward f = joint_forward(net, inputs);
  const MatrixXd targets = one_hot(labels, net.num_classes());
  const double batch = static_cast<double>(labels.size());
  const std::size_t early = net.segments.size();

  ToyGradients g;
  g.segments.resize(early);
  g.heads.resize(early);
  double loss = 0.0;

  // Gradient flowing into each segment's output from the heads attached to it.
  std::vector<MatrixXd> into_segment(early);
  for (std::size_t n = 0; n < early; ++n) {
    const double w = net.exit_weights[n];
    loss += w * cross_entropy_sum(f.heads[n].output(), labels);
    auto back = nn::backward(net.heads[n], f.heads[n], MatrixXd(w * (f.heads[n].output() - targets) / batch),
                             nn::GradientAt::logits);
    g.heads[n] = std::move(back.grads);
    into_segment[n] = std::move(back.input_grad);
  }
  {
    const double w = net.exit_weights[early];
    loss += w * cross_entropy_sum(f.final_head.output(), labels);
    auto back = nn::backward(net.final_head, f.final_head, MatrixXd(w * (f.final_head.output() - targets) / batch),
                             nn::GradientAt::logits);
    g.final_head = std::move(back.grads);
    into_segment[early - 1] += back.input_grad;
  }
  for (std::size_t n = early; n-- > 0;) {
    auto back = nn::backward(net.segments[n], f.segments[n], std::move(into_segment[n]), nn::GradientAt::output);
    g.segments[n] = std::move(back.grads);
    if (n > 0) into_segment[n - 1] += back.input_grad;
  }
  return {loss / batch, std::move(g)};
}

double joint_gradient_check(const ToyEarlyExitNet& net, const Eigen::VectorXd& input, int label, double step) {
  const MatrixXd x = input;
  const int labels[] = {label};
  const auto analytic = joint_loss_gradients(net, x, labels).second;

  ToyEarlyExitNet probe = net;
  std::vector<const nn::Gradients<double>*> grads;
  for (const auto& s : analytic.segments) grads.push_back(&s);
  for (const auto& h : analytic.heads) grads.push_back(&h);
  grads.push_back(&analytic.final_head);

  double worst = 0.0;
  std::size_t which = 0;
  for_each_net(probe, [&](Net& part) {
    const auto& pg = *grads[which++];
    auto central = [&](double& p) {
      const double saved = p;
      p = saved + step;
      const double up = joint_loss(probe, x, labels);
      p = saved - step;
      const double down = joint_loss(probe, x, labels);
      p = saved;
      return (up - down) / (2.0 * step);
    };
    for (std::size_t i = 0; i < part.layers().size(); ++i) {
      auto& layer = part.layers()[i];
      for (Index r = 0; r < layer.weights.rows(); ++r) {
        for (Index c = 0; c < layer.weights.cols(); ++c) {
          worst = std::max(worst, nn::relative_error(pg[i].weights(r, c), central(layer.weights(r, c))));
        }
        worst = std::max(worst, nn::relative_error(pg[i].bias(r), central(layer.bias(r))));
      }
    }
  });
  return worst;
}

ToyTrainResult train_toy_net(const Dataset& data, const ToyNetSpec& spec, std::vector<double> exit_weights,
                             const nn::TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw DimensionError("train_toy_net: empty dataset");
  if (data.dim() != spec.input_dim || data.num_classes != spec.num_classes) {
    throw DimensionError("train_toy_net: dataset shape does not match the net spec");
  }
  ToyTrainResult result{make_toy_net(spec, std::move(exit_weights)), {}};
  ToyEarlyExitNet& net = result.net;

  nn::BatchSchedule schedule(static_cast<std::size_t>(data.size()), cfg.seed);
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<int> batch_labels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double rate = cfg.rate_at(epoch);
    const auto& order = schedule.next_epoch();
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch, order.size() - start));
      batch_labels.clear();
      for (std::size_t i : idx) batch_labels.push_back(data.labels[i]);
      auto [value, g] = joint_loss_gradients(net, nn::gather_columns(data.inputs, idx), batch_labels);
      for (std::size_t n = 0; n < net.segments.size(); ++n) {
        nn::sgd_step(net.segments[n], g.segments[n], rate, cfg.weight_decay);
        nn::sgd_step(net.heads[n], g.heads[n], rate, cfg.weight_decay);
      }
      nn::sgd_step(net.final_head, g.final_head, rate, cfg.weight_decay);
    }
    const double epoch_loss = joint_loss(net, data.inputs, data.labels);
    if (!std::isfinite(epoch_loss)) throw DivergenceError("toy net training loss is not finite", epoch + 1);
    result.loss_curve.push_back(epoch_loss);
  }
  return result;
}

TraceSet emit_traces(const ToyEarlyExitNet& net, const Dataset& data, const ExitTopology& topology,
                     const EmitOptions& options) {
  topology.validate();
  if (topology.num_exits != net.num_exits()) throw DimensionError("emit_traces: topology and net differ in exit count");
  if (topology.num_classes != net.num_classes()) throw DimensionError("emit_traces: topology and net differ in P");
  if (!(options.flip_probability >= 0.0 && options.flip_probability <= 1.0)) {
    throw InvariantError("emit_traces: flip_probability must lie in [0,1]");
  }
  const auto probs = net.exit_probabilities(data.inputs);
  const int classes = net.num_classes();
  const double floor = 1.0 / classes;
  // Largest value below 1 on the 9-digit grid; a saturated softmax must stay < 1.
  constexpr double ceiling = 0.999999999;

  std::vector<SampleTrace> samples;
  samples.reserve(static_cast<std::size_t>(data.size()));
  for (Index i = 0; i < data.size(); ++i) {
    SampleTrace s;
    s.id = options.first_id + i;
    s.label = data.labels[static_cast<std::size_t>(i)];
    for (const auto& p : probs) {
      Index arg = 0;
      const double top = p.col(i).maxCoeff(&arg);
      s.confidences.push_back(std::clamp(canonical_real(std::max(top, floor)), 0.0, ceiling));
      s.predicted.push_back(static_cast<int>(arg));
    }
    if (options.flip_probability > 0.0) {
      std::mt19937_64 rng(mix_seed(options.seed, static_cast<std::uint64_t>(s.id)));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      if (unit(rng) < options.flip_probability) {
        std::uniform_int_distribution<int> shift(1, classes - 1);
        s.predicted.back() = (s.predicted.back() + shift(rng)) % classes;
      }
    }
    if (options.include_features) {
      const auto col = data.inputs.col(i);
      std::vector<double> f(static_cast<std::size_t>(col.size()));
      for (Index j = 0; j < col.size(); ++j) f[static_cast<std::size_t>(j)] = canonical_real(col(j));
      s.features = std::move(f);
    }
    samples.push_back(std::move(s));
  }
  return TraceSet(topology, std::move(samples));
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "{\"format\":\"exitsim-dataset\",\"dim\":" << data.dim() << ",\"P\":" << data.num_classes << "}\n";
  for (Index i = 0; i < data.size(); ++i) {
    out << "{\"label\":" << data.labels[static_cast<std::size_t>(i)] << ",\"x\":[";
    for (Index j = 0; j < data.dim(); ++j) out << (j ? "," : "") << format_real(data.inputs(j, i));
    out << "]}\n";
  }
  atomic_write(path, out.str());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::string text;
  long line = 0;
  Dataset d;
  Index dim = -1;
  std::vector<std::vector<double>> columns;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(text);
      if (dim < 0) {
        if (j.value("format", "") != "exitsim-dataset") throw ParseError("not a dataset file", line);
        dim = j.at("dim").get<Index>();
        d.num_classes = j.at("P").get<int>();
        if (dim <= 0 || d.num_classes < 2) throw ParseError("dataset header has invalid dim or P", line);
        continue;
      }
      const int label = j.at("label").get<int>();
      auto x = j.at("x").get<std::vector<double>>();
      if (static_cast<Index>(x.size()) != dim) throw ParseError("sample has wrong dimension", line);
      if (label < 0 || label >= d.num_classes) throw ParseError("label out of range", line);
      d.labels.push_back(label);
      columns.push_back(std::move(x));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line);
    }
  }
  if (dim < 0) throw ParseError("missing dataset header", line + 1);
  d.inputs.resize(dim, static_cast<Index>(columns.size()));
  for (std::size_t i = 0; i < columns.size(); ++i)
    for (Index j = 0; j < dim; ++j) d.inputs(j, static_cast<Index>(i)) = columns[i][static_cast<std::size_t>(j)];
  return d;
}

nlohmann::json to_json(const ToyEarlyExitNet& net) {
  nlohmann::json segs = nlohmann::json::array(), heads = nlohmann::json::array();
  for (const auto& s : net.segments) segs.push_back(nn::to_json(s));
  for (const auto& h : net.heads) heads.push_back(nn::to_json(h));
  return {{"format", "exitsim-toy-net"},
          {"exit_weights", net.exit_weights},
          {"segments", segs},
          {"heads", heads},
          {"final_head", nn::to_json(net.final_head)}};
}

ToyEarlyExitNet toy_net_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "exitsim-toy-net") throw ParseError("not a toy-net checkpoint", 1);
    ToyEarlyExitNet net;
    net.exit_weights = j.at("exit_weights").get<std::vector<double>>();
    for (const auto& s : j.at("segments")) net.segments.push_back(nn::mlp_from_json<double>(s));
    for (const auto& h : j.at("heads")) net.heads.push_back(nn::mlp_from_json<double>(h));
    net.final_head = nn::mlp_from_json<double>(j.at("final_head"));
    if (net.segments.empty() || net.segments.size() != net.heads.size() ||
        net.exit_weights.size() != net.segments.size() + 1) {
      throw DimensionError("toy-net checkpoint: inconsistent exit structure");
    }
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("toy-net checkpoint: ") + e.what(), 1);
  }
}

void save_toy_net(const ToyEarlyExitNet& net, const std::filesystem::path& path) {
  atomic_write(path, to_json(net).dump(1) + "\n");
}

ToyEarlyExitNet load_toy_net(const std::filesystem::path& path) {
  try {
    return toy_net_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("toy-net checkpoint: ") + e.what(), 1);
  }
}

}  // namespace exitsim::zoo
