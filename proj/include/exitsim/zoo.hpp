#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "exitsim/nncore.hpp"
#include "exitsim/trace.hpp"

namespace exitsim::zoo {

using Net = nn::Mlp<double>;

/// Labeled vectors, one sample per column.
struct Dataset {
  Eigen::MatrixXd inputs;   // dim x samples
  std::vector<int> labels;  // size samples
  int num_classes = 0;

  Eigen::Index size() const { return inputs.cols(); }
  Eigen::Index dim() const { return inputs.rows(); }
  Dataset subset(Eigen::Index first, Eigen::Index count) const;
};

/// Gaussian-mixture generator. Class k owns centers k, k + P, k + 2P, ...;
/// a sample of class k picks one of them uniformly and draws from
/// N(centers.col(c), spreads(c)^2 I).
struct SynthSpec {
  int num_samples = 1000;
  int num_classes = 10;
  int input_dim = 16;
  int modes_per_class = 1;
  Eigen::MatrixXd centers;  // input_dim x (num_classes * modes_per_class)
  Eigen::VectorXd spreads;  // num_classes * modes_per_class
  double label_noise = 0.0;
  double flip_probability = 0.0;  // applied to final-exit predictions by emit_traces
  std::uint64_t seed = 1;

  void validate() const;

  /// Centers at `separation` times a seeded random unit direction, shared spread.
  static SynthSpec blobs(int num_samples, int num_classes, int input_dim, double separation, double spread,
                         std::uint64_t seed, int modes_per_class = 1);
};

/// Deterministic in `spec.seed`. Labels are drawn uniformly; coordinates are
/// rounded to the 9-significant-digit grid used by every file format.
Dataset generate_dataset(const SynthSpec& spec);

struct ToyNetSpec {
  int input_dim = 16;
  int num_classes = 10;
  std::vector<int> segment_widths{32, 32};  // one trunk segment per early exit
  int final_hidden = 32;                    // server-side hidden layer before the last softmax
  std::uint64_t seed = 7;

  int num_exits() const { return static_cast<int>(segment_widths.size()) + 1; }
};

/// Shared trunk with one softmax head per early exit and a final head after
/// the last segment.
struct ToyEarlyExitNet {
  std::vector<Net> segments;  // N-1, relu
  std::vector<Net> heads;     // N-1, single dense softmax layer
  Net final_head;             // softmax
  std::vector<double> exit_weights;  // N, each >= 0

  int num_exits() const { return static_cast<int>(segments.size()) + 1; }
  int num_classes() const { return static_cast<int>(final_head.output_dim()); }

  /// Softmax outputs of every exit, each num_classes x batch.
  std::vector<Eigen::MatrixXd> exit_probabilities(const Eigen::MatrixXd& inputs) const;

  friend bool operator==(const ToyEarlyExitNet&, const ToyEarlyExitNet&) = default;
};

ToyEarlyExitNet make_toy_net(const ToyNetSpec& spec, std::vector<double> exit_weights);

struct ToyGradients {
  std::vector<nn::Gradients<double>> segments;
  std::vector<nn::Gradients<double>> heads;
  nn::Gradients<double> final_head;
};

/// (1/B) sum_b sum_n w_n CE(softmax(z_n), y_b).
double joint_loss(const ToyEarlyExitNet& net, const Eigen::MatrixXd& inputs, std::span<const int> labels);

/// Joint loss and its gradient w.r.t. every parameter, backpropagated
/// through the shared trunk.
std::pair<double, ToyGradients> joint_loss_gradients(const ToyEarlyExitNet& net, const Eigen::MatrixXd& inputs,
                                                     std::span<const int> labels);

/// Central-difference check (step 1e-4) of joint_loss_gradients on one sample.
double joint_gradient_check(const ToyEarlyExitNet& net, const Eigen::VectorXd& input, int label, double step = 1e-4);

struct ToyTrainResult {
  ToyEarlyExitNet net;
  std::vector<double> loss_curve;  // joint training loss after each epoch
};

ToyTrainResult train_toy_net(const Dataset& data, const ToyNetSpec& spec, std::vector<double> exit_weights,
                             const nn::TrainConfig& cfg);

struct EmitOptions {
  double flip_probability = 0.0;
  std::uint64_t seed = 1;
  std::int64_t first_id = 0;
  bool include_features = true;
};

/// Runs every sample through every exit and records top-1 confidences and
/// argmax predictions against the given cost topology.
TraceSet emit_traces(const ToyEarlyExitNet& net, const Dataset& data, const ExitTopology& topology,
                     const EmitOptions& options = {});

// File formats.
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
void save_toy_net(const ToyEarlyExitNet& net, const std::filesystem::path& path);
ToyEarlyExitNet load_toy_net(const std::filesystem::path& path);
nlohmann::json to_json(const ToyEarlyExitNet& net);
ToyEarlyExitNet toy_net_from_json(const nlohmann::json& j);

}  // namespace exitsim::zoo
