#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exitsim/engine.hpp"
#include "exitsim/optimizer.hpp"
#include "exitsim/predictor.hpp"
#include "exitsim/trace.hpp"
#include "exitsim/zoo.hpp"

namespace exitsim::pipeline {

struct SynthConfig {
  int train_samples = 2000;
  int test_samples = 1000;
  int num_classes = 10;
  int input_dim = 16;
  int modes_per_class = 8;  // several blobs per class so deeper exits pay off
  double separation = 4.0;
  double spread = 0.6;
  double label_noise = 0.0;
  double flip_probability = 0.0;
};

/// Everything a run depends on. Sub-seeds are derived from `seed`.
struct ExperimentConfig {
  std::uint64_t seed = 2024;
  std::filesystem::path output_dir = "exitsim-out";
  ExitTopology topology = ExitTopology::vgg16_cifar10();
  SynthConfig synth;
  std::vector<int> segment_widths{32, 32};
  int final_hidden = 32;
  std::vector<double> exit_weights{0.2, 0.3, 0.5};
  nn::TrainConfig ee_train = default_ee_training();

  int predictor_hidden = 64;
  std::vector<double> lambda{0.9, 0.9};
  nn::TrainConfig ep_train = predictor::default_predictor_training();
  double gamma_step = 0.05;
  double gamma_budget = 0.02;
  double holdout_fraction = 0.2;
  std::string select_on = "holdout";  // holdout | test

  std::vector<double> frontier_lambdas{0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.99};

  engine::Environment environment;
  std::vector<double> optimizer_lambdas = optimizer::linear_grid(0.2, 0.9, 0.1);
  std::vector<double> optimizer_gammas = predictor::unit_grid(0.05);
  // Union of the three five-point regressor training sets.
  std::vector<double> bandwidths{0.1e6, 0.3e6, 0.5e6, 0.7e6, 1e6, 3e6, 5e6, 7e6, 10e6, 30e6, 50e6, 70e6, 100e6};
  std::vector<optimizer::BandwidthInterval> intervals = optimizer::default_intervals();
  optimizer::RegressorConfig regressor;

  /// SGD, batch 128, weight decay 5e-4, cosine 0.1 -> 1e-4 by epoch 200 of 220.
  static nn::TrainConfig default_ee_training();

  void validate() const;
  zoo::SynthSpec synth_spec() const;
  zoo::ToyNetSpec net_spec() const;
  int early_exits() const { return topology.num_exits - 1; }
};

/// Keys absent from `j` keep their current value; unknown keys are rejected.
void apply_json(ExperimentConfig& cfg, const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Derived seed for one pipeline stage.
std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage);

/// Deterministic trace set whose plain-policy exit shares are exactly
/// counts[n] / sum(counts) for any lambda in (0.5, 0.97], e.g. (0.9, 0.9) or
/// (0.95, 0.85). Every sample is classified correctly.
TraceSet golden_trace_set(const ExitTopology& topology, const std::vector<int>& counts);
/// 6662 / 1981 / 1357 out of 10,000 on the VGG16-BN CIFAR10 topology.
TraceSet golden_trace_set();

/// Train/test datasets drawn from one synthetic distribution.
struct DataSplit {
  zoo::Dataset train;
  zoo::Dataset test;
};
DataSplit generate_data(const ExperimentConfig& cfg);

zoo::ToyTrainResult train_early_exit(const ExperimentConfig& cfg, const zoo::Dataset& train);

/// Test traces take ids after the training traces so the two never collide.
TraceSet emit(const ExperimentConfig& cfg, const zoo::ToyEarlyExitNet& net, const zoo::Dataset& data,
              std::int64_t first_id);

/// Leading (1 - holdout) share trains the predictor, the rest selects gamma.
std::pair<TraceSet, TraceSet> split_holdout(const TraceSet& set, double holdout_fraction);

predictor::PredictorTraining train_exit_predictor(const ExperimentConfig& cfg, const TraceSet& train,
                                                  const std::vector<double>& lambda);

/// One row per (method, threshold setting) of the accuracy-versus-cost plot.
struct FrontierRow {
  std::string method;
  Thresholds thresholds;
  engine::AggregateReport report;
};

/// CSV sorted by mean on-device MFLOPs ascending, then method, then lambda.
std::string emit_frontier(std::vector<FrontierRow> rows, int num_exits);

struct DemoSummary {
  engine::AggregateReport plain;
  engine::AggregateReport predictor;
  engine::AggregateReport oracle;
  std::vector<double> gamma;
  std::vector<optimizer::PolicyPoint> sweep;
  std::vector<optimizer::PolicyPoint> adapted;  // adapt() re-evaluated at each sweep bandwidth
  std::vector<std::string> artifacts;           // file names relative to the output directory
};

/// generate -> train -> trace -> predictor -> gamma -> frontier -> sweep ->
/// regressors, writing every artifact under cfg.output_dir.
DemoSummary run_demo(const ExperimentConfig& cfg);

/// Re-evaluates adapt(bundle, bw) for each bandwidth with the predictor policy.
std::vector<optimizer::PolicyPoint> evaluate_adapted(const engine::PolicyEvaluator& evaluator,
                                                     const engine::Environment& env,
                                                     const optimizer::RegressorBundle& bundle,
                                                     const std::vector<double>& bandwidths);

/// Sweep, then center each point in its decision cell so small regression
/// error leaves decisions unchanged.
std::vector<optimizer::PolicyPoint> centered_sweep(const engine::PolicyEvaluator& evaluator,
                                                   const engine::Environment& env,
                                                   const std::vector<double>& bandwidths,
                                                   const optimizer::ThresholdGrid& grid);

/// Regressors for cfg.intervals, seeded from the global seed.
optimizer::RegressorBundle fit_adaptation(const ExperimentConfig& cfg, const std::vector<optimizer::PolicyPoint>& points);

/// Loads any artifact the pipeline writes, detected from its content, and
/// returns a one-line description. Throws on invalid content.
std::string validate_artifact(const std::filesystem::path& path);

}  // namespace exitsim::pipeline
