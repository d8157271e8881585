#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "exitsim/engine.hpp"
#include "exitsim/error.hpp"
#include "exitsim/nncore.hpp"
#include "exitsim/trace.hpp"

namespace exitsim::optimizer {

/// Candidate values per early exit for lambda and gamma. The searched set is
/// the Cartesian product of every axis.
struct ThresholdGrid {
  std::vector<std::vector<double>> lambda_axes;
  std::vector<std::vector<double>> gamma_axes;

  /// Same value list on every exit.
  static ThresholdGrid uniform(int early_exits, const std::vector<double>& lambda_values,
                               const std::vector<double>& gamma_values);
  std::size_t size() const;
  void validate(int num_exits) const;
};

/// lo, lo+step, ..., up to hi inclusive (within 1e-9 of a step).
std::vector<double> linear_grid(double lo, double hi, double step);

/// One solution of the latency-constrained accuracy maximization.
struct PolicyPoint {
  double bandwidth = 0.0;  // bit/s
  std::vector<double> lambda;
  std::vector<double> gamma;
  double accuracy = 0.0;
  double mean_latency_s = 0.0;
  double mean_on_device_mflops = 0.0;
  bool feasible = false;

  Thresholds thresholds() const { return {lambda, gamma}; }
};

/// No grid point meets the budget; carries the lowest-latency point.
class InfeasibleError : public Error {
 public:
  explicit InfeasibleError(PolicyPoint closest);
  const PolicyPoint& closest() const noexcept { return closest_; }
  const char* kind() const noexcept override { return "infeasible"; }

 private:
  PolicyPoint closest_;
};

struct GridSearchResult {
  PolicyPoint best;
  std::vector<PolicyPoint> frontier;  // every evaluated point, grid order
};

/// Highest-accuracy feasible point; ties go to lower mean latency, then to the
/// lexicographically smaller (lambda, gamma). Evaluates the predictor policy
/// when the evaluator carries scores, else the plain policy with gamma = 0.
GridSearchResult grid_search(const engine::PolicyEvaluator& evaluator, const engine::Environment& env,
                             const ThresholdGrid& grid);

/// One grid_search per bandwidth, in input order. Bandwidths where nothing is
/// feasible yield the lowest-latency point with feasible = false.
std::vector<PolicyPoint> sweep_bandwidths(const engine::PolicyEvaluator& evaluator, const engine::Environment& env,
                                          const std::vector<double>& bandwidths, const ThresholdGrid& grid);

/// Moves each threshold to the middle of the range of values that leave every
/// decision on `evaluator`'s trace set unchanged.
PolicyPoint center_in_decision_cell(const engine::PolicyEvaluator& evaluator, const PolicyPoint& point);

struct BandwidthInterval {
  double low = 0.0;   // bit/s
  double high = 0.0;  // bit/s

  bool contains(double bandwidth) const;
};

std::vector<BandwidthInterval> default_intervals();

/// Two dense layers mapping scaled log10(bandwidth) to thresholds.
struct ThresholdRegressor {
  BandwidthInterval interval;
  std::vector<double> training_bandwidths;
  nn::Mlp<double> lambda_net;
  nn::Mlp<double> gamma_net;
  double max_abs_training_error = 0.0;

  /// Network input for a bandwidth: log10 mapped linearly onto [-1, 1] across the interval.
  double encode(double bandwidth) const;
};

struct RegressorConfig {
  int hidden = 16;
  nn::TrainConfig train = default_train();

  static nn::TrainConfig default_train();
};

struct RegressorBundle {
  std::vector<ThresholdRegressor> regressors;
  int num_classes = 2;
};

/// Trains a lambda- and a gamma-regressor per interval on the points whose
/// bandwidth lies in it (endpoints inclusive). Throws RangeError for an
/// interval holding fewer than two points.
RegressorBundle fit_regressors(const std::vector<PolicyPoint>& points, const std::vector<BandwidthInterval>& intervals,
                               int num_classes, const RegressorConfig& cfg = {});

/// Thresholds for `bandwidth` from the first interval covering it, so shared
/// endpoints go to the lower interval. lambda is clamped to
/// [1/P + eps, 1 - eps], gamma to [0, 1].
Thresholds adapt(const RegressorBundle& bundle, double bandwidth);

// Files.
std::string policy_csv(const std::vector<PolicyPoint>& points);
std::vector<PolicyPoint> parse_policy_csv(const std::string& text);
nlohmann::json to_json(const RegressorBundle& bundle);
RegressorBundle bundle_from_json(const nlohmann::json& j);
void save_bundle(const RegressorBundle& bundle, const std::filesystem::path& path);
RegressorBundle load_bundle(const std::filesystem::path& path);

}  // namespace exitsim::optimizer
