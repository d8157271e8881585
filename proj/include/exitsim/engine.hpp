#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "exitsim/trace.hpp"

namespace exitsim::engine {

/// Device compute speed (FLOP/s), link bandwidth (bit/s), latency budget (s).
struct Environment {
  double compute_speed = 3.62e9;
  double bandwidth = 1e6;
  double latency_budget = 0.030;

  void validate() const;
  Environment with_bandwidth(double bits_per_second) const;
};

struct DecisionRecord {
  std::int64_t sample_id = 0;
  int exit_taken = 0;                // 1..N
  std::vector<bool> exits_computed;  // N-1
  double on_device_mflops = 0.0;
  bool transmitted = false;
  std::int64_t transmitted_bits = 0;
  bool correct = false;
  double latency_s = 0.0;  // 0 when no environment was supplied
};

struct AggregateReport {
  double accuracy = 0.0;
  double mean_on_device_mflops = 0.0;  // includes the predictor for predictor runs
  double mean_predictor_mflops = 0.0;
  double mean_total_mflops = 0.0;
  double transmitted_fraction = 0.0;
  std::vector<double> exit_distribution;  // N, sums to 1
  std::optional<double> mean_latency_s;
  std::optional<bool> budget_satisfied;
};

struct RunResult {
  std::vector<DecisionRecord> records;
  AggregateReport report;
};

/// Per-sample predictor scores s_n, keyed by sample id.
struct PredictorScores {
  std::vector<std::int64_t> ids;
  Eigen::MatrixXd values;  // (N-1) x ids.size(), each in [0,1]

  /// Score matrix reordered to `set`'s sample order. Throws MissingDataError
  /// naming the first sample id without scores.
  Eigen::MatrixXd aligned_to(const TraceSet& set) const;
};

enum class Policy { plain, predictor, oracle };
const char* to_string(Policy p);

/// Trace set flattened for repeated policy evaluation. Borrows nothing.
class PolicyEvaluator {
 public:
  explicit PolicyEvaluator(const TraceSet& set);
  PolicyEvaluator(const TraceSet& set, const PredictorScores& scores);

  int num_exits() const { return exits_; }
  std::size_t size() const { return ids_.size(); }
  bool has_scores() const { return scores_.size() > 0; }
  const ExitTopology& topology() const { return topology_; }
  const Eigen::MatrixXd& confidences() const { return confidences_; }
  const Eigen::MatrixXd& scores() const { return scores_; }

  /// Aggregate only; no per-sample records are materialized.
  AggregateReport evaluate(Policy policy, const Thresholds& thresholds,
                           const std::optional<Environment>& env = std::nullopt) const;

  RunResult run(Policy policy, const Thresholds& thresholds, const std::optional<Environment>& env = std::nullopt) const;

 private:
  template <bool Records>
  void execute(Policy policy, const Thresholds& thresholds, const std::optional<Environment>& env,
               AggregateReport& report, std::vector<DecisionRecord>* records) const;

  ExitTopology topology_;
  int exits_;
  std::vector<std::int64_t> ids_;
  Eigen::MatrixXd confidences_;  // N x S
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> correct_;  // N x S
  Eigen::MatrixXd scores_;       // (N-1) x S, empty without a predictor
};

/// Early exiting on confidence alone: terminate at the first n with c_n >= lambda_n.
RunResult run_plain(const TraceSet& set, const std::vector<double>& lambda,
                    const std::optional<Environment>& env = std::nullopt);

/// Predictor-aided inference: exit n is computed only when s_n >= gamma_n.
RunResult run_with_predictor(const TraceSet& set, const Thresholds& thresholds, const PredictorScores& scores,
                             const std::optional<Environment>& env = std::nullopt);

/// Idealized routing: each sample computes only the classifier it exits from.
RunResult run_oracle(const TraceSet& set, const std::vector<double>& lambda,
                     const std::optional<Environment>& env = std::nullopt);

/// On-device compute time plus transmission time, server time excluded.
double latency_of(const DecisionRecord& record, const ExitTopology& topology, const Environment& env);

/// Pairwise (cascade) summation; deterministic for a given input order.
double pairwise_sum(std::span<const double> values);

// Flat key-value rendering of a report, one CSV row per run.
std::string report_csv_header(int num_exits);
std::string report_csv_row(const std::string& method, const Thresholds& thresholds, const AggregateReport& report);

}  // namespace exitsim::engine
