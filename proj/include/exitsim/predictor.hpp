#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "exitsim/engine.hpp"
#include "exitsim/nncore.hpp"
#include "exitsim/trace.hpp"

namespace exitsim::predictor {

/// Lightweight net deciding, per sample, which early exits are worth
/// computing. Output n is the likelihood that c_n >= lambda_n.
struct ExitPredictor {
  nn::Mlp<double> net;          // ends in a sigmoid of width N-1
  std::vector<double> lambda;   // confidence thresholds the labels were cut at
  double predictor_flops = 0.40;

  friend bool operator==(const ExitPredictor&, const ExitPredictor&) = default;
};

/// "FCs only": features -> hidden relu -> N-1 sigmoid.
struct PredictorSpec {
  int hidden = 64;
  std::uint64_t seed = 11;
  double predictor_flops = 0.40;
};

/// Same schedule as the early-exit network with lighter weight decay.
nn::TrainConfig default_predictor_training();

/// Binary targets, (N-1) x samples: 1 where c_n >= lambda_n.
Eigen::MatrixXd make_labels(const TraceSet& set, const std::vector<double>& lambda);

/// Features as a (dim x samples) matrix. Throws MissingDataError if any sample lacks them.
Eigen::MatrixXd feature_matrix(const TraceSet& set);

struct PredictorTraining {
  ExitPredictor predictor;
  std::vector<double> loss_curve;
};

PredictorTraining train_predictor(const TraceSet& set, const std::vector<double>& lambda, const PredictorSpec& spec,
                                  const nn::TrainConfig& cfg);

engine::PredictorScores predict_scores(const ExitPredictor& ep, const TraceSet& set);

/// 0, step, 2*step, ... and finally 1.
std::vector<double> unit_grid(double step);

struct GammaSelection {
  std::vector<double> gamma;
  engine::AggregateReport report;    // predictor policy at the chosen gamma
  double plain_last_exit_share = 0.0;
  double extra_last_exit_share = 0.0;
  std::size_t evaluated = 0;
};

/// Exhaustive grid search for the gamma with the lowest mean on-device cost
/// among those sending fewer than `budget_fraction` additional samples to the
/// last exit; ties go to the lexicographically smallest gamma.
GammaSelection select_gamma(const TraceSet& set, const engine::PredictorScores& scores,
                            const std::vector<double>& lambda, double grid_step, double budget_fraction = 0.02);

std::vector<double> select_gamma(const TraceSet& set, const ExitPredictor& ep, const std::vector<double>& lambda,
                                 double grid_step, double budget_fraction = 0.02);

nlohmann::json to_json(const ExitPredictor& ep);
ExitPredictor predictor_from_json(const nlohmann::json& j);
void save_predictor(const ExitPredictor& ep, const std::filesystem::path& path);
ExitPredictor load_predictor(const std::filesystem::path& path);

}  // namespace exitsim::predictor
