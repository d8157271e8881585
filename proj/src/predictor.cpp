#include "exitsim/predictor.hpp"

#include <cmath>

#include "exitsim/error.hpp"
#include "exitsim/io.hpp"

namespace exitsim::predictor {

nn::TrainConfig default_predictor_training() {
  nn::TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.final_learning_rate = 1e-4;
  cfg.anneal_epochs = 200;
  cfg.epochs = 220;
  cfg.batch_size = 128;
  cfg.weight_decay = 2e-4;
  cfg.seed = 11;
  return cfg;
}

Eigen::MatrixXd make_labels(const TraceSet& set, const std::vector<double>& lambda) {
  const int early = set.num_exits() - 1;
  if (static_cast<int>(lambda.size()) != early) throw DimensionError("make_labels: lambda must have N-1 entries");
  Eigen::MatrixXd labels(early, static_cast<Eigen::Index>(set.size()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& c = set.samples()[i].confidences;
    for (int n = 0; n < early; ++n) labels(n, static_cast<Eigen::Index>(i)) = c[static_cast<std::size_t>(n)] >= lambda[static_cast<std::size_t>(n)] ? 1.0 : 0.0;
  }
  return labels;
}

Eigen::MatrixXd feature_matrix(const TraceSet& set) {
  if (set.size() == 0) throw MissingDataError("trace set is empty");
  Eigen::Index dim = -1;
  Eigen::MatrixXd x;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& s = set.samples()[i];
    if (!s.features) throw MissingDataError("sample " + std::to_string(s.id) + " carries no features");
    if (dim < 0) {
      dim = static_cast<Eigen::Index>(s.features->size());
      if (dim == 0) throw MissingDataError("sample " + std::to_string(s.id) + " carries empty features");
      x.resize(dim, static_cast<Eigen::Index>(set.size()));
    }
    if (static_cast<Eigen::Index>(s.features->size()) != dim) {
      throw DimensionError("sample " + std::to_string(s.id) + ": feature length differs from the first sample");
    }
    x.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::VectorXd>(s.features->data(), dim);
  }
  return x;
}

PredictorTraining train_predictor(const TraceSet& set, const std::vector<double>& lambda, const PredictorSpec& spec,
                                  const nn::TrainConfig& cfg) {
  const Eigen::MatrixXd x = feature_matrix(set);
  const Eigen::MatrixXd y = make_labels(set, lambda);
  using nn::Activation;
  const int dims[] = {static_cast<int>(x.rows()), spec.hidden, set.num_exits() - 1};
  const Activation acts[] = {Activation::relu, Activation::sigmoid};
  auto trained = nn::train(nn::Mlp<double>::make(dims, acts, spec.seed), x, y, nn::LossSpec<double>::bce(), cfg);
  return {ExitPredictor{std::move(trained.net), lambda, spec.predictor_flops}, std::move(trained.loss_curve)};
}

engine::PredictorScores predict_scores(const ExitPredictor& ep, const TraceSet& set) {
  if (ep.net.output_dim() != set.num_exits() - 1) throw DimensionError("predictor output width must be N-1");
  engine::PredictorScores scores;
  scores.values = nn::forward_batch(ep.net, feature_matrix(set));
  scores.ids.reserve(set.size());
  for (const auto& s : set.samples()) scores.ids.push_back(s.id);
  return scores;
}

std::vector<double> unit_grid(double step) {
  if (!(step > 0.0 && step < 1.0)) throw RangeError("grid step must lie in (0,1)");
  std::vector<double> values;
  for (long k = 0;; ++k) {
    const double v = static_cast<double>(k) * step;
    if (v >= 1.0 - 1e-12) break;
    values.push_back(v);
  }
  values.push_back(1.0);
  return values;
}

GammaSelection select_gamma(const TraceSet& set, const engine::PredictorScores& scores,
                            const std::vector<double>& lambda, double grid_step, double budget_fraction) {
  const int early = set.num_exits() - 1;
  if (static_cast<int>(lambda.size()) != early) throw DimensionError("select_gamma: lambda must have N-1 entries");
  const auto axis = unit_grid(grid_step);
  const engine::PolicyEvaluator evaluator(set, scores);
  const double plain_share = evaluator.evaluate(engine::Policy::plain, Thresholds::plain(lambda)).exit_distribution.back();

  GammaSelection best;
  best.plain_last_exit_share = plain_share;
  bool found = false;
  std::vector<std::size_t> index(static_cast<std::size_t>(early), 0);
  Thresholds th{lambda, std::vector<double>(static_cast<std::size_t>(early), 0.0)};
  // Odometer over the grid, last axis fastest: visits gammas in lexicographic order.
  while (true) {
    for (int n = 0; n < early; ++n) th.gamma[static_cast<std::size_t>(n)] = axis[index[static_cast<std::size_t>(n)]];
    const auto report = evaluator.evaluate(engine::Policy::predictor, th);
    ++best.evaluated;
    const double extra = report.exit_distribution.back() - plain_share;
    if (extra < budget_fraction && (!found || report.mean_on_device_mflops < best.report.mean_on_device_mflops)) {
      found = true;
      best.gamma = th.gamma;
      best.report = report;
      best.extra_last_exit_share = extra;
    }
    int pos = early - 1;
    while (pos >= 0 && ++index[static_cast<std::size_t>(pos)] == axis.size()) index[static_cast<std::size_t>(pos--)] = 0;
    if (pos < 0) break;
  }
  if (!found) {
    // Only reachable with budget_fraction <= 0; gamma = 0 adds no last-exit samples.
    best.gamma.assign(static_cast<std::size_t>(early), 0.0);
    best.report = evaluator.evaluate(engine::Policy::predictor, Thresholds{lambda, best.gamma});
    best.extra_last_exit_share = best.report.exit_distribution.back() - plain_share;
  }
  return best;
}

std::vector<double> select_gamma(const TraceSet& set, const ExitPredictor& ep, const std::vector<double>& lambda,
                                 double grid_step, double budget_fraction) {
  return select_gamma(set, predict_scores(ep, set), lambda, grid_step, budget_fraction).gamma;
}

nlohmann::json to_json(const ExitPredictor& ep) {
  return {{"format", "exitsim-exit-predictor"},
          {"lambda", ep.lambda},
          {"predictor_flops", ep.predictor_flops},
          {"net", nn::to_json(ep.net)}};
}

ExitPredictor predictor_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "exitsim-exit-predictor") throw ParseError("not an exit-predictor checkpoint", 1);
    ExitPredictor ep;
    ep.lambda = j.at("lambda").get<std::vector<double>>();
    ep.predictor_flops = j.at("predictor_flops").get<double>();
    ep.net = nn::mlp_from_json<double>(j.at("net"));
    if (static_cast<std::size_t>(ep.net.output_dim()) != ep.lambda.size()) {
      throw DimensionError("exit-predictor checkpoint: output width differs from lambda length");
    }
    return ep;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("exit-predictor checkpoint: ") + e.what(), 1);
  }
}

void save_predictor(const ExitPredictor& ep, const std::filesystem::path& path) {
  atomic_write(path, to_json(ep).dump(1) + "\n");
}

ExitPredictor load_predictor(const std::filesystem::path& path) {
  try {
    return predictor_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("exit-predictor checkpoint: ") + e.what(), 1);
  }
}

}  // namespace exitsim::predictor
