#include "exitsim/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "exitsim/io.hpp"

namespace exitsim::optimizer {

namespace {

using engine::Policy;

// Relative slack when matching a bandwidth against interval endpoints.
constexpr double kEndpointSlack = 1e-9;
// Keeps adapted lambda strictly inside (1/P, 1).
constexpr double kLambdaMargin = 1e-6;

bool lexicographically_less(const PolicyPoint& a, const PolicyPoint& b) {
  if (a.lambda != b.lambda) return std::lexicographical_compare(a.lambda.begin(), a.lambda.end(), b.lambda.begin(), b.lambda.end());
  return std::lexicographical_compare(a.gamma.begin(), a.gamma.end(), b.gamma.begin(), b.gamma.end());
}

// Total order used for the argmax: accuracy, then latency, then thresholds.
bool better(const PolicyPoint& a, const PolicyPoint& b) {
  if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
  if (a.mean_latency_s != b.mean_latency_s) return a.mean_latency_s < b.mean_latency_s;
  return lexicographically_less(a, b);
}

bool faster(const PolicyPoint& a, const PolicyPoint& b) {
  if (a.mean_latency_s != b.mean_latency_s) return a.mean_latency_s < b.mean_latency_s;
  return lexicographically_less(a, b);
}

// Midpoint of the gap around `value` in `sorted`: every sample keeps its side
// of the `>=` comparison.
double cell_center(const std::vector<double>& sorted, double value, double floor, double ceiling) {
  auto it = std::lower_bound(sorted.begin(), sorted.end(), value);  // first >= value
  const double above = it == sorted.end() ? ceiling : *it;
  const double below = it == sorted.begin() ? floor : *std::prev(it);
  return 0.5 * (below + above);
}

std::vector<double> sorted_row(const Eigen::MatrixXd& m, Eigen::Index row) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(c)] = m(row, c);
  std::sort(v.begin(), v.end());
  return v;
}

nn::Mlp<double> fit_one(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const RegressorConfig& cfg,
                        std::uint64_t seed, double& max_error) {
  using nn::Activation;
  const int dims[] = {1, cfg.hidden, static_cast<int>(y.rows())};
  const Activation acts[] = {Activation::sigmoid, Activation::identity};
  auto net = nn::Mlp<double>::make(dims, acts, seed);
  net.layers().back().bias = y.rowwise().mean();

  nn::TrainConfig train = cfg.train;
  train.seed = seed;
  net = nn::train(std::move(net), x, y, nn::LossSpec<double>::mse(), train).net;

  // SGD leaves a small residual; absorb it with the minimum-norm change to the
  // output layer, which interpolates whenever hidden >= training points.
  auto& head = net.layers().back();
  const Eigen::MatrixXd hidden = nn::forward_batch(nn::Mlp<double>({net.layers().front()}, net.seed()), x);
  Eigen::MatrixXd design(hidden.rows() + 1, hidden.cols());
  design << hidden, Eigen::RowVectorXd::Ones(hidden.cols());
  const Eigen::MatrixXd residual = y - nn::forward_batch(net, x);
  const Eigen::MatrixXd delta = design.transpose().completeOrthogonalDecomposition().solve(residual.transpose());
  head.weights += delta.topRows(hidden.rows()).transpose();
  head.bias += delta.bottomRows(1).transpose();

  max_error = (nn::forward_batch(net, x) - y).cwiseAbs().maxCoeff();
  return net;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

ThresholdGrid ThresholdGrid::uniform(int early_exits, const std::vector<double>& lambda_values,
                                     const std::vector<double>& gamma_values) {
  ThresholdGrid g;
  g.lambda_axes.assign(static_cast<std::size_t>(early_exits), lambda_values);
  g.gamma_axes.assign(static_cast<std::size_t>(early_exits), gamma_values);
  return g;
}

std::size_t ThresholdGrid::size() const {
  std::size_t n = 1;
  for (const auto& a : lambda_axes) n *= a.size();
  for (const auto& a : gamma_axes) n *= a.size();
  return n;
}

void ThresholdGrid::validate(int num_exits) const {
  const auto early = static_cast<std::size_t>(num_exits - 1);
  if (lambda_axes.size() != early || gamma_axes.size() != early) throw DimensionError("grid: need one axis per early exit");
  for (const auto& a : lambda_axes) {
    if (a.empty()) throw RangeError("grid: empty lambda axis");
    for (double v : a)
      if (!(v > 0.0 && v < 1.0)) throw RangeError("grid: lambda values must lie in (0,1)");
  }
  for (const auto& a : gamma_axes) {
    if (a.empty()) throw RangeError("grid: empty gamma axis");
    for (double v : a)
      if (!(v >= 0.0 && v <= 1.0)) throw RangeError("grid: gamma values must lie in [0,1]");
  }
}

std::vector<double> linear_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || hi < lo) throw RangeError("grid: need step > 0 and hi >= lo");
  std::vector<double> v;
  for (long k = 0;; ++k) {
    const double x = lo + static_cast<double>(k) * step;
    if (x > hi + 1e-9 * step) break;
    v.push_back(canonical_real(x));
  }
  return v;
}

InfeasibleError::InfeasibleError(PolicyPoint closest)
    : Error("no threshold setting meets the latency budget; lowest mean latency is " +
            format_real(closest.mean_latency_s) + " s"),
      closest_(std::move(closest)) {}

GridSearchResult grid_search(const engine::PolicyEvaluator& evaluator, const engine::Environment& env,
                             const ThresholdGrid& grid) {
  env.validate();
  const int early = evaluator.num_exits() - 1;
  const bool predictor = evaluator.has_scores();
  ThresholdGrid effective = grid;
  if (!predictor) effective.gamma_axes.assign(static_cast<std::size_t>(early), std::vector<double>{0.0});
  effective.validate(evaluator.num_exits());

  std::vector<const std::vector<double>*> axes;
  for (const auto& a : effective.lambda_axes) axes.push_back(&a);
  for (const auto& a : effective.gamma_axes) axes.push_back(&a);
  std::vector<std::size_t> index(axes.size(), 0);

  GridSearchResult result;
  result.frontier.reserve(effective.size());
  std::optional<PolicyPoint> best, quickest;
  Thresholds th{std::vector<double>(static_cast<std::size_t>(early)), std::vector<double>(static_cast<std::size_t>(early))};
  const Policy policy = predictor ? Policy::predictor : Policy::plain;
  while (true) {
    for (int n = 0; n < early; ++n) {
      th.lambda[static_cast<std::size_t>(n)] = (*axes[static_cast<std::size_t>(n)])[index[static_cast<std::size_t>(n)]];
      th.gamma[static_cast<std::size_t>(n)] = (*axes[static_cast<std::size_t>(early + n)])[index[static_cast<std::size_t>(early + n)]];
    }
    const auto report = evaluator.evaluate(policy, th, env);
    PolicyPoint p;
    p.bandwidth = env.bandwidth;
    p.lambda = th.lambda;
    p.gamma = th.gamma;
    p.accuracy = report.accuracy;
    p.mean_latency_s = *report.mean_latency_s;
    p.mean_on_device_mflops = report.mean_on_device_mflops;
    p.feasible = *report.budget_satisfied;
    if (p.feasible && (!best || better(p, *best))) best = p;
    if (!quickest || faster(p, *quickest)) quickest = p;
    result.frontier.push_back(std::move(p));

    int pos = static_cast<int>(axes.size()) - 1;
    while (pos >= 0 && ++index[static_cast<std::size_t>(pos)] == axes[static_cast<std::size_t>(pos)]->size()) {
      index[static_cast<std::size_t>(pos--)] = 0;
    }
    if (pos < 0) break;
  }
  if (!best) throw InfeasibleError(*quickest);
  result.best = *best;
  return result;
}

std::vector<PolicyPoint> sweep_bandwidths(const engine::PolicyEvaluator& evaluator, const engine::Environment& env,
                                          const std::vector<double>& bandwidths, const ThresholdGrid& grid) {
  std::vector<PolicyPoint> points;
  points.reserve(bandwidths.size());
  for (double bw : bandwidths) {
    if (!(bw > 0.0)) throw RangeError("sweep: bandwidths must be positive");
    try {
      points.push_back(grid_search(evaluator, env.with_bandwidth(bw), grid).best);
    } catch (const InfeasibleError& e) {
      points.push_back(e.closest());
    }
  }
  return points;
}

PolicyPoint center_in_decision_cell(const engine::PolicyEvaluator& evaluator, const PolicyPoint& point) {
  const int early = evaluator.num_exits() - 1;
  if (static_cast<int>(point.lambda.size()) != early) throw DimensionError("center: lambda must have N-1 entries");
  PolicyPoint out = point;
  const double floor = 1.0 / evaluator.topology().num_classes;
  for (int n = 0; n < early; ++n) {
    out.lambda[static_cast<std::size_t>(n)] =
        cell_center(sorted_row(evaluator.confidences(), n), point.lambda[static_cast<std::size_t>(n)], floor, 1.0);
  }
  if (evaluator.has_scores()) {
    if (static_cast<int>(point.gamma.size()) != early) throw DimensionError("center: gamma must have N-1 entries");
    for (int n = 0; n < early; ++n) {
      out.gamma[static_cast<std::size_t>(n)] =
          cell_center(sorted_row(evaluator.scores(), n), point.gamma[static_cast<std::size_t>(n)], 0.0, 1.0);
    }
  }
  return out;
}

bool BandwidthInterval::contains(double bandwidth) const {
  return bandwidth >= low * (1.0 - kEndpointSlack) && bandwidth <= high * (1.0 + kEndpointSlack);
}

std::vector<BandwidthInterval> default_intervals() { return {{0.1e6, 1e6}, {1e6, 10e6}, {10e6, 100e6}}; }

double ThresholdRegressor::encode(double bandwidth) const {
  const double lo = std::log10(interval.low), hi = std::log10(interval.high);
  return 2.0 * (std::log10(bandwidth) - lo) / (hi - lo) - 1.0;
}

nn::TrainConfig RegressorConfig::default_train() {
  nn::TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.final_learning_rate = 0.0;
  cfg.anneal_epochs = 0;
  cfg.epochs = 4000;
  cfg.batch_size = 16;
  cfg.weight_decay = 0.0;
  cfg.seed = 29;
  return cfg;
}

RegressorBundle fit_regressors(const std::vector<PolicyPoint>& points, const std::vector<BandwidthInterval>& intervals,
                               int num_classes, const RegressorConfig& cfg) {
  if (intervals.empty()) throw RangeError("fit_regressors: no intervals");
  if (num_classes < 2) throw RangeError("fit_regressors: P must be >= 2");
  RegressorBundle bundle;
  bundle.num_classes = num_classes;
  auto ordered = intervals;
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.low < b.low; });
  std::uint64_t stream = 0;
  for (const auto& iv : ordered) {
    if (!(iv.low > 0.0 && iv.high > iv.low)) throw RangeError("fit_regressors: interval needs 0 < low < high");
    std::vector<const PolicyPoint*> members;
    for (const auto& p : points)
      if (iv.contains(p.bandwidth)) members.push_back(&p);
    if (members.size() < 2) {
      throw RangeError("fit_regressors: interval [" + format_real(iv.low) + ", " + format_real(iv.high) +
                       "] holds fewer than two policy points");
    }
    const auto early = static_cast<Eigen::Index>(members.front()->lambda.size());
    ThresholdRegressor reg;
    reg.interval = iv;
    Eigen::MatrixXd x(1, static_cast<Eigen::Index>(members.size()));
    Eigen::MatrixXd lam(early, x.cols()), gam(early, x.cols());
    for (std::size_t i = 0; i < members.size(); ++i) {
      const auto& p = *members[i];
      if (static_cast<Eigen::Index>(p.lambda.size()) != early || static_cast<Eigen::Index>(p.gamma.size()) != early) {
        throw DimensionError("fit_regressors: policy points differ in exit count");
      }
      reg.training_bandwidths.push_back(p.bandwidth);
      x(0, static_cast<Eigen::Index>(i)) = reg.encode(p.bandwidth);
      for (Eigen::Index n = 0; n < early; ++n) {
        lam(n, static_cast<Eigen::Index>(i)) = p.lambda[static_cast<std::size_t>(n)];
        gam(n, static_cast<Eigen::Index>(i)) = p.gamma[static_cast<std::size_t>(n)];
      }
    }
    double lam_err = 0.0, gam_err = 0.0;
    reg.lambda_net = fit_one(x, lam, cfg, cfg.train.seed + stream++, lam_err);
    reg.gamma_net = fit_one(x, gam, cfg, cfg.train.seed + stream++, gam_err);
    reg.max_abs_training_error = std::max(lam_err, gam_err);
    bundle.regressors.push_back(std::move(reg));
  }
  return bundle;
}

Thresholds adapt(const RegressorBundle& bundle, double bandwidth) {
  for (const auto& reg : bundle.regressors) {
    if (!reg.interval.contains(bandwidth)) continue;
    Eigen::VectorXd x(1);
    x(0) = reg.encode(bandwidth);
    const Eigen::VectorXd lam = nn::forward(reg.lambda_net, x);
    const Eigen::VectorXd gam = nn::forward(reg.gamma_net, x);
    Thresholds th;
    const double lo = 1.0 / bundle.num_classes + kLambdaMargin, hi = 1.0 - kLambdaMargin;
    for (Eigen::Index n = 0; n < lam.size(); ++n) th.lambda.push_back(std::clamp(lam(n), lo, hi));
    for (Eigen::Index n = 0; n < gam.size(); ++n) th.gamma.push_back(std::clamp(gam(n), 0.0, 1.0));
    return th;
  }
  throw RangeError("adapt: bandwidth " + format_real(bandwidth) + " bit/s lies outside every regressor interval");
}

std::string policy_csv(const std::vector<PolicyPoint>& points) {
  const std::size_t early = points.empty() ? 0 : points.front().lambda.size();
  std::string out = "bandwidth";
  for (std::size_t n = 1; n <= early; ++n) out += ",lambda_" + std::to_string(n);
  for (std::size_t n = 1; n <= early; ++n) out += ",gamma_" + std::to_string(n);
  out += ",accuracy,latency,feasible,on_device_mflops\n";
  for (const auto& p : points) {
    out += format_real(p.bandwidth);
    for (double v : p.lambda) out += "," + format_real(v);
    for (double v : p.gamma) out += "," + format_real(v);
    out += "," + format_real(p.accuracy) + "," + format_real(p.mean_latency_s) + "," + (p.feasible ? "1" : "0") + "," +
           format_real(p.mean_on_device_mflops) + "\n";
  }
  return out;
}

std::vector<PolicyPoint> parse_policy_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw ParseError("policy table: empty file", 1);
  ++lineno;
  const auto header = split(line, ',');
  std::size_t early = 0;
  for (const auto& h : header)
    if (h.rfind("lambda_", 0) == 0) ++early;
  const std::size_t expected = 1 + 2 * early + 4;
  if (header.empty() || header.front() != "bandwidth" || header.size() != expected) {
    throw ParseError("policy table: unexpected header", lineno);
  }
  std::vector<PolicyPoint> points;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != expected) throw ParseError("policy table: wrong number of columns", lineno);
    std::vector<double> v;
    try {
      for (const auto& c : cells) v.push_back(std::stod(c));
    } catch (const std::exception&) {
      throw ParseError("policy table: malformed number", lineno);
    }
    PolicyPoint p;
    p.bandwidth = v[0];
    p.lambda.assign(v.begin() + 1, v.begin() + 1 + static_cast<long>(early));
    p.gamma.assign(v.begin() + 1 + static_cast<long>(early), v.begin() + 1 + 2 * static_cast<long>(early));
    p.accuracy = v[1 + 2 * early];
    p.mean_latency_s = v[2 + 2 * early];
    p.feasible = v[3 + 2 * early] != 0.0;
    p.mean_on_device_mflops = v[4 + 2 * early];
    points.push_back(std::move(p));
  }
  return points;
}

nlohmann::json to_json(const RegressorBundle& bundle) {
  nlohmann::json regs = nlohmann::json::array();
  for (const auto& r : bundle.regressors) {
    regs.push_back({{"interval", {r.interval.low, r.interval.high}},
                    {"training_bandwidths", r.training_bandwidths},
                    {"max_abs_training_error", r.max_abs_training_error},
                    {"lambda_net", nn::to_json(r.lambda_net)},
                    {"gamma_net", nn::to_json(r.gamma_net)}});
  }
  return {{"format", "exitsim-threshold-regressors"}, {"num_classes", bundle.num_classes}, {"regressors", regs}};
}

RegressorBundle bundle_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "exitsim-threshold-regressors") throw ParseError("not a regressor bundle", 1);
    RegressorBundle b;
    b.num_classes = j.at("num_classes").get<int>();
    for (const auto& rj : j.at("regressors")) {
      ThresholdRegressor r;
      const auto iv = rj.at("interval").get<std::vector<double>>();
      if (iv.size() != 2) throw ParseError("regressor interval must have two entries", 1);
      r.interval = {iv[0], iv[1]};
      r.training_bandwidths = rj.at("training_bandwidths").get<std::vector<double>>();
      r.max_abs_training_error = rj.at("max_abs_training_error").get<double>();
      r.lambda_net = nn::mlp_from_json<double>(rj.at("lambda_net"));
      r.gamma_net = nn::mlp_from_json<double>(rj.at("gamma_net"));
      b.regressors.push_back(std::move(r));
    }
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("regressor bundle: ") + e.what(), 1);
  }
}

void save_bundle(const RegressorBundle& bundle, const std::filesystem::path& path) {
  atomic_write(path, to_json(bundle).dump(1) + "\n");
}

RegressorBundle load_bundle(const std::filesystem::path& path) {
  try {
    return bundle_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("regressor bundle: ") + e.what(), 1);
  }
}

}  // namespace exitsim::optimizer
