#include "exitsim/engine.hpp"

#include <cmath>
#include <unordered_map>

#include "exitsim/error.hpp"

namespace exitsim::engine {

namespace {

void check_lambda(const std::vector<double>& lambda, int exits) {
  if (static_cast<int>(lambda.size()) != exits - 1) {
    throw DimensionError("lambda has " + std::to_string(lambda.size()) + " entries, topology needs " +
                         std::to_string(exits - 1));
  }
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    if (!(lambda[i] > 0.0 && lambda[i] < 1.0)) {
      throw RangeError("lambda[" + std::to_string(i) + "] must lie in (0,1)");
    }
  }
}

}  // namespace

void Environment::validate() const {
  if (!(compute_speed > 0.0 && std::isfinite(compute_speed))) throw InvariantError("environment: compute_speed must be > 0");
  if (!(bandwidth > 0.0 && std::isfinite(bandwidth))) throw InvariantError("environment: bandwidth must be > 0");
  if (!(latency_budget > 0.0)) throw InvariantError("environment: latency_budget must be > 0");
}

Environment Environment::with_bandwidth(double bits_per_second) const {
  Environment e = *this;
  e.bandwidth = bits_per_second;
  return e;
}

const char* to_string(Policy p) {
  switch (p) {
    case Policy::plain: return "plain";
    case Policy::predictor: return "predictor";
    case Policy::oracle: return "oracle";
  }
  return "plain";
}

Eigen::MatrixXd PredictorScores::aligned_to(const TraceSet& set) const {
  const auto rows = static_cast<Eigen::Index>(set.num_exits() - 1);
  if (values.rows() != rows || values.cols() != static_cast<Eigen::Index>(ids.size())) {
    throw DimensionError("predictor scores must be (N-1) x samples");
  }
  std::unordered_map<std::int64_t, Eigen::Index> where;
  where.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) where.emplace(ids[i], static_cast<Eigen::Index>(i));
  Eigen::MatrixXd out(rows, static_cast<Eigen::Index>(set.size()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto id = set.samples()[i].id;
    auto it = where.find(id);
    if (it == where.end()) throw MissingDataError("no predictor scores for sample " + std::to_string(id));
    out.col(static_cast<Eigen::Index>(i)) = values.col(it->second);
  }
  if ((out.array() < 0.0).any() || (out.array() > 1.0).any() || !out.allFinite()) {
    throw InvariantError("predictor scores must lie in [0,1]");
  }
  return out;
}

PolicyEvaluator::PolicyEvaluator(const TraceSet& set) : topology_(set.topology()), exits_(set.num_exits()) {
  const auto n = static_cast<Eigen::Index>(exits_);
  const auto s = static_cast<Eigen::Index>(set.size());
  confidences_.resize(n, s);
  correct_.resize(n, s);
  ids_.reserve(set.size());
  for (Eigen::Index i = 0; i < s; ++i) {
    const auto& sample = set.samples()[static_cast<std::size_t>(i)];
    ids_.push_back(sample.id);
    for (Eigen::Index k = 0; k < n; ++k) {
      confidences_(k, i) = sample.confidences[static_cast<std::size_t>(k)];
      correct_(k, i) = sample.predicted[static_cast<std::size_t>(k)] == sample.label;
    }
  }
}

PolicyEvaluator::PolicyEvaluator(const TraceSet& set, const PredictorScores& scores) : PolicyEvaluator(set) {
  scores_ = scores.aligned_to(set);
}

template <bool Records>
void PolicyEvaluator::execute(Policy policy, const Thresholds& th, const std::optional<Environment>& env,
                              AggregateReport& report, std::vector<DecisionRecord>* records) const {
  if (ids_.empty()) throw InvariantError("cannot evaluate a policy on an empty trace set");
  check_lambda(th.lambda, exits_);
  if (policy == Policy::predictor) {
    th.validate(exits_);
    if (!has_scores()) throw MissingDataError("predictor policy needs predictor scores");
  }
  if (env) env->validate();

  const int early = exits_ - 1;
  const std::size_t count = ids_.size();
  const double ep = policy == Policy::predictor ? topology_.predictor_flops : 0.0;
  const std::int64_t payload = topology_.transmitted_bits();
  const double* seg = topology_.segment_flops.data();
  const double* head = topology_.exit_flops.data();
  const double* lambda = th.lambda.data();
  const double* gamma = th.gamma.data();

  std::vector<double> on_device(count), total(count), latency;
  if (env) latency.resize(count);
  std::vector<std::size_t> exit_counts(static_cast<std::size_t>(exits_), 0);
  std::size_t correct = 0, transmitted = 0;
  std::vector<bool> computed(static_cast<std::size_t>(early));

  for (std::size_t i = 0; i < count; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    const double* conf = confidences_.col(col).data();
    int taken = exits_;
    double cost = 0.0;
    if constexpr (Records) std::fill(computed.begin(), computed.end(), false);

    switch (policy) {
      case Policy::plain:
        for (int n = 0; n < early; ++n) {
          cost += seg[n];
          cost += head[n];
          if constexpr (Records) computed[static_cast<std::size_t>(n)] = true;
          if (conf[n] >= lambda[n]) {
            taken = n + 1;
            break;
          }
        }
        break;
      case Policy::predictor: {
        const double* score = scores_.col(col).data();
        for (int n = 0; n < early; ++n) {
          cost += seg[n];
          if (score[n] >= gamma[n]) {
            cost += head[n];
            if constexpr (Records) computed[static_cast<std::size_t>(n)] = true;
            if (conf[n] >= lambda[n]) {
              taken = n + 1;
              break;
            }
          }
        }
        cost += ep;
        break;
      }
      case Policy::oracle: {
        for (int n = 0; n < early; ++n) {
          if (conf[n] >= lambda[n]) {
            taken = n + 1;
            break;
          }
        }
        for (int n = 0; n < std::min(taken, early); ++n) cost += seg[n];
        if (taken < exits_) {
          cost += head[taken - 1];
          if constexpr (Records) computed[static_cast<std::size_t>(taken - 1)] = true;
        }
        break;
      }
    }

    const bool sent = taken == exits_;
    const bool ok = correct_(taken - 1, col);
    on_device[i] = cost;
    total[i] = sent ? cost + topology_.server_flops : cost;
    ++exit_counts[static_cast<std::size_t>(taken - 1)];
    correct += ok ? 1 : 0;
    transmitted += sent ? 1 : 0;
    double lat = 0.0;
    if (env) {
      lat = cost * 1e6 / env->compute_speed + (sent ? static_cast<double>(payload) / env->bandwidth : 0.0);
      latency[i] = lat;
    }
    if constexpr (Records) {
      DecisionRecord r;
      r.sample_id = ids_[i];
      r.exit_taken = taken;
      r.exits_computed = computed;
      r.on_device_mflops = cost;
      r.transmitted = sent;
      r.transmitted_bits = sent ? payload : 0;
      r.correct = ok;
      r.latency_s = lat;
      records->push_back(std::move(r));
    }
  }

  const double n = static_cast<double>(count);
  report.accuracy = static_cast<double>(correct) / n;
  report.mean_on_device_mflops = pairwise_sum(on_device) / n;
  report.mean_total_mflops = pairwise_sum(total) / n;
  report.mean_predictor_mflops = ep;
  report.transmitted_fraction = static_cast<double>(transmitted) / n;
  report.exit_distribution.resize(exit_counts.size());
  for (std::size_t k = 0; k < exit_counts.size(); ++k) report.exit_distribution[k] = static_cast<double>(exit_counts[k]) / n;
  if (env) {
    report.mean_latency_s = pairwise_sum(latency) / n;
    report.budget_satisfied = *report.mean_latency_s <= env->latency_budget;
  } else {
    report.mean_latency_s.reset();
    report.budget_satisfied.reset();
  }
}

AggregateReport PolicyEvaluator::evaluate(Policy policy, const Thresholds& thresholds,
                                          const std::optional<Environment>& env) const {
  AggregateReport report;
  execute<false>(policy, thresholds, env, report, nullptr);
  return report;
}

RunResult PolicyEvaluator::run(Policy policy, const Thresholds& thresholds, const std::optional<Environment>& env) const {
  RunResult result;
  result.records.reserve(ids_.size());
  execute<true>(policy, thresholds, env, result.report, &result.records);
  return result;
}

RunResult run_plain(const TraceSet& set, const std::vector<double>& lambda, const std::optional<Environment>& env) {
  check_lambda(lambda, set.num_exits());
  return PolicyEvaluator(set).run(Policy::plain, Thresholds::plain(lambda), env);
}

RunResult run_with_predictor(const TraceSet& set, const Thresholds& thresholds, const PredictorScores& scores,
                             const std::optional<Environment>& env) {
  return PolicyEvaluator(set, scores).run(Policy::predictor, thresholds, env);
}

RunResult run_oracle(const TraceSet& set, const std::vector<double>& lambda, const std::optional<Environment>& env) {
  check_lambda(lambda, set.num_exits());
  return PolicyEvaluator(set).run(Policy::oracle, Thresholds::plain(lambda), env);
}

double latency_of(const DecisionRecord& record, const ExitTopology& topology, const Environment& env) {
  env.validate();
  const std::int64_t bits = record.transmitted ? topology.transmitted_bits() : 0;
  return record.on_device_mflops * 1e6 / env.compute_speed + static_cast<double>(bits) / env.bandwidth;
}

double pairwise_sum(std::span<const double> values) {
  constexpr std::size_t kBlock = 8;
  if (values.size() <= kBlock) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

std::string report_csv_header(int num_exits) {
  std::string h = "method";
  for (int n = 1; n < num_exits; ++n) h += ",lambda_" + std::to_string(n);
  for (int n = 1; n < num_exits; ++n) h += ",gamma_" + std::to_string(n);
  h += ",accuracy,on_device_mflops,predictor_mflops,total_mflops,transmitted_fraction";
  for (int n = 1; n <= num_exits; ++n) h += ",exit_" + std::to_string(n);
  h += ",latency_s,budget_satisfied";
  return h;
}

std::string report_csv_row(const std::string& method, const Thresholds& th, const AggregateReport& r) {
  std::string row = method;
  for (double v : th.lambda) row += "," + format_real(v);
  for (std::size_t n = 0; n < th.lambda.size(); ++n) row += "," + format_real(n < th.gamma.size() ? th.gamma[n] : 0.0);
  row += "," + format_real(r.accuracy) + "," + format_real(r.mean_on_device_mflops) + "," +
         format_real(r.mean_predictor_mflops) + "," + format_real(r.mean_total_mflops) + "," +
         format_real(r.transmitted_fraction);
  for (double v : r.exit_distribution) row += "," + format_real(v);
  row += ",";
  if (r.mean_latency_s) row += format_real(*r.mean_latency_s);
  row += ",";
  if (r.budget_satisfied) row += *r.budget_satisfied ? "1" : "0";
  return row;
}

}  // namespace exitsim::engine
