#pragma once

// Random generators and brute-force reference implementations shared by the
// unit tests and the acceptance binary. Nothing here calls into the engine or
// optimizer internals it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "exitsim/engine.hpp"
#include "exitsim/nncore.hpp"
#include "exitsim/trace.hpp"

namespace exitsim::testing {

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("exitsim-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct RandomTraceSpec {
  int min_exits = 2, max_exits = 4;
  int min_samples = 1, max_samples = 200;
  bool features = false;
  int feature_dim = 4;
};

inline ExitTopology random_topology(std::mt19937_64& rng, int exits, int classes) {
  std::uniform_real_distribution<double> flops(0.0, 60.0);
  ExitTopology t;
  t.num_exits = exits;
  t.num_classes = classes;
  for (int n = 0; n + 1 < exits; ++n) {
    t.segment_flops.push_back(canonical_real(flops(rng)));
    t.exit_flops.push_back(canonical_real(flops(rng)));
  }
  t.server_flops = canonical_real(flops(rng) * 5.0);
  t.predictor_flops = canonical_real(flops(rng) / 50.0);
  t.raw_feature_bits = std::uniform_int_distribution<std::int64_t>(1, 2'000'000)(rng);
  t.compression_ratio = canonical_real(std::uniform_real_distribution<double>(1.0, 128.0)(rng));
  return t;
}

inline TraceSet random_trace_set(std::mt19937_64& rng, const RandomTraceSpec& spec = {}) {
  const int exits = std::uniform_int_distribution<int>(spec.min_exits, spec.max_exits)(rng);
  const int classes = std::uniform_int_distribution<int>(2, 10)(rng);
  const int count = std::uniform_int_distribution<int>(spec.min_samples, spec.max_samples)(rng);
  auto topology = random_topology(rng, exits, classes);
  std::uniform_real_distribution<double> conf(1.0 / classes, 1.0);
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::normal_distribution<double> normal;
  std::vector<SampleTrace> samples;
  for (int i = 0; i < count; ++i) {
    SampleTrace s;
    s.id = 1000 + 3 * i;
    s.label = cls(rng);
    for (int n = 0; n < exits; ++n) {
      s.confidences.push_back(std::min(canonical_real(conf(rng)), 0.999999999));
      s.predicted.push_back(cls(rng));
    }
    if (spec.features) {
      std::vector<double> f;
      for (int d = 0; d < spec.feature_dim; ++d) f.push_back(canonical_real(normal(rng)));
      s.features = f;
    }
    samples.push_back(std::move(s));
  }
  return TraceSet(topology, std::move(samples));
}

inline engine::PredictorScores random_scores(std::mt19937_64& rng, const TraceSet& set) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  engine::PredictorScores s;
  s.values.resize(set.num_exits() - 1, static_cast<Eigen::Index>(set.size()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    s.ids.push_back(set.samples()[i].id);
    for (int n = 0; n + 1 < set.num_exits(); ++n) s.values(n, static_cast<Eigen::Index>(i)) = u(rng);
  }
  return s;
}

inline std::vector<double> random_vector(std::mt19937_64& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(u(rng));
  return v;
}

/// Smallest |pre-activation| over the relu layers of `net` for `input`.
/// Central differences straddle the relu kink when this is below the step.
inline double relu_margin(const nn::Mlp<double>& net, const Eigen::VectorXd& input) {
  double margin = std::numeric_limits<double>::infinity();
  Eigen::VectorXd a = input;
  for (const auto& layer : net.layers()) {
    const Eigen::VectorXd z = layer.weights * a + layer.bias;
    if (layer.activation == nn::Activation::relu) margin = std::min(margin, z.cwiseAbs().minCoeff());
    a = nn::forward(nn::Mlp<double>({layer}, 0), a);
  }
  return margin;
}

/// Outcome of one sample under a literal reading of the inference procedure.
struct Walk {
  int exit = 0;  // 1-based
  double on_device = 0.0;
  bool transmitted = false;
};

/// The inference procedure line by line: the predictor runs first, then each segment;
/// exit n's classifier runs only if s_n >= gamma_n, and terminates the sample
/// only if additionally c_n >= lambda_n.
inline Walk walk_with_predictor(const ExitTopology& t, const std::vector<double>& c, const std::vector<double>& s,
                                const std::vector<double>& lambda, const std::vector<double>& gamma) {
  Walk w;
  w.on_device = t.predictor_flops;
  for (int n = 1; n <= t.num_exits - 1; ++n) {
    w.on_device += t.segment_flops[n - 1];
    const bool compute_exit = s[n - 1] >= gamma[n - 1];
    if (!compute_exit) continue;
    w.on_device += t.exit_flops[n - 1];
    if (c[n - 1] >= lambda[n - 1]) {
      w.exit = n;
      return w;
    }
  }
  w.exit = t.num_exits;
  w.transmitted = true;
  return w;
}

inline Walk walk_plain(const ExitTopology& t, const std::vector<double>& c, const std::vector<double>& lambda) {
  Walk w;
  for (int n = 1; n <= t.num_exits - 1; ++n) {
    w.on_device += t.segment_flops[n - 1] + t.exit_flops[n - 1];
    if (c[n - 1] >= lambda[n - 1]) {
      w.exit = n;
      return w;
    }
  }
  w.exit = t.num_exits;
  w.transmitted = true;
  return w;
}

/// Independent mean-of-records summary with straightforward summation.
struct WalkSummary {
  double accuracy = 0.0;
  double on_device = 0.0;
  double latency = 0.0;
};

inline WalkSummary summarize_with_predictor(const TraceSet& set, const Eigen::MatrixXd& scores,
                                            const std::vector<double>& lambda, const std::vector<double>& gamma,
                                            const engine::Environment& env) {
  const auto& t = set.topology();
  const double payload = std::ceil(static_cast<double>(t.raw_feature_bits) / t.compression_ratio);
  WalkSummary sum;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& s = set.samples()[i];
    std::vector<double> sc(scores.rows());
    for (Eigen::Index n = 0; n < scores.rows(); ++n) sc[static_cast<std::size_t>(n)] = scores(n, static_cast<Eigen::Index>(i));
    const auto w = walk_with_predictor(t, s.confidences, sc, lambda, gamma);
    sum.accuracy += s.predicted[static_cast<std::size_t>(w.exit - 1)] == s.label ? 1.0 : 0.0;
    sum.on_device += w.on_device;
    sum.latency += w.on_device * 1e6 / env.compute_speed + (w.transmitted ? payload / env.bandwidth : 0.0);
  }
  const double n = static_cast<double>(set.size());
  return {sum.accuracy / n, sum.on_device / n, sum.latency / n};
}

}  // namespace exitsim::testing
