#include "exitsim/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "exitsim/error.hpp"
#include "exitsim/io.hpp"

namespace exitsim::pipeline {

namespace {

using nlohmann::json;

enum Stage : std::uint64_t { kData = 1, kNet, kEeTrain, kEmit, kEpNet, kEpTrain, kRegressor };

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ParseError("config: " + where + " must be an object", 1);
  const std::set<std::string> names(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!names.count(key)) throw ParseError("config: unknown key '" + where + key + "'", 1);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void apply_train(nn::TrainConfig& cfg, const json& j, const std::string& where) {
  check_keys(j, where, {"learning_rate", "final_learning_rate", "anneal_epochs", "epochs", "batch_size",
                        "weight_decay"});
  read(j, "learning_rate", cfg.learning_rate);
  read(j, "final_learning_rate", cfg.final_learning_rate);
  read(j, "anneal_epochs", cfg.anneal_epochs);
  read(j, "epochs", cfg.epochs);
  read(j, "batch_size", cfg.batch_size);
  read(j, "weight_decay", cfg.weight_decay);
}

json train_json(const nn::TrainConfig& cfg) {
  return {{"learning_rate", cfg.learning_rate},     {"final_learning_rate", cfg.final_learning_rate},
          {"anneal_epochs", cfg.anneal_epochs},     {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},           {"weight_decay", cfg.weight_decay}};
}

std::string loss_csv(const std::vector<double>& curve) {
  std::string out = "epoch,loss\n";
  for (std::size_t e = 0; e < curve.size(); ++e) out += std::to_string(e + 1) + "," + format_real(curve[e]) + "\n";
  return out;
}

std::string first_line(const std::string& text) { return text.substr(0, text.find('\n')); }

}  // namespace

nn::TrainConfig ExperimentConfig::default_ee_training() {
  nn::TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.final_learning_rate = 1e-4;
  cfg.anneal_epochs = 200;
  cfg.epochs = 220;
  cfg.batch_size = 128;
  cfg.weight_decay = 5e-4;
  return cfg;
}

void ExperimentConfig::validate() const {
  topology.validate();
  const auto exits = static_cast<std::size_t>(topology.num_exits);
  if (segment_widths.size() + 1 != exits) throw InvariantError("config: segment_widths must have N-1 entries");
  if (exit_weights.size() != exits) throw InvariantError("config: exit_weights must have N entries");
  if (synth.num_classes != topology.num_classes) throw InvariantError("config: synth.num_classes must equal topology P");
  if (synth.train_samples < 1 || synth.test_samples < 1) throw InvariantError("config: sample counts must be >= 1");
  Thresholds::plain(lambda).validate(topology.num_exits);
  for (double v : frontier_lambdas)
    if (!(v > 0.0 && v < 1.0)) throw RangeError("config: frontier_lambdas must lie in (0,1)");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw RangeError("config: holdout_fraction must lie in (0,1)");
  if (select_on != "holdout" && select_on != "test") throw RangeError("config: select_on must be 'holdout' or 'test'");
  if (!(gamma_step > 0.0 && gamma_step < 1.0)) throw RangeError("config: gamma_step must lie in (0,1)");
  if (!(gamma_budget >= 0.0 && gamma_budget <= 1.0)) throw RangeError("config: gamma_budget must lie in [0,1]");
  if (bandwidths.empty()) throw RangeError("config: bandwidths must not be empty");
  for (double bw : bandwidths)
    if (!(bw > 0.0)) throw RangeError("config: bandwidths must be positive");
  environment.validate();
  ee_train.validate();
  ep_train.validate();
  regressor.train.validate();
  synth_spec().validate();
  optimizer::ThresholdGrid::uniform(early_exits(), optimizer_lambdas, optimizer_gammas).validate(topology.num_exits);
}

zoo::SynthSpec ExperimentConfig::synth_spec() const {
  auto spec = zoo::SynthSpec::blobs(synth.train_samples + synth.test_samples, synth.num_classes, synth.input_dim,
                                    synth.separation, synth.spread, stage_seed(seed, kData), synth.modes_per_class);
  spec.label_noise = synth.label_noise;
  spec.flip_probability = synth.flip_probability;
  return spec;
}

zoo::ToyNetSpec ExperimentConfig::net_spec() const {
  zoo::ToyNetSpec spec;
  spec.input_dim = synth.input_dim;
  spec.num_classes = synth.num_classes;
  spec.segment_widths = segment_widths;
  spec.final_hidden = final_hidden;
  spec.seed = stage_seed(seed, kNet);
  return spec;
}

void apply_json(ExperimentConfig& cfg, const json& j) {
  try {
    check_keys(j, "", {"format", "seed", "output_dir", "topology", "synth", "segment_widths", "final_hidden",
                       "exit_weights", "ee_train", "predictor_hidden", "lambda", "ep_train", "gamma_step",
                       "gamma_budget", "holdout_fraction", "select_on", "frontier_lambdas", "environment",
                       "optimizer_lambdas", "optimizer_gammas", "bandwidths", "intervals", "regressor"});
    read(j, "seed", cfg.seed);
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("topology")) {
      const auto& t = j.at("topology");
      check_keys(t, "topology.", {"N", "P", "segment_flops", "exit_flops", "server_flops", "predictor_flops",
                                  "raw_feature_bits", "compression_ratio"});
      read(t, "N", cfg.topology.num_exits);
      read(t, "P", cfg.topology.num_classes);
      read(t, "segment_flops", cfg.topology.segment_flops);
      read(t, "exit_flops", cfg.topology.exit_flops);
      read(t, "server_flops", cfg.topology.server_flops);
      read(t, "predictor_flops", cfg.topology.predictor_flops);
      read(t, "raw_feature_bits", cfg.topology.raw_feature_bits);
      read(t, "compression_ratio", cfg.topology.compression_ratio);
    }
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      check_keys(s, "synth.", {"train_samples", "test_samples", "num_classes", "input_dim", "modes_per_class", "separation", "spread",
                               "label_noise", "flip_probability"});
      read(s, "train_samples", cfg.synth.train_samples);
      read(s, "test_samples", cfg.synth.test_samples);
      read(s, "num_classes", cfg.synth.num_classes);
      read(s, "input_dim", cfg.synth.input_dim);
      read(s, "modes_per_class", cfg.synth.modes_per_class);
      read(s, "separation", cfg.synth.separation);
      read(s, "spread", cfg.synth.spread);
      read(s, "label_noise", cfg.synth.label_noise);
      read(s, "flip_probability", cfg.synth.flip_probability);
    }
    read(j, "segment_widths", cfg.segment_widths);
    read(j, "final_hidden", cfg.final_hidden);
    read(j, "exit_weights", cfg.exit_weights);
    if (j.contains("ee_train")) apply_train(cfg.ee_train, j.at("ee_train"), "ee_train.");
    read(j, "predictor_hidden", cfg.predictor_hidden);
    read(j, "lambda", cfg.lambda);
    if (j.contains("ep_train")) apply_train(cfg.ep_train, j.at("ep_train"), "ep_train.");
    read(j, "gamma_step", cfg.gamma_step);
    read(j, "gamma_budget", cfg.gamma_budget);
    read(j, "holdout_fraction", cfg.holdout_fraction);
    read(j, "select_on", cfg.select_on);
    read(j, "frontier_lambdas", cfg.frontier_lambdas);
    if (j.contains("environment")) {
      const auto& e = j.at("environment");
      check_keys(e, "environment.", {"compute_speed", "bandwidth", "latency_budget"});
      read(e, "compute_speed", cfg.environment.compute_speed);
      read(e, "bandwidth", cfg.environment.bandwidth);
      read(e, "latency_budget", cfg.environment.latency_budget);
    }
    read(j, "optimizer_lambdas", cfg.optimizer_lambdas);
    read(j, "optimizer_gammas", cfg.optimizer_gammas);
    read(j, "bandwidths", cfg.bandwidths);
    if (j.contains("intervals")) {
      cfg.intervals.clear();
      for (const auto& iv : j.at("intervals")) {
        const auto pair = iv.get<std::vector<double>>();
        if (pair.size() != 2) throw ParseError("config: each interval needs [low, high]", 1);
        cfg.intervals.push_back({pair[0], pair[1]});
      }
    }
    if (j.contains("regressor")) {
      const auto& r = j.at("regressor");
      check_keys(r, "regressor.", {"hidden", "learning_rate", "epochs", "batch_size"});
      read(r, "hidden", cfg.regressor.hidden);
      read(r, "learning_rate", cfg.regressor.train.learning_rate);
      read(r, "epochs", cfg.regressor.train.epochs);
      read(r, "batch_size", cfg.regressor.train.batch_size);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what(), 1);
  }
}

json to_json(const ExperimentConfig& cfg) {
  const auto& t = cfg.topology;
  json intervals = json::array();
  for (const auto& iv : cfg.intervals) intervals.push_back({iv.low, iv.high});
  return {
      {"format", "exitsim-config"},
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir.string()},
      {"topology",
       {{"N", t.num_exits},
        {"P", t.num_classes},
        {"segment_flops", t.segment_flops},
        {"exit_flops", t.exit_flops},
        {"server_flops", t.server_flops},
        {"predictor_flops", t.predictor_flops},
        {"raw_feature_bits", t.raw_feature_bits},
        {"compression_ratio", t.compression_ratio}}},
      {"synth",
       {{"train_samples", cfg.synth.train_samples},
        {"test_samples", cfg.synth.test_samples},
        {"num_classes", cfg.synth.num_classes},
        {"input_dim", cfg.synth.input_dim},
        {"modes_per_class", cfg.synth.modes_per_class},
        {"separation", cfg.synth.separation},
        {"spread", cfg.synth.spread},
        {"label_noise", cfg.synth.label_noise},
        {"flip_probability", cfg.synth.flip_probability}}},
      {"segment_widths", cfg.segment_widths},
      {"final_hidden", cfg.final_hidden},
      {"exit_weights", cfg.exit_weights},
      {"ee_train", train_json(cfg.ee_train)},
      {"predictor_hidden", cfg.predictor_hidden},
      {"lambda", cfg.lambda},
      {"ep_train", train_json(cfg.ep_train)},
      {"gamma_step", cfg.gamma_step},
      {"gamma_budget", cfg.gamma_budget},
      {"holdout_fraction", cfg.holdout_fraction},
      {"select_on", cfg.select_on},
      {"frontier_lambdas", cfg.frontier_lambdas},
      {"environment",
       {{"compute_speed", cfg.environment.compute_speed},
        {"bandwidth", cfg.environment.bandwidth},
        {"latency_budget", cfg.environment.latency_budget}}},
      {"optimizer_lambdas", cfg.optimizer_lambdas},
      {"optimizer_gammas", cfg.optimizer_gammas},
      {"bandwidths", cfg.bandwidths},
      {"intervals", intervals},
      {"regressor",
       {{"hidden", cfg.regressor.hidden},
        {"learning_rate", cfg.regressor.train.learning_rate},
        {"epochs", cfg.regressor.train.epochs},
        {"batch_size", cfg.regressor.train.batch_size}}},
  };
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  ExperimentConfig cfg;
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what(), 1);
  }
  apply_json(cfg, j);
  return cfg;
}

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * stage;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

TraceSet golden_trace_set(const ExitTopology& topology, const std::vector<int>& counts) {
  const int exits = topology.num_exits;
  if (static_cast<int>(counts.size()) != exits) throw DimensionError("golden traces: need one count per exit");
  constexpr double kLow = 0.5, kHigh = 0.97;
  if (1.0 / topology.num_classes > kLow) throw RangeError("golden traces: need P >= 2");
  std::vector<SampleTrace> samples;
  std::int64_t id = 0;
  for (int exit = 1; exit <= exits; ++exit) {
    if (counts[static_cast<std::size_t>(exit - 1)] < 0) throw RangeError("golden traces: counts must be >= 0");
    for (int k = 0; k < counts[static_cast<std::size_t>(exit - 1)]; ++k, ++id) {
      SampleTrace s;
      s.id = id;
      s.label = static_cast<int>(id % topology.num_classes);
      // Confident from its exit onward; the final exit of a last-exit sample stays at kLow.
      for (int n = 1; n <= exits; ++n) s.confidences.push_back(n >= exit && exit < exits ? kHigh : kLow);
      s.predicted.assign(static_cast<std::size_t>(exits), s.label);
      samples.push_back(std::move(s));
    }
  }
  return TraceSet(topology, std::move(samples));
}

TraceSet golden_trace_set() { return golden_trace_set(ExitTopology::vgg16_cifar10(), {6662, 1981, 1357}); }

DataSplit generate_data(const ExperimentConfig& cfg) {
  const auto all = zoo::generate_dataset(cfg.synth_spec());
  return {all.subset(0, cfg.synth.train_samples), all.subset(cfg.synth.train_samples, cfg.synth.test_samples)};
}

zoo::ToyTrainResult train_early_exit(const ExperimentConfig& cfg, const zoo::Dataset& train) {
  auto tc = cfg.ee_train;
  tc.seed = stage_seed(cfg.seed, kEeTrain);
  return zoo::train_toy_net(train, cfg.net_spec(), cfg.exit_weights, tc);
}

TraceSet emit(const ExperimentConfig& cfg, const zoo::ToyEarlyExitNet& net, const zoo::Dataset& data,
              std::int64_t first_id) {
  zoo::EmitOptions opt;
  opt.flip_probability = cfg.synth.flip_probability;
  opt.seed = stage_seed(cfg.seed, kEmit);
  opt.first_id = first_id;
  return zoo::emit_traces(net, data, cfg.topology, opt);
}

std::pair<TraceSet, TraceSet> split_holdout(const TraceSet& set, double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw RangeError("holdout fraction must lie in (0,1)");
  const auto held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(set.size())));
  if (held == 0 || held >= set.size()) throw RangeError("holdout split leaves an empty side");
  std::vector<std::size_t> fit, select;
  for (std::size_t i = 0; i < set.size(); ++i) (i < set.size() - held ? fit : select).push_back(i);
  return {set.subset(fit), set.subset(select)};
}

predictor::PredictorTraining train_exit_predictor(const ExperimentConfig& cfg, const TraceSet& train,
                                                  const std::vector<double>& lambda) {
  predictor::PredictorSpec spec;
  spec.hidden = cfg.predictor_hidden;
  spec.seed = stage_seed(cfg.seed, kEpNet);
  spec.predictor_flops = cfg.topology.predictor_flops;
  auto tc = cfg.ep_train;
  tc.seed = stage_seed(cfg.seed, kEpTrain);
  return predictor::train_predictor(train, lambda, spec, tc);
}

std::string emit_frontier(std::vector<FrontierRow> rows, int num_exits) {
  std::stable_sort(rows.begin(), rows.end(), [](const FrontierRow& a, const FrontierRow& b) {
    if (a.report.mean_on_device_mflops != b.report.mean_on_device_mflops) {
      return a.report.mean_on_device_mflops < b.report.mean_on_device_mflops;
    }
    if (a.method != b.method) return a.method < b.method;
    return a.thresholds.lambda < b.thresholds.lambda;
  });
  std::string out = engine::report_csv_header(num_exits) + "\n";
  for (const auto& r : rows) out += engine::report_csv_row(r.method, r.thresholds, r.report) + "\n";
  return out;
}

std::vector<optimizer::PolicyPoint> centered_sweep(const engine::PolicyEvaluator& evaluator,
                                                   const engine::Environment& env,
                                                   const std::vector<double>& bandwidths,
                                                   const optimizer::ThresholdGrid& grid) {
  auto points = optimizer::sweep_bandwidths(evaluator, env, bandwidths, grid);
  for (auto& p : points) p = optimizer::center_in_decision_cell(evaluator, p);
  return points;
}

std::vector<optimizer::PolicyPoint> evaluate_adapted(const engine::PolicyEvaluator& evaluator,
                                                     const engine::Environment& env,
                                                     const optimizer::RegressorBundle& bundle,
                                                     const std::vector<double>& bandwidths) {
  std::vector<optimizer::PolicyPoint> out;
  const auto policy = evaluator.has_scores() ? engine::Policy::predictor : engine::Policy::plain;
  for (double bw : bandwidths) {
    const auto th = optimizer::adapt(bundle, bw);
    const auto r = evaluator.evaluate(policy, th, env.with_bandwidth(bw));
    optimizer::PolicyPoint p;
    p.bandwidth = bw;
    p.lambda = th.lambda;
    p.gamma = th.gamma;
    p.accuracy = r.accuracy;
    p.mean_latency_s = *r.mean_latency_s;
    p.mean_on_device_mflops = r.mean_on_device_mflops;
    p.feasible = *r.budget_satisfied;
    out.push_back(std::move(p));
  }
  return out;
}

optimizer::RegressorBundle fit_adaptation(const ExperimentConfig& cfg, const std::vector<optimizer::PolicyPoint>& points) {
  auto rcfg = cfg.regressor;
  rcfg.train.seed = stage_seed(cfg.seed, kRegressor);
  return optimizer::fit_regressors(points, cfg.intervals, cfg.topology.num_classes, rcfg);
}

DemoSummary run_demo(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& dir = cfg.output_dir;
  DemoSummary summary;
  const auto write = [&](const std::string& name, const std::string& contents) {
    atomic_write(dir / name, contents);
    summary.artifacts.push_back(name);
  };
  const auto record = [&](const std::string& name) { summary.artifacts.push_back(name); };

  // The output location is not part of the result, so runs in different directories compare equal.
  auto archived = to_json(cfg);
  archived.erase("output_dir");
  write("config.json", archived.dump(1) + "\n");

  const auto data = generate_data(cfg);
  zoo::save_dataset(data.train, dir / "data_train.jsonl");
  record("data_train.jsonl");
  zoo::save_dataset(data.test, dir / "data_test.jsonl");
  record("data_test.jsonl");

  const auto ee = train_early_exit(cfg, data.train);
  zoo::save_toy_net(ee.net, dir / "ee_net.json");
  record("ee_net.json");
  write("ee_loss.csv", loss_csv(ee.loss_curve));

  const auto train_traces = emit(cfg, ee.net, data.train, 0);
  const auto test_traces = emit(cfg, ee.net, data.test, cfg.synth.train_samples);
  save_trace_set(train_traces, dir / "traces_train.jsonl");
  record("traces_train.jsonl");
  save_trace_set(test_traces, dir / "traces_test.jsonl");
  record("traces_test.jsonl");

  // The predictor never sees the split gamma is selected on.
  auto [fit_set, holdout_set] = split_holdout(train_traces, cfg.holdout_fraction);
  const TraceSet& selection_set = cfg.select_on == "test" ? test_traces : holdout_set;
  const auto ep = train_exit_predictor(cfg, fit_set, cfg.lambda);
  predictor::save_predictor(ep.predictor, dir / "predictor.json");
  record("predictor.json");
  write("ep_loss.csv", loss_csv(ep.loss_curve));

  const auto selection_scores = predictor::predict_scores(ep.predictor, selection_set);
  const auto test_scores = predictor::predict_scores(ep.predictor, test_traces);
  const auto gamma = predictor::select_gamma(selection_set, selection_scores, cfg.lambda, cfg.gamma_step,
                                             cfg.gamma_budget);
  summary.gamma = gamma.gamma;
  write("gamma.json", json{{"lambda", cfg.lambda},
                           {"gamma", gamma.gamma},
                           {"select_on", cfg.select_on},
                           {"grid_step", cfg.gamma_step},
                           {"budget_fraction", cfg.gamma_budget},
                           {"plain_last_exit_share", gamma.plain_last_exit_share},
                           {"extra_last_exit_share", gamma.extra_last_exit_share}}
                              .dump(1) + "\n");

  const engine::PolicyEvaluator test_eval(test_traces, test_scores);
  const auto env = cfg.environment;
  const Thresholds main_th{cfg.lambda, gamma.gamma};
  summary.plain = test_eval.evaluate(engine::Policy::plain, Thresholds::plain(cfg.lambda), env);
  summary.predictor = test_eval.evaluate(engine::Policy::predictor, main_th, env);
  summary.oracle = test_eval.evaluate(engine::Policy::oracle, Thresholds::plain(cfg.lambda), env);
  const int exits = cfg.topology.num_exits;
  write("report.csv", engine::report_csv_header(exits) + "\n" +
                          engine::report_csv_row("plain", Thresholds::plain(cfg.lambda), summary.plain) + "\n" +
                          engine::report_csv_row("predictor", main_th, summary.predictor) + "\n" +
                          engine::report_csv_row("oracle", Thresholds::plain(cfg.lambda), summary.oracle) + "\n");

  std::vector<FrontierRow> rows;
  for (double v : cfg.frontier_lambdas) {
    const std::vector<double> lam(static_cast<std::size_t>(cfg.early_exits()), v);
    const auto plain_th = Thresholds::plain(lam);
    const auto g = predictor::select_gamma(selection_set, selection_scores, lam, cfg.gamma_step, cfg.gamma_budget);
    rows.push_back({"plain", plain_th, test_eval.evaluate(engine::Policy::plain, plain_th)});
    rows.push_back({"oracle", plain_th, test_eval.evaluate(engine::Policy::oracle, plain_th)});
    const Thresholds pred_th{lam, g.gamma};
    rows.push_back({"predictor", pred_th, test_eval.evaluate(engine::Policy::predictor, pred_th)});
  }
  write("frontier.csv", emit_frontier(std::move(rows), exits));

  const auto grid = optimizer::ThresholdGrid::uniform(cfg.early_exits(), cfg.optimizer_lambdas, cfg.optimizer_gammas);
  summary.sweep = centered_sweep(test_eval, env, cfg.bandwidths, grid);
  write("policy.csv", optimizer::policy_csv(summary.sweep));

  const auto bundle = fit_adaptation(cfg, summary.sweep);
  optimizer::save_bundle(bundle, dir / "regressors.json");
  record("regressors.json");
  summary.adapted = evaluate_adapted(test_eval, env, bundle, cfg.bandwidths);
  write("adapt.csv", optimizer::policy_csv(summary.adapted));

  const auto report_json = [](const engine::AggregateReport& r) {
    return json{{"accuracy", r.accuracy},
                {"on_device_mflops", r.mean_on_device_mflops},
                {"total_mflops", r.mean_total_mflops},
                {"exit_distribution", r.exit_distribution}};
  };
  write("summary.json", json{{"format", "exitsim-summary"},
                             {"lambda", cfg.lambda},
                             {"gamma", gamma.gamma},
                             {"plain", report_json(summary.plain)},
                             {"predictor", report_json(summary.predictor)},
                             {"oracle", report_json(summary.oracle)},
                             {"artifacts", summary.artifacts}}
                                .dump(1) + "\n");
  return summary;
}

std::string validate_artifact(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  const std::string head = first_line(text);
  const auto name = path.filename().string();
  if (head.rfind("bandwidth", 0) == 0) {
    return name + ": policy table, " + std::to_string(optimizer::parse_policy_csv(text).size()) + " rows";
  }
  if (head.rfind("epoch,loss", 0) == 0) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    long rows = 0, lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      const auto comma = line.find(',');
      try {
        if (comma == std::string::npos || std::stol(line.substr(0, comma)) != rows + 1) throw std::invalid_argument("");
        (void)std::stod(line.substr(comma + 1));
      } catch (const std::exception&) {
        throw ParseError("loss curve: malformed row", lineno);
      }
      ++rows;
    }
    return name + ": loss curve, " + std::to_string(rows) + " epochs";
  }
  if (head.rfind("method", 0) == 0) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    const auto columns = std::count(head.begin(), head.end(), ',');
    long rows = 0, lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (std::count(line.begin(), line.end(), ',') != columns) throw ParseError("report: wrong number of columns", lineno);
      ++rows;
    }
    return name + ": report table, " + std::to_string(rows) + " rows";
  }
  json header;
  try {
    header = json::parse(head);
  } catch (const json::parse_error&) {
    try {
      header = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(name + ": unrecognized artifact: " + e.what(), 1);
    }
  }
  if (header.is_object() && header.contains("N")) {
    return name + ": trace set, " + std::to_string(load_trace_set(path).size()) + " samples";
  }
  if (header.is_object() && header.value("format", "") == "exitsim-dataset") {
    return name + ": dataset, " + std::to_string(zoo::load_dataset(path).size()) + " samples";
  }
  // Whole-document formats.
  const json doc = json::parse(text);
  const std::string format = doc.is_object() ? doc.value("format", "") : "";
  if (format == "exitsim-mlp") return name + ": mlp checkpoint, " + std::to_string(nn::load_checkpoint<double>(path).parameter_count()) + " parameters";
  if (format == "exitsim-toy-net") return name + ": early-exit net, " + std::to_string(zoo::load_toy_net(path).num_exits()) + " exits";
  if (format == "exitsim-exit-predictor") { (void)predictor::load_predictor(path); return name + ": exit predictor"; }
  if (format == "exitsim-threshold-regressors") {
    return name + ": threshold regressors, " + std::to_string(optimizer::load_bundle(path).regressors.size()) + " intervals";
  }
  if (format == "exitsim-config") { load_config(path).validate(); return name + ": experiment config"; }
  if (doc.is_object() && doc.contains("gamma") && doc.contains("lambda")) {
    Thresholds{doc.at("lambda").get<std::vector<double>>(), doc.at("gamma").get<std::vector<double>>()}.validate(
        static_cast<int>(doc.at("lambda").size()) + 1);
    return name + (format == "exitsim-summary" ? ": run summary" : ": gamma selection");
  }
  throw ParseError(name + ": unrecognized artifact", 1);
}

}  // namespace exitsim::pipeline
