#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "exitsim/engine.hpp"
#include "exitsim/error.hpp"
#include "exitsim/io.hpp"
#include "exitsim/optimizer.hpp"
#include "exitsim/pipeline.hpp"
#include "exitsim/predictor.hpp"
#include "exitsim/trace.hpp"
#include "exitsim/zoo.hpp"

namespace exitsim::cli {

namespace {

using nlohmann::json;
using pipeline::ExperimentConfig;

constexpr const char* kConfigEnv = "EXITSIM_CONFIG";

// Flags shared by every subcommand; each one overrides the config key of the same name.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::vector<double> lambda;
  std::optional<double> gamma_step, gamma_budget, holdout, budget, compute_speed, bandwidth;
  std::optional<std::string> select_on;
  std::vector<double> bandwidths;
  std::optional<int> train_samples, test_samples, ee_epochs, ep_epochs;
};

void add_overrides(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config, "Experiment config (JSON); defaults to $EXITSIM_CONFIG");
  app.add_option("--seed", o.seed, "Global seed");
  app.add_option("--out-dir", o.out_dir, "Output directory");
  app.add_option("--lambda", o.lambda, "Confidence thresholds, comma separated")->delimiter(',');
  app.add_option("--gamma-step", o.gamma_step, "Gamma grid step");
  app.add_option("--gamma-budget", o.gamma_budget, "Allowed additional last-exit share");
  app.add_option("--holdout", o.holdout, "Holdout fraction for gamma selection");
  app.add_option("--select-on", o.select_on, "Split gamma is selected on")->check(CLI::IsMember({"holdout", "test"}));
  app.add_option("--budget", o.budget, "Latency budget (s)");
  app.add_option("--compute-speed", o.compute_speed, "Device compute speed (FLOP/s)");
  app.add_option("--bandwidth", o.bandwidth, "Link bandwidth (bit/s)");
  app.add_option("--bandwidths", o.bandwidths, "Sweep bandwidths (bit/s), comma separated")->delimiter(',');
  app.add_option("--train-samples", o.train_samples, "Synthetic training samples");
  app.add_option("--test-samples", o.test_samples, "Synthetic test samples");
  app.add_option("--ee-epochs", o.ee_epochs, "Early-exit network epochs");
  app.add_option("--ep-epochs", o.ep_epochs, "Exit Predictor epochs");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig cfg;
  std::string path = o.config;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnv)) path = env;
  }
  if (!path.empty()) cfg = pipeline::load_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out_dir) cfg.output_dir = *o.out_dir;
  if (!o.lambda.empty()) cfg.lambda = o.lambda;
  if (o.gamma_step) cfg.gamma_step = *o.gamma_step;
  if (o.gamma_budget) cfg.gamma_budget = *o.gamma_budget;
  if (o.holdout) cfg.holdout_fraction = *o.holdout;
  if (o.select_on) cfg.select_on = *o.select_on;
  if (o.budget) cfg.environment.latency_budget = *o.budget;
  if (o.compute_speed) cfg.environment.compute_speed = *o.compute_speed;
  if (o.bandwidth) cfg.environment.bandwidth = *o.bandwidth;
  if (!o.bandwidths.empty()) cfg.bandwidths = o.bandwidths;
  if (o.train_samples) cfg.synth.train_samples = *o.train_samples;
  if (o.test_samples) cfg.synth.test_samples = *o.test_samples;
  if (o.ee_epochs) {
    cfg.ee_train.epochs = *o.ee_epochs;
    cfg.ee_train.anneal_epochs = std::min(cfg.ee_train.anneal_epochs, *o.ee_epochs);
  }
  if (o.ep_epochs) {
    cfg.ep_train.epochs = *o.ep_epochs;
    cfg.ep_train.anneal_epochs = std::min(cfg.ep_train.anneal_epochs, *o.ep_epochs);
  }
  cfg.validate();
  return cfg;
}

std::filesystem::path or_default(const std::string& given, const ExperimentConfig& cfg, const char* name) {
  return given.empty() ? cfg.output_dir / name : std::filesystem::path(given);
}

// Writes to `path` when given, else to stdout.
void emit(std::ostream& out, const std::string& path, const std::string& text) {
  if (path.empty()) {
    out << text;
  } else {
    atomic_write(path, text);
  }
}

std::string loss_curve_csv(const std::vector<double>& curve) {
  std::string s = "epoch,loss\n";
  for (std::size_t e = 0; e < curve.size(); ++e) s += std::to_string(e + 1) + "," + format_real(curve[e]) + "\n";
  return s;
}

std::vector<double> gamma_or_zeros(const std::vector<double>& gamma, int exits) {
  return gamma.empty() ? std::vector<double>(static_cast<std::size_t>(exits - 1), 0.0) : gamma;
}

std::optional<engine::PredictorScores> scores_for(const std::string& predictor_path, const TraceSet& set) {
  if (predictor_path.empty()) return std::nullopt;
  return predictor::predict_scores(predictor::load_predictor(predictor_path), set);
}

engine::PolicyEvaluator evaluator_for(const TraceSet& set, const std::optional<engine::PredictorScores>& scores) {
  return scores ? engine::PolicyEvaluator(set, *scores) : engine::PolicyEvaluator(set);
}

// Split used for gamma selection: the holdout tail, or the whole file for "test".
TraceSet selection_split(const ExperimentConfig& cfg, const TraceSet& set) {
  return cfg.select_on == "test" ? set : pipeline::split_holdout(set, cfg.holdout_fraction).second;
}

void error_record(std::ostream& err, const std::string& kind, const std::string& message,
                  const std::optional<json>& extra = std::nullopt) {
  json rec{{"error", kind}, {"message", message}};
  if (extra) rec["closest"] = *extra;
  err << rec.dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"exitsim: early-exit co-inference simulator and policy optimizer", "exitsim"};
  app.require_subcommand(1);
  Overrides o;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic train/test datasets, or the golden trace set");
  bool golden = false;
  std::string train_out, test_out, golden_out;
  gen->add_flag("--golden", golden, "Write the 6662/1981/1357 golden trace set instead");
  gen->add_option("--train-out", train_out, "Training dataset path");
  gen->add_option("--test-out", test_out, "Test dataset path");
  gen->add_option("--out", golden_out, "Golden trace path (with --golden)");

  auto* train_ee = app.add_subcommand("train-ee", "Train the toy early-exit network");
  std::string data_path, net_out, loss_out;
  train_ee->add_option("--data", data_path, "Training dataset");
  train_ee->add_option("--out", net_out, "Network checkpoint path");
  train_ee->add_option("--loss-out", loss_out, "Per-epoch loss CSV path");

  auto* emit_cmd = app.add_subcommand("emit-traces", "Record per-exit confidences of a dataset");
  std::string net_path, trace_out;
  std::int64_t first_id = 0;
  emit_cmd->add_option("--net", net_path, "Network checkpoint")->required();
  emit_cmd->add_option("--data", data_path, "Dataset")->required();
  emit_cmd->add_option("--out", trace_out, "Trace path")->required();
  emit_cmd->add_option("--first-id", first_id, "Id of the first sample");

  auto* train_ep = app.add_subcommand("train-ep", "Train the Exit Predictor on traces with features");
  std::string trace_path, predictor_out;
  train_ep->add_option("--trace", trace_path, "Trace set")->required();
  train_ep->add_option("--out", predictor_out, "Predictor checkpoint path");
  train_ep->add_option("--loss-out", loss_out, "Per-epoch loss CSV path");

  auto* select = app.add_subcommand("select-gamma", "Choose gamma by the additional-last-exit rule");
  std::string predictor_path, gamma_out;
  select->add_option("--trace", trace_path, "Trace set")->required();
  select->add_option("--predictor", predictor_path, "Predictor checkpoint")->required();
  select->add_option("--out", gamma_out, "Write the selection as JSON");

  auto* evaluate = app.add_subcommand("evaluate", "Evaluate exit policies on a trace set");
  std::vector<double> gamma;
  std::string policy = "auto", report_out;
  evaluate->add_option("--trace", trace_path, "Trace set")->required();
  evaluate->add_option("--predictor", predictor_path, "Predictor checkpoint");
  evaluate->add_option("--gamma", gamma, "Prediction thresholds, comma separated")->delimiter(',');
  evaluate->add_option("--policy", policy, "plain | predictor | oracle | all | auto")
      ->check(CLI::IsMember({"plain", "predictor", "oracle", "all", "auto"}));
  evaluate->add_option("--out", report_out, "Report CSV path");

  auto* optimize = app.add_subcommand("optimize", "Grid-search thresholds for one bandwidth");
  std::string frontier_out;
  optimize->add_option("--trace", trace_path, "Trace set")->required();
  optimize->add_option("--predictor", predictor_path, "Predictor checkpoint");
  optimize->add_option("--out", report_out, "Best point CSV path");
  optimize->add_option("--frontier-out", frontier_out, "Every evaluated point, CSV");

  auto* sweep = app.add_subcommand("sweep", "Grid-search thresholds across bandwidths");
  sweep->add_option("--trace", trace_path, "Trace set")->required();
  sweep->add_option("--predictor", predictor_path, "Predictor checkpoint");
  sweep->add_option("--out", report_out, "Policy table path");

  auto* fit = app.add_subcommand("fit-adapt", "Fit threshold regressors and adapt to bandwidths");
  std::string policy_path, bundle_out, bundle_path;
  std::vector<double> queries;
  fit->add_option("--policy", policy_path, "Policy table to fit");
  fit->add_option("--regressors", bundle_path, "Existing regressor bundle (skips fitting)");
  fit->add_option("--out", bundle_out, "Regressor bundle path");
  fit->add_option("--query", queries, "Bandwidths to adapt to (bit/s), comma separated")->delimiter(',');
  fit->add_option("--trace", trace_path, "Re-evaluate adapted thresholds on this trace set");
  fit->add_option("--predictor", predictor_path, "Predictor checkpoint for re-evaluation");
  fit->add_option("--adapt-out", report_out, "Adapted policy table path");

  auto* demo = app.add_subcommand("demo", "Run the whole toy pipeline end to end");

  auto* validate = app.add_subcommand("validate", "Check that artifacts load and satisfy their invariants");
  std::vector<std::string> files;
  validate->add_option("files", files, "Artifact paths")->required();

  for (auto* sub : app.get_subcommands({})) add_overrides(*sub, o);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  try {
    const ExperimentConfig cfg = resolve(o);
    const auto& env = cfg.environment;

    if (gen->parsed()) {
      if (golden) {
        const auto path = or_default(golden_out, cfg, "golden_traces.jsonl");
        save_trace_set(pipeline::golden_trace_set(), path);
        out << path.string() << "\n";
        return kOk;
      }
      const auto data = pipeline::generate_data(cfg);
      const auto tp = or_default(train_out, cfg, "data_train.jsonl");
      const auto sp = or_default(test_out, cfg, "data_test.jsonl");
      zoo::save_dataset(data.train, tp);
      zoo::save_dataset(data.test, sp);
      out << tp.string() << "\n" << sp.string() << "\n";
      return kOk;
    }
    if (train_ee->parsed()) {
      const auto data = zoo::load_dataset(or_default(data_path, cfg, "data_train.jsonl"));
      const auto result = pipeline::train_early_exit(cfg, data);
      const auto path = or_default(net_out, cfg, "ee_net.json");
      zoo::save_toy_net(result.net, path);
      if (!loss_out.empty()) atomic_write(loss_out, loss_curve_csv(result.loss_curve));
      out << path.string() << "\n";
      return kOk;
    }
    if (emit_cmd->parsed()) {
      const auto net = zoo::load_toy_net(net_path);
      const auto set = pipeline::emit(cfg, net, zoo::load_dataset(data_path), first_id);
      save_trace_set(set, trace_out);
      out << trace_out << "\n";
      return kOk;
    }
    if (train_ep->parsed()) {
      const auto set = load_trace_set(trace_path);
      // With holdout selection the tail of the file is kept away from training.
      const TraceSet fit_set =
          cfg.select_on == "holdout" ? pipeline::split_holdout(set, cfg.holdout_fraction).first : set;
      const auto result = pipeline::train_exit_predictor(cfg, fit_set, cfg.lambda);
      const auto path = or_default(predictor_out, cfg, "predictor.json");
      predictor::save_predictor(result.predictor, path);
      if (!loss_out.empty()) atomic_write(loss_out, loss_curve_csv(result.loss_curve));
      out << path.string() << "\n";
      return kOk;
    }
    if (select->parsed()) {
      const auto set = selection_split(cfg, load_trace_set(trace_path));
      const auto ep = predictor::load_predictor(predictor_path);
      const auto sel = predictor::select_gamma(set, predictor::predict_scores(ep, set), cfg.lambda, cfg.gamma_step,
                                               cfg.gamma_budget);
      const json rec{{"lambda", cfg.lambda},
                     {"gamma", sel.gamma},
                     {"select_on", cfg.select_on},
                     {"grid_step", cfg.gamma_step},
                     {"budget_fraction", cfg.gamma_budget},
                     {"plain_last_exit_share", sel.plain_last_exit_share},
                     {"extra_last_exit_share", sel.extra_last_exit_share}};
      if (!gamma_out.empty()) atomic_write(gamma_out, rec.dump(1) + "\n");
      out << join_reals(sel.gamma) << "\n";
      return kOk;
    }
    if (evaluate->parsed()) {
      const auto set = load_trace_set(trace_path);
      const auto scores = scores_for(predictor_path, set);
      const auto ev = evaluator_for(set, scores);
      const auto plain_th = Thresholds::plain(cfg.lambda);
      std::string csv = engine::report_csv_header(set.num_exits()) + "\n";
      const bool all = policy == "all" || policy == "auto";
      if (policy == "all" || policy == "predictor") {
        if (!scores) throw MissingDataError("the predictor policy needs --predictor");
      }
      if (all || policy == "plain") {
        csv += engine::report_csv_row("plain", plain_th, ev.evaluate(engine::Policy::plain, plain_th, env)) + "\n";
      }
      if ((all && scores) || policy == "predictor") {
        const Thresholds th{cfg.lambda, gamma_or_zeros(gamma, set.num_exits())};
        csv += engine::report_csv_row("predictor", th, ev.evaluate(engine::Policy::predictor, th, env)) + "\n";
      }
      if (all || policy == "oracle") {
        csv += engine::report_csv_row("oracle", plain_th, ev.evaluate(engine::Policy::oracle, plain_th, env)) + "\n";
      }
      emit(out, report_out, csv);
      return kOk;
    }
    if (optimize->parsed()) {
      const auto set = load_trace_set(trace_path);
      const auto ev = evaluator_for(set, scores_for(predictor_path, set));
      const auto grid =
          optimizer::ThresholdGrid::uniform(set.num_exits() - 1, cfg.optimizer_lambdas, cfg.optimizer_gammas);
      const auto result = optimizer::grid_search(ev, env, grid);
      if (!frontier_out.empty()) atomic_write(frontier_out, optimizer::policy_csv(result.frontier));
      emit(out, report_out, optimizer::policy_csv({optimizer::center_in_decision_cell(ev, result.best)}));
      return kOk;
    }
    if (sweep->parsed()) {
      const auto set = load_trace_set(trace_path);
      const auto ev = evaluator_for(set, scores_for(predictor_path, set));
      const auto grid =
          optimizer::ThresholdGrid::uniform(set.num_exits() - 1, cfg.optimizer_lambdas, cfg.optimizer_gammas);
      emit(out, report_out, optimizer::policy_csv(pipeline::centered_sweep(ev, env, cfg.bandwidths, grid)));
      return kOk;
    }
    if (fit->parsed()) {
      optimizer::RegressorBundle bundle;
      if (!bundle_path.empty()) {
        bundle = optimizer::load_bundle(bundle_path);
      } else {
        if (policy_path.empty()) throw MissingDataError("fit-adapt needs --policy or --regressors");
        bundle = pipeline::fit_adaptation(cfg, optimizer::parse_policy_csv(read_text(policy_path)));
        const auto path = or_default(bundle_out, cfg, "regressors.json");
        optimizer::save_bundle(bundle, path);
      }
      const auto& bws = queries.empty() ? cfg.bandwidths : queries;
      if (!trace_path.empty()) {
        const auto set = load_trace_set(trace_path);
        const auto ev = evaluator_for(set, scores_for(predictor_path, set));
        emit(out, report_out, optimizer::policy_csv(pipeline::evaluate_adapted(ev, env, bundle, bws)));
      } else {
        const auto early = bundle.regressors.empty() ? 0 : bundle.regressors.front().lambda_net.output_dim();
        out << "bandwidth";
        for (Eigen::Index n = 1; n <= early; ++n) out << ",lambda_" << n;
        for (Eigen::Index n = 1; n <= early; ++n) out << ",gamma_" << n;
        out << "\n";
        for (double bw : bws) {
          const auto th = optimizer::adapt(bundle, bw);
          out << format_real(bw) << "," << join_reals(th.lambda) << "," << join_reals(th.gamma) << "\n";
        }
      }
      return kOk;
    }
    if (demo->parsed()) {
      const auto s = pipeline::run_demo(cfg);
      out << "plain      accuracy " << format_real(s.plain.accuracy) << "  on-device MFLOPs "
          << format_real(s.plain.mean_on_device_mflops) << "\n";
      out << "predictor  accuracy " << format_real(s.predictor.accuracy) << "  on-device MFLOPs "
          << format_real(s.predictor.mean_on_device_mflops) << "  gamma " << join_reals(s.gamma) << "\n";
      out << "oracle     accuracy " << format_real(s.oracle.accuracy) << "  on-device MFLOPs "
          << format_real(s.oracle.mean_on_device_mflops) << "\n";
      out << "artifacts in " << cfg.output_dir.string() << ":";
      for (const auto& a : s.artifacts) out << " " << a;
      out << "\n";
      return kOk;
    }
    if (validate->parsed()) {
      int status = kOk;
      for (const auto& f : files) {
        try {
          out << pipeline::validate_artifact(f) << "\n";
        } catch (const Error& e) {
          error_record(err, e.kind(), f + ": " + e.what());
          status = kRuntime;
        }
      }
      return status;
    }
  } catch (const optimizer::InfeasibleError& e) {
    const auto& p = e.closest();
    error_record(err, e.kind(), e.what(),
                 json{{"bandwidth", p.bandwidth}, {"lambda", p.lambda}, {"gamma", p.gamma},
                      {"accuracy", p.accuracy}, {"latency", p.mean_latency_s}});
    return kRuntime;
  } catch (const Error& e) {
    error_record(err, e.kind(), e.what());
    return kRuntime;
  } catch (const std::exception& e) {
    error_record(err, "runtime", e.what());
    return kRuntime;
  }
  return kUsage;
}

}  // namespace exitsim::cli
