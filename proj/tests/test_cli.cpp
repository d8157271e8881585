#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "exitsim/io.hpp"
#include "exitsim/pipeline.hpp"
#include "support.hpp"

namespace exitsim {
namespace {

struct Outcome {
  int status;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int status = cli::run(args, out, err);
  return {status, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> v;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) v.push_back(l);
  return v;
}

std::string golden_path() {
  static const auto path = [] {
    const auto dir = testing::scratch_dir("cli-golden");
    save_trace_set(pipeline::golden_trace_set(), dir / "golden.jsonl");
    return (dir / "golden.jsonl").string();
  }();
  return path;
}

TEST(Cli, UnknownFlagIsAUsageError) {
  const auto r = run({"evaluate", "--trace", golden_path(), "--bogus"});
  EXPECT_EQ(r.status, cli::kUsage);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_NE(r.err.find("--policy"), std::string::npos) << r.err;
  EXPECT_EQ(run({}).status, cli::kUsage);
}

TEST(Cli, EvaluateGoldenTrace) {
  const auto r = run({"evaluate", "--trace", golden_path(), "--lambda", "0.95,0.85", "--policy", "plain"});
  ASSERT_EQ(r.status, cli::kOk) << r.err;
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].rfind("plain,0.95,0.85,0,0,1,42.439898,0,79.639339,0.1357,0.6662,0.1981,0.1357,", 0), 0u) << rows[1];
  const auto oracle = run({"evaluate", "--trace", golden_path(), "--lambda", "0.9,0.9", "--policy", "oracle"});
  EXPECT_NE(oracle.out.find("oracle,0.9,0.9,0,0,1,34.934427,0,72.133868"), std::string::npos) << oracle.out;
}

TEST(Cli, InfeasibleOptimizeEmitsJsonRecord) {
  const auto r = run({"optimize", "--trace", golden_path(), "--budget", "0.000001"});
  EXPECT_EQ(r.status, cli::kRuntime);
  const auto rows = lines(r.err);
  ASSERT_EQ(rows.size(), 1u);
  const auto j = nlohmann::json::parse(rows[0]);
  EXPECT_EQ(j.at("error"), "infeasible");
  EXPECT_TRUE(j.at("closest").contains("latency"));
  EXPECT_TRUE(r.out.empty());
}

TEST(Cli, MissingFileIsARuntimeError) {
  const auto r = run({"evaluate", "--trace", "/nonexistent/exitsim.jsonl", "--policy", "plain"});
  EXPECT_EQ(r.status, cli::kRuntime);
  EXPECT_EQ(nlohmann::json::parse(lines(r.err).at(0)).at("error"), "io");
}

TEST(Cli, ConfigFromEnvironmentAndFlagsOverrideIt) {
  auto cfg = pipeline::ExperimentConfig{};
  cfg.lambda = {0.95, 0.85};
  cfg.environment.bandwidth = 2e6;
  const auto dir = testing::scratch_dir("cli-config");
  atomic_write(dir / "cfg.json", pipeline::to_json(cfg).dump(2));
  ::setenv("EXITSIM_CONFIG", (dir / "cfg.json").c_str(), 1);
  const auto from_env = run({"evaluate", "--trace", golden_path(), "--policy", "plain"});
  const auto flagged = run({"evaluate", "--trace", golden_path(), "--policy", "plain", "--bandwidth", "1e6"});
  ::unsetenv("EXITSIM_CONFIG");
  ASSERT_EQ(from_env.status, cli::kOk) << from_env.err;
  // 42.439898 MFLOPs at 3.62 GFLOP/s plus 13.57% of 16384 bits.
  const double compute = 42.439898e6 / 3.62e9;
  EXPECT_NE(from_env.out.find(format_real(compute + 0.1357 * 16384 / 2e6)), std::string::npos) << from_env.out;
  EXPECT_NE(flagged.out.find(format_real(compute + 0.1357 * 16384 / 1e6)), std::string::npos) << flagged.out;

  atomic_write(dir / "bad.json", R"({"lamda": [0.9, 0.9]})");
  const auto bad = run({"evaluate", "--trace", golden_path(), "--config", (dir / "bad.json").string()});
  EXPECT_EQ(bad.status, cli::kRuntime);
  EXPECT_NE(bad.err.find("lamda"), std::string::npos) << bad.err;
}

TEST(Config, JsonRoundTrip) {
  pipeline::ExperimentConfig cfg;
  cfg.seed = 99;
  cfg.lambda = {0.7, 0.8};
  cfg.bandwidths = {1e6, 2e6};
  cfg.synth.modes_per_class = 3;
  pipeline::ExperimentConfig back;
  pipeline::apply_json(back, pipeline::to_json(cfg));
  EXPECT_EQ(pipeline::to_json(back), pipeline::to_json(cfg));
  EXPECT_THROW(pipeline::apply_json(back, nlohmann::json{{"synth", {{"bogus", 1}}}}), Error);
}

TEST(Frontier, RowsAreSortedByOnDeviceCost) {
  const auto set = pipeline::golden_trace_set();
  const engine::PolicyEvaluator ev(set);
  std::vector<pipeline::FrontierRow> rows;
  for (double l : {0.99, 0.6, 0.9}) {
    const auto th = Thresholds::plain({l, l});
    rows.push_back({"plain", th, ev.evaluate(engine::Policy::plain, th)});
    rows.push_back({"oracle", th, ev.evaluate(engine::Policy::oracle, th)});
  }
  const auto csv = lines(pipeline::emit_frontier(rows, 3));
  ASSERT_EQ(csv.size(), 7u);
  EXPECT_EQ(csv[0], engine::report_csv_header(3));
  double previous = -1.0;
  for (std::size_t i = 1; i < csv.size(); ++i) {
    std::vector<std::string> cells;
    std::istringstream in(csv[i]);
    for (std::string c; std::getline(in, c, ',');) cells.push_back(c);
    const double cost = std::stod(cells.at(6));
    EXPECT_GE(cost, previous);
    previous = cost;
  }
  const auto single = lines(pipeline::emit_frontier({rows[0]}, 3));
  EXPECT_EQ(single.size(), 2u);
}

TEST(Cli, DemoArtifactsValidate) {
  const auto dir = testing::scratch_dir("cli-demo");
  const auto r = run({"demo", "--out-dir", dir.string(), "--train-samples", "400", "--test-samples", "200",
                      "--ee-epochs", "10", "--ep-epochs", "10"});
  ASSERT_EQ(r.status, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("predictor"), std::string::npos);
  std::vector<std::string> args{"validate"};
  for (const auto& entry : std::filesystem::directory_iterator(dir)) args.push_back(entry.path().string());
  ASSERT_GE(args.size(), 15u);
  const auto v = run(args);
  EXPECT_EQ(v.status, cli::kOk) << v.err;
  EXPECT_EQ(lines(v.out).size(), args.size() - 1);

  atomic_write(dir / "broken.jsonl", "{\"N\":3}\n");
  EXPECT_EQ(run({"validate", (dir / "broken.jsonl").string()}).status, cli::kRuntime);
}

TEST(Cli, StagesChainThroughFiles) {
  const auto dir = testing::scratch_dir("cli-stages").string();
  const std::vector<std::string> common{"--out-dir", dir, "--train-samples", "300", "--test-samples", "200",
                                        "--ee-epochs", "5", "--ep-epochs", "5"};
  auto with = [&](std::vector<std::string> args) {
    args.insert(args.end(), common.begin(), common.end());
    return run(args);
  };
  ASSERT_EQ(with({"gen-data"}).status, cli::kOk);
  ASSERT_EQ(with({"train-ee"}).status, cli::kOk);
  ASSERT_EQ(with({"emit-traces", "--net", dir + "/ee_net.json", "--data", dir + "/data_train.jsonl", "--out",
                  dir + "/train.jsonl"}).status,
            cli::kOk);
  const auto ep = with({"train-ep", "--trace", dir + "/train.jsonl"});
  ASSERT_EQ(ep.status, cli::kOk) << ep.err;
  const auto g = with({"select-gamma", "--trace", dir + "/train.jsonl", "--predictor", dir + "/predictor.json"});
  ASSERT_EQ(g.status, cli::kOk) << g.err;
  const auto sweep = with({"sweep", "--trace", dir + "/train.jsonl", "--predictor", dir + "/predictor.json", "--out",
                           dir + "/policy.csv"});
  ASSERT_EQ(sweep.status, cli::kOk) << sweep.err;
  const auto fit = with({"fit-adapt", "--policy", dir + "/policy.csv", "--query", "2e6,20e6"});
  ASSERT_EQ(fit.status, cli::kOk) << fit.err;
  EXPECT_EQ(lines(fit.out).size(), 3u) << fit.out;
}

}  // namespace
}  // namespace exitsim
