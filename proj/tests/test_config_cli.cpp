#include "doctest.h"

#include "trgrpo/cli.hpp"
#include "trgrpo/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace trgrpo;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("trgrpo_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

const std::vector<std::string> kTiny{"--set", "total_steps=3",    "--set", "prompts_per_step=2", "--set",
                                     "group_size=4", "--set", "hidden_width=8", "--set", "checkpoint_every=0"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

}  // namespace

TEST_CASE("empty config gives the defaults") {
  const TrainConfig cfg = parse_config_text("");
  const TrainConfig def;
  CHECK(config_to_text(cfg) == config_to_text(def));
  CHECK(parse_config_text("# only a comment\n\n").group_size == 8);
}

TEST_CASE("config parsing and precedence") {
  const TrainConfig cfg = parse_config_text("alpha = 3.5\nseed=9 # trailing comment\nalgorithm = grpo\n", {"seed=11"});
  CHECK(cfg.weights.alpha == 3.5);
  CHECK(cfg.seed == 11);
  CHECK(cfg.algorithm == Algorithm::Grpo);
  const TrainConfig round = parse_config_text(config_to_text(cfg));
  CHECK(config_to_text(round) == config_to_text(cfg));
}

TEST_CASE("config errors name the key") {
  try {
    parse_config_text("group_size = 4\nepsilon_h = high\n");
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "epsilon_h");
    CHECK(e.line() == 2);
  }
  try {
    parse_config_text("", {"learning_rate=0.1"});
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "learning_rate");
    CHECK(e.line() == 0);
  }
  CHECK_THROWS_AS(parse_config_text("lr = 1\nlr = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("justtext\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("weight_lower = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_config(fs::path("/nonexistent/trgrpo.cfg")), std::exception);
}

TEST_CASE("schema covers every key with a description") {
  const std::string help = config_help();
  for (const auto& k : config_schema()) {
    CHECK_FALSE(k.description.empty());
    CHECK(help.find(k.key) != std::string::npos);
  }
}

TEST_CASE("cli usage errors") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"dance"}).code == kExitUsage);
  CHECK(cli({"train", "--config", "/nonexistent/file.cfg"}).code == kExitUsage);
  const CliRun bad = cli({"train", "--set", "epsilon_h=high", "-o", scratch("bad").string()});
  CHECK(bad.code == kExitUsage);
  CHECK(bad.err.find("epsilon_h") != std::string::npos);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("cli weight-curve") {
  const fs::path d = scratch("curve");
  const CliRun r = cli({"weight-curve", "--points", "50", "--set", "weight_mode=verbatim", "-o", d.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.err.find("warning") != std::string::npos);
  std::ifstream in(d / "weight_curve.csv");
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(line.substr(line.find(',') + 1) == "1");
  }
  CHECK(rows == 50);
  const CliRun scaled = cli({"weight-curve", "--points", "10", "-o", d.string()});
  CHECK(scaled.err.empty());
  fs::remove_all(d);
}

TEST_CASE("cli verify-theory quick") {
  const fs::path d = scratch("theory");
  const CliRun r = cli({"verify-theory", "--quick", "-o", d.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("all checks pass") != std::string::npos);
  CHECK(fs::exists(d / "theory_report.csv"));
  CHECK(fs::exists(d / "theory_summary.txt"));
  fs::remove_all(d);
}

TEST_CASE("cli train, token-stats and compare") {
  const fs::path d = scratch("train");
  const CliRun r = cli(with({"train", "-v", "--seed", "4", "--set", "dump_rollouts=true", "-o", d.string()}, kTiny));
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("final mean reward") != std::string::npos);
  CHECK_FALSE(r.err.empty());
  CHECK(fs::exists(d / "metrics.csv"));
  CHECK(parse_config(d / "config.txt").seed == 4);

  const CliRun stats = cli({"token-stats", "--min-occurrences", "1", "--top-k", "3", "-o", d.string()});
  CHECK(stats.code == kExitOk);
  CHECK(fs::exists(d / "token_stats_low.csv"));
  CHECK(fs::exists(d / "token_stats_high.csv"));
  const CliRun none = cli({"token-stats", "--min-occurrences", "100000000", "-o", d.string()});
  CHECK(none.code == kExitOk);
  CHECK(none.out.find("notice") != std::string::npos);
  CHECK(cli({"token-stats", "--dump", (d / "missing.jsonl").string(), "-o", d.string()}).code == kExitRuntime);
  fs::remove_all(d);

  const fs::path c = scratch("compare");
  const CliRun cmp = cli(with({"compare", "--seeds", "2", "-o", c.string()}, kTiny));
  CHECK(cmp.code == kExitOk);
  CHECK(cmp.out.find("of 2 seeds") != std::string::npos);
  CHECK(fs::exists(c / "compare_summary.csv"));
  CHECK(fs::exists(c / "seed_1" / "grpo" / "metrics.csv"));
  CHECK(fs::exists(c / "seed_2" / "tr_grpo" / "metrics.csv"));
  fs::remove_all(c);
}

TEST_CASE("cli ablate") {
  const fs::path d = scratch("ablate");
  const CliRun r = cli(with({"ablate", "-o", d.string()}, kTiny));
  CHECK(r.code == kExitOk);
  CHECK(fs::exists(d / "ablation_summary.csv"));
  int runs = 0;
  for (const char* s : {"equal", "random", "reverse", "tr"}) runs += fs::exists(d / s / "metrics.csv");
  CHECK(runs == 4);
  fs::remove_all(d);
}
