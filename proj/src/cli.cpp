#include "trgrpo/cli.hpp"

#include "trgrpo/config.hpp"
#include "trgrpo/theory.hpp"
#include "trgrpo/trainer.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace trgrpo {

std::filesystem::path default_output_root() {
  const char* env = std::getenv("TRGRPO_OUT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

namespace {

TrainConfig load_config(const RunSpec& spec) {
  std::vector<std::string> overrides = spec.overrides;
  if (spec.seed_override) overrides.push_back("seed=" + std::to_string(spec.seed));
  if (spec.config.empty()) return parse_config_text("", overrides);
  return parse_config(spec.config, overrides);
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + dir.string() + "': " + ec.message());
}

ExperimentResult run_one(const TrainConfig& cfg, const std::filesystem::path& dir, const RunSpec& spec,
                         std::ostream& err) {
  make_dir(dir);
  write_file(dir / "config.txt", config_to_text(cfg));
  return run_experiment(cfg, dir, spec.verbosity > 0 ? &err : nullptr);
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

int cmd_train(const RunSpec& spec, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = load_config(spec);
  const std::string warn = cfg.algorithm == Algorithm::TrGrpo ? saturation_warning(cfg.weights) : "";
  if (!warn.empty()) err << warn << "\n";
  const ExperimentResult r = run_one(cfg, spec.out_dir, spec, err);
  out << "train " << algorithm_name(cfg.algorithm) << ": " << r.metrics.size() << " steps, final mean reward "
      << num(trailing_mean_reward(r.metrics)) << "\n"
      << "metrics: " << r.metrics_csv.string() << "\ncheckpoint: " << r.final_checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_compare(const RunSpec& spec, std::ostream& out, std::ostream& err) {
  const TrainConfig base = load_config(spec);
  if (spec.seeds < 1) throw ConfigError("--seeds", 0, "must be at least 1");
  make_dir(spec.out_dir);
  std::ostringstream csv;
  csv << "seed,grpo_final_reward,tr_grpo_final_reward,delta_reward,grpo_grad_norm_std,tr_grpo_grad_norm_std,"
         "tr_std_le_grpo\n";
  int calmer = 0;
  out << "seed  grpo_reward  tr_grpo_reward  delta      grpo_gn_std  tr_gn_std\n";
  for (int s = 0; s < spec.seeds; ++s) {
    TrainConfig cfg = base;
    cfg.seed = base.seed + static_cast<std::uint64_t>(s);
    const auto dir = spec.out_dir / ("seed_" + std::to_string(cfg.seed));
    cfg.algorithm = Algorithm::Grpo;
    const auto g = run_one(cfg, dir / "grpo", spec, err);
    cfg.algorithm = Algorithm::TrGrpo;
    const auto t = run_one(cfg, dir / "tr_grpo", spec, err);
    const double rg = trailing_mean_reward(g.metrics), rt = trailing_mean_reward(t.metrics);
    const double sg = grad_norm_std(g.metrics), st = grad_norm_std(t.metrics);
    calmer += st <= sg;
    csv << cfg.seed << "," << num(rg) << "," << num(rt) << "," << num(rt - rg) << "," << num(sg) << "," << num(st)
        << "," << (st <= sg ? 1 : 0) << "\n";
    char line[200];
    std::snprintf(line, sizeof(line), "%-5llu %+.6f    %+.6f       %+.6f  %.6f     %.6f\n",
                  static_cast<unsigned long long>(cfg.seed), rg, rt, rt - rg, sg, st);
    out << line;
  }
  write_file(spec.out_dir / "compare_summary.csv", csv.str());
  out << "grad_norm std: TR-GRPO <= GRPO in " << calmer << " of " << spec.seeds << " seeds\n";
  return kExitOk;
}

int cmd_ablate(const RunSpec& spec, std::ostream& out, std::ostream& err) {
  const TrainConfig base = load_config(spec);
  make_dir(spec.out_dir);
  std::ostringstream csv;
  csv << "scheme,final_reward,grad_norm_mean,grad_norm_std\n";
  for (WeightScheme scheme : {WeightScheme::Equal, WeightScheme::Random, WeightScheme::Reverse, WeightScheme::Tr}) {
    TrainConfig cfg = base;
    cfg.algorithm = Algorithm::TrGrpo;
    cfg.weights.scheme = scheme;
    const auto r = run_one(cfg, spec.out_dir / weight_scheme_name(scheme), spec, err);
    double mean = 0.0;
    for (const auto& m : r.metrics) mean += m.grad_norm;
    mean /= static_cast<double>(r.metrics.size());
    csv << weight_scheme_name(scheme) << "," << num(trailing_mean_reward(r.metrics)) << "," << num(mean) << ","
        << num(grad_norm_std(r.metrics)) << "\n";
    out << weight_scheme_name(scheme) << ": final mean reward " << num(trailing_mean_reward(r.metrics))
        << ", grad_norm std " << num(grad_norm_std(r.metrics)) << "\n";
  }
  write_file(spec.out_dir / "ablation_summary.csv", csv.str());
  return kExitOk;
}

int cmd_weight_curve(const RunSpec& spec, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = load_config(spec);
  make_dir(spec.out_dir);
  const auto path = spec.out_dir / "weight_curve.csv";
  write_file(path, weight_curve_csv(cfg.weights, spec.points));
  const std::string warn = saturation_warning(cfg.weights);
  if (!warn.empty()) err << warn << "\n";
  out << "weight curve (" << weight_mode_name(cfg.weights.mode) << ", " << spec.points
      << " points): " << path.string() << "\n";
  return kExitOk;
}

int cmd_verify_theory(const RunSpec& spec, std::ostream& out, std::ostream&) {
  TheorySuiteOptions opt;
  if (spec.seed_override) opt.seed = spec.seed;
  if (spec.quick) {
    opt.chains = 100;
    opt.distributions = 1000;
    opt.bound_configs = 20;
    opt.jacobian_configs = 5;
  }
  const TheoryReport report = run_theory_suite(opt);
  make_dir(spec.out_dir);
  write_file(spec.out_dir / "theory_report.csv", report.csv());
  write_file(spec.out_dir / "theory_summary.txt", report.summary());
  out << report.summary();
  return report.failures() ? kExitVerification : kExitOk;
}

int cmd_token_stats(const RunSpec& spec, std::ostream& out, std::ostream&) {
  const TrainConfig cfg = load_config(spec);
  const auto dump = spec.dump.empty() ? spec.out_dir / "rollouts.jsonl" : spec.dump;
  std::ifstream is(dump);
  if (!is) throw std::runtime_error("cannot read rollout dump '" + dump.string() + "'");
  const TokenRanking r = token_probability_stats(is, spec.min_occurrences, spec.top_k);
  const auto env = make_environment(cfg.task, cfg.bracket_types);
  make_dir(spec.out_dir);
  write_file(spec.out_dir / "token_stats_low.csv", token_ranking_csv(r.ascending, &env->vocabulary()));
  write_file(spec.out_dir / "token_stats_high.csv", token_ranking_csv(r.descending, &env->vocabulary()));
  if (!r.notice.empty()) out << "notice: " << r.notice << "\n";
  out << "ranked " << r.ascending.size() << " token types from " << dump.string() << "\n";
  return kExitOk;
}

}  // namespace

int dispatch(const RunSpec& spec, std::ostream& out, std::ostream& err) {
  try {
    if (spec.subcommand == "train") return cmd_train(spec, out, err);
    if (spec.subcommand == "compare") return cmd_compare(spec, out, err);
    if (spec.subcommand == "ablate") return cmd_ablate(spec, out, err);
    if (spec.subcommand == "weight-curve") return cmd_weight_curve(spec, out, err);
    if (spec.subcommand == "verify-theory") return cmd_verify_theory(spec, out, err);
    if (spec.subcommand == "token-stats") return cmd_token_stats(spec, out, err);
    err << "unknown subcommand '" << spec.subcommand << "'\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingAbort& e) {
    err << "aborted: " << e.what() << "\n";
    try {
      make_dir(spec.out_dir);
      write_file(spec.out_dir / "abort_dump.jsonl", e.dump());
      err << "offending batch written to " << (spec.out_dir / "abort_dump.jsonl").string() << "\n";
    } catch (const std::exception& w) {
      err << "could not write batch dump: " << w.what() << "\n";
    }
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"GRPO and token-regulated GRPO on toy verifiable tasks"};
  app.require_subcommand(1);
  app.footer(config_help());

  RunSpec spec;
  std::string out_dir;
  std::uint64_t seed = 0;
  auto common = [&](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("-c,--config", spec.config, "flat key = value config file")->check(CLI::ExistingFile);
      sub->add_option("--set", spec.overrides, "override a config key (key=value), repeatable");
    }
    sub->add_option("-o,--out", out_dir, "output directory (default $TRGRPO_OUT or ./runs, plus the subcommand)");
    sub->add_option("--seed", seed, "master seed override");
    sub->add_flag("-v,--verbose", "progress output on stderr");
  };

  auto* train = app.add_subcommand("train", "run one experiment");
  common(train, true);
  auto* compare = app.add_subcommand("compare", "paired GRPO / TR-GRPO runs with shared seeds");
  common(compare, true);
  compare->add_option("--seeds", spec.seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);
  auto* ablate = app.add_subcommand("ablate", "TR-GRPO with the equal, random, reverse and tr weight schemes");
  common(ablate, true);
  auto* curve = app.add_subcommand("weight-curve", "token weight as a function of probability, as CSV");
  common(curve, true);
  curve->add_option("--points", spec.points, "grid points on (0, 1]")->check(CLI::PositiveNumber);
  auto* verify = app.add_subcommand("verify-theory", "numerical check of the gradient-norm bounds");
  common(verify, false);
  verify->add_flag("--quick", spec.quick, "reduced case counts");
  auto* stats = app.add_subcommand("token-stats", "rank token types by mean probability from a rollout dump");
  common(stats, true);
  stats->add_option("--dump", spec.dump, "rollout dump (default <out>/rollouts.jsonl)");
  stats->add_option("--min-occurrences", spec.min_occurrences, "occurrence threshold");
  stats->add_option("--top-k", spec.top_k, "entries per ranking");

  std::vector<const char*> argv{"trgrpo"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (auto* sub : app.get_subcommands()) {
    spec.subcommand = sub->get_name();
    spec.seed_override = sub->count("--seed") > 0;
    spec.verbosity = static_cast<int>(sub->count("--verbose"));
  }
  spec.seed = seed;
  spec.out_dir = out_dir.empty() ? default_output_root() / spec.subcommand : std::filesystem::path(out_dir);
  return dispatch(spec, out, err);
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace trgrpo
