#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace trgrpo {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitVerification = 2, kExitRuntime = 3 };

struct RunSpec {
  std::string subcommand;
  std::filesystem::path config;  // empty: defaults
  std::filesystem::path out_dir;
  bool seed_override = false;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  int verbosity = 0;

  int seeds = 1;                 // compare
  int points = 1000;             // weight-curve
  std::filesystem::path dump;    // token-stats; default <out>/rollouts.jsonl
  long min_occurrences = 1;      // token-stats
  std::size_t top_k = 100;       // token-stats
  bool quick = false;            // verify-theory: reduced case counts
};

/// Default output root: $TRGRPO_OUT if set, else "runs".
std::filesystem::path default_output_root();

int dispatch(const RunSpec& spec, std::ostream& out, std::ostream& err);

/// Parses argv and dispatches; returns the process exit code.
int run_cli(int argc, char** argv);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace trgrpo
