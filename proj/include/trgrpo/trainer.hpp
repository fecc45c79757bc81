#pragma once

#include "trgrpo/envs.hpp"
#include "trgrpo/grpo.hpp"
#include "trgrpo/policy.hpp"
#include "trgrpo/token_regulation.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace trgrpo {

enum class Algorithm { Grpo, TrGrpo };
enum class RewardKind { Binary, Composite };

const char* algorithm_name(Algorithm a);
Algorithm parse_algorithm(const std::string& name);
const char* reward_kind_name(RewardKind r);
RewardKind parse_reward_kind(const std::string& name);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct TrainConfig {
  Algorithm algorithm = Algorithm::TrGrpo;
  WeightConfig weights;
  SurrogateConfig surrogate;
  int group_size = 8;
  double temperature = 1.0;
  int max_length = 16;
  AdamConfig adam;
  int prompts_per_step = 4;
  int total_steps = 200;
  std::uint64_t seed = 1;

  Task task = Task::Brackets;
  int difficulty_min = 1;
  int difficulty_max = 3;
  int bracket_types = 2;
  PolicyShape policy;  // vocab_size is taken from the task
  double init_scale = 0.08;
  RewardKind reward = RewardKind::Binary;

  double rho = 0.05;
  int checkpoint_every = 20;        // 0 disables periodic checkpoints
  int updates_per_collection = 1;   // gradient updates per sampled batch
  bool wall_clock = false;          // write measured wall_ms into the metrics CSV
  int threads = 1;                  // rollout collection workers
  bool dump_rollouts = false;

  void validate() const;
};

struct StepMetrics {
  long step = 0;
  double mean_reward = 0.0;
  double grad_norm = 0.0;
  double sharpness = 0.0;
  double weight_mean = 1.0;
  double weight_min = 1.0;
  double weight_max = 1.0;
  double clip_fraction = 0.0;
  double kl_mean = 0.0;
  double entropy_mean = 0.0;
  double wall_ms = 0.0;
  double loss = 0.0;  // not part of the CSV
};

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

class TrainingAbort : public std::runtime_error {
 public:
  TrainingAbort(long step, const std::string& what, std::string dump)
      : std::runtime_error(what), step_(step), dump_(std::move(dump)) {}
  long step() const { return step_; }
  const std::string& dump() const { return dump_; }  // JSONL of the offending batches

 private:
  long step_;
  std::string dump_;
};

/// Prompts of one step; prompt p uses Rng::stream(seed, {step, p, 0}).
std::vector<Prompt> step_prompts(const Environment& env, const TrainConfig& cfg, long step);

/// G rollouts per prompt sampled from `old_snapshot`, with old and ref log-probs
/// recorded and group advantages computed. Prompt p samples from
/// Rng::stream(seed, {step, p, 1}).
std::vector<GroupBatch> collect_rollouts(const PolicySnapshot& old_snapshot, const PolicySnapshot& ref_snapshot,
                                         const std::vector<Prompt>& prompts, const Environment& env,
                                         const TrainConfig& cfg, long step);

struct AdamState {
  Vector m;
  Vector v;
  long t = 0;
};

void adam_update(PolicyParams& params, const Vector& grad, AdamState& state, const AdamConfig& cfg);

// Per-token weights the step applies, stacked over batches in rollout order.
std::vector<double> step_weights(const PolicyParams& params, const std::vector<GroupBatch>& batches,
                                 const TrainConfig& cfg, long step);

struct LossEvaluation {
  double loss = 0.0;
  Gradients gradients;
  Vector flat_gradient;
};

/// Mean over groups of the per-group token-mean loss and its gradient.
LossEvaluation step_loss(const PolicyParams& params, const std::vector<GroupBatch>& batches,
                         const std::vector<double>& weights, const TrainConfig& cfg);

/// One optimizer update on `batches`. The gradient norm is measured before the
/// update over all parameters.
StepMetrics train_step(PolicyParams& params, AdamState& adam, const std::vector<GroupBatch>& batches,
                       const TrainConfig& cfg, long step);

// Owns the loop state: current parameters, the frozen reference, optimizer.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  StepMetrics step();
  long steps_done() const { return step_; }
  const PolicyParams& params() const { return params_; }
  const TrainConfig& config() const { return cfg_; }
  const Environment& environment() const { return *env_; }
  const std::vector<GroupBatch>& last_batches() const { return last_batches_; }
  const std::vector<double>& last_weights() const { return last_weights_; }

 private:
  TrainConfig cfg_;
  std::unique_ptr<Environment> env_;
  PolicyParams params_;
  PolicySnapshot ref_;
  AdamState adam_;
  long step_ = 0;
  std::vector<GroupBatch> last_batches_;
  std::vector<double> last_weights_;
};

PolicyShape policy_shape(const TrainConfig& cfg);

struct ExperimentResult {
  std::vector<StepMetrics> metrics;
  PolicyParams final_params;
  std::filesystem::path metrics_csv;
  std::filesystem::path final_checkpoint;
};

/// Runs cfg.total_steps steps, writing metrics.csv, timing.csv, checkpoints/
/// and (optionally) rollouts.jsonl under `out_dir`.
ExperimentResult run_experiment(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                                std::ostream* log = nullptr);

/// Mean of the last `window` values of mean_reward (fewer if the run is shorter).
double trailing_mean_reward(const std::vector<StepMetrics>& metrics, std::size_t window = 20);
double grad_norm_std(const std::vector<StepMetrics>& metrics);

struct TokenStat {
  int token = 0;
  long occurrences = 0;
  double mean_probability = 0.0;
};

struct TokenRanking {
  std::vector<TokenStat> ascending;   // lowest mean probability first
  std::vector<TokenStat> descending;  // highest mean probability first
  std::string notice;                 // set when the occurrence filter leaves nothing
};

class TokenStatsAccumulator {
 public:
  void add(int token, double pi);
  /// Reads one rollout-dump JSONL line.
  void add_dump_line(const std::string& line);
  bool empty() const { return stats_.empty(); }
  TokenRanking rank(long min_occurrences, std::size_t top_k) const;

 private:
  std::map<int, std::pair<long, double>> stats_;  // token -> (count, sum of pi)
};

/// Ranks tokens of a rollout-dump stream by mean probability.
TokenRanking token_probability_stats(std::istream& dumps, long min_occurrences, std::size_t top_k = 100);

std::string token_ranking_csv(const std::vector<TokenStat>& stats, const Vocabulary* vocab = nullptr);

}  // namespace trgrpo
