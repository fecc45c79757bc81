#include "trgrpo/trainer.hpp"

#include "trgrpo/theory.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace trgrpo {

const char* algorithm_name(Algorithm a) { return a == Algorithm::Grpo ? "grpo" : "tr_grpo"; }

Algorithm parse_algorithm(const std::string& name) {
  if (name == "grpo") return Algorithm::Grpo;
  if (name == "tr_grpo") return Algorithm::TrGrpo;
  throw std::invalid_argument("unknown algorithm '" + name + "'");
}

const char* reward_kind_name(RewardKind r) { return r == RewardKind::Binary ? "binary" : "composite"; }

RewardKind parse_reward_kind(const std::string& name) {
  if (name == "binary") return RewardKind::Binary;
  if (name == "composite") return RewardKind::Composite;
  throw std::invalid_argument("unknown reward '" + name + "'");
}

void TrainConfig::validate() const {
  weights.validate();
  surrogate.validate();
  if (group_size < 2) throw std::invalid_argument("group_size must be at least 2");
  if (!(temperature >= 0.0)) throw std::invalid_argument("temperature must be non-negative");
  if (max_length < 1) throw std::invalid_argument("max_length must be at least 1");
  if (!(adam.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw std::invalid_argument("adam_beta1 must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw std::invalid_argument("adam_beta2 must be in [0, 1)");
  if (!(adam.eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
  if (!(adam.weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (prompts_per_step < 1) throw std::invalid_argument("prompts_per_step must be at least 1");
  if (total_steps < 1) throw std::invalid_argument("total_steps must be at least 1");
  if (difficulty_min > difficulty_max) throw std::invalid_argument("difficulty_min exceeds difficulty_max");
  if (!(rho >= 0.0)) throw std::invalid_argument("rho must be non-negative");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be non-negative");
  if (updates_per_collection < 1) throw std::invalid_argument("updates_per_collection must be at least 1");
  if (threads < 1) throw std::invalid_argument("threads must be at least 1");
  if (bracket_types < 1 || bracket_types > 4) throw std::invalid_argument("bracket_types must be in [1, 4]");
  const auto env = make_environment(task, bracket_types);
  const auto [lo, hi] = env->difficulty_range();
  if (difficulty_min < lo || difficulty_max > hi)
    throw std::invalid_argument("difficulty range outside [" + std::to_string(lo) + ", " + std::to_string(hi) +
                                "] for task " + task_name(task));
  policy_shape(*this).validate();
}

PolicyShape policy_shape(const TrainConfig& cfg) {
  PolicyShape s = cfg.policy;
  s.vocab_size = make_environment(cfg.task, cfg.bracket_types)->vocabulary().size();
  return s;
}

std::string metrics_csv_header() {
  return "step,mean_reward,grad_norm,sharpness,weight_mean,weight_min,weight_max,clip_fraction,kl_mean,entropy_mean,"
         "wall_ms\n";
}

std::string metrics_csv_row(const StepMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", m.step,
                m.mean_reward, m.grad_norm, m.sharpness, m.weight_mean, m.weight_min, m.weight_max, m.clip_fraction,
                m.kl_mean, m.entropy_mean, m.wall_ms);
  return buf;
}

std::vector<Prompt> step_prompts(const Environment& env, const TrainConfig& cfg, long step) {
  std::vector<Prompt> prompts;
  for (int p = 0; p < cfg.prompts_per_step; ++p) {
    Rng rng = Rng::stream(cfg.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(p), 0});
    const int d = rng.integer(cfg.difficulty_min, cfg.difficulty_max);
    prompts.push_back(env.generate_prompt(d, rng.next()));
  }
  return prompts;
}

namespace {

double rollout_reward(const Environment& env, const Prompt& prompt, std::span<const int> output, RewardKind kind) {
  if (kind == RewardKind::Binary) return env.binary_reward(prompt, output);
  return composite_reward(env.verify(prompt, output)).total();
}

GroupBatch collect_group(const PolicySnapshot& old_snapshot, const PolicySnapshot& ref_snapshot, const Prompt& prompt,
                         const Environment& env, const TrainConfig& cfg, std::uint64_t seed) {
  SamplingOptions opt;
  opt.temperature = cfg.temperature;
  opt.max_length = cfg.max_length;
  const auto samples =
      sample_group(old_snapshot, prompt.tokens, cfg.group_size, opt, env.vocabulary().eos(), seed);
  GroupBatch batch;
  batch.prompt = prompt;
  std::vector<double> rewards;
  for (const auto& s : samples) {
    Rollout r;
    r.tokens = s.tokens;
    r.logp_old = s.log_probs;
    r.logp_ref = sequence_log_probs(ref_snapshot.params(), prompt.tokens, s.tokens);
    r.reward = rollout_reward(env, prompt, s.tokens, cfg.reward);
    rewards.push_back(r.reward);
    batch.rollouts.push_back(std::move(r));
  }
  batch.advantages = group_advantages(rewards, cfg.surrogate.sample_std);
  return batch;
}

// Eigen forward over stacked context windows; returns per-row log-probs.
Matrix batch_log_probs(const PolicyParams& params, const IndexMatrix& contexts) {
  const PolicyShape& s = params.shape;
  Matrix x = Matrix::Zero(contexts.rows(), s.context_window * s.embedding_dim);
  for (Eigen::Index t = 0; t < contexts.rows(); ++t)
    for (int c = 0; c < s.context_window; ++c) {
      const int idx = contexts(t, c);
      if (idx != kPadIndex) x.block(t, c * s.embedding_dim, 1, s.embedding_dim) = params.embedding.row(idx);
    }
  for (int l = 0; l < s.hidden_layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    Matrix a = x * params.weights[li].transpose();
    a.rowwise() += params.biases[li].row(0);
    x = a.array().tanh().matrix();
  }
  Matrix logits = x * params.unembedding.transpose();
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double m = logits.row(t).maxCoeff();
    const double lse = m + std::log((logits.row(t).array() - m).exp().sum());
    logits.row(t).array() -= lse;
  }
  return logits;
}

struct TokenView {
  std::vector<double> logp_theta;
  std::vector<double> entropy;
};

TokenView current_tokens(const PolicyParams& params, const GroupBatch& batch) {
  TokenView v;
  const Matrix lp = batch_log_probs(params, batch.stacked_contexts(params.shape.context_window));
  const auto tokens = batch.stacked_tokens();
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    v.logp_theta.push_back(lp(t, tokens[static_cast<std::size_t>(t)]));
    v.entropy.push_back(-(lp.row(t).array().exp() * lp.row(t).array()).sum());
  }
  return v;
}

std::vector<double> batch_weights(const GroupBatch& batch, const std::vector<double>& logp_theta,
                                  const TrainConfig& cfg, long step, std::size_t prompt_index) {
  if (cfg.algorithm == Algorithm::Grpo) return std::vector<double>(logp_theta.size(), 1.0);
  std::vector<double> w;
  std::size_t k = 0;
  for (std::size_t i = 0; i < batch.rollouts.size(); ++i) {
    const std::size_t n = batch.rollouts[i].tokens.size();
    Rng rng = Rng::stream(cfg.seed, {static_cast<std::uint64_t>(step), prompt_index, 2, i});
    const auto part = scheme_weights(std::span<const double>(logp_theta.data() + k, n), cfg.weights, rng);
    w.insert(w.end(), part.begin(), part.end());
    k += n;
  }
  return w;
}

std::string batches_dump(const std::vector<GroupBatch>& batches, const PolicyParams& params,
                         const std::vector<double>& weights, const TrainConfig& cfg, long step) {
  std::string out;
  std::size_t k = 0;
  for (const auto& b : batches) {
    TokenDiagnostics diag;
    diag.logp_theta = current_tokens(params, b).logp_theta;
    const std::size_t n = b.token_count();
    for (std::size_t t = 0; t < n && k + t < weights.size(); ++t) diag.weights.push_back(weights[k + t]);
    k += n;
    try {
      out += group_batch_jsonl(b, diag, cfg.surrogate, step);
    } catch (const std::exception& e) {
      out += std::string("{\"error\":\"") + e.what() + "\"}";
    }
    out += '\n';
  }
  return out;
}

}  // namespace

std::vector<GroupBatch> collect_rollouts(const PolicySnapshot& old_snapshot, const PolicySnapshot& ref_snapshot,
                                         const std::vector<Prompt>& prompts, const Environment& env,
                                         const TrainConfig& cfg, long step) {
  if (prompts.empty()) throw std::invalid_argument("collect_rollouts: no prompts");
  std::vector<GroupBatch> batches(prompts.size());
  auto work = [&](std::size_t p) {
    const std::uint64_t seed =
        Rng::stream(cfg.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(p), 1}).next();
    batches[p] = collect_group(old_snapshot, ref_snapshot, prompts[p], env, cfg, seed);
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), prompts.size());
  if (workers <= 1) {
    for (std::size_t p = 0; p < prompts.size(); ++p) work(p);
    return batches;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t p = w; p < prompts.size(); p += workers) work(p);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return batches;
}

void adam_update(PolicyParams& params, const Vector& grad, AdamState& state, const AdamConfig& cfg) {
  Vector theta = params.flatten();
  if (grad.size() != theta.size()) throw std::invalid_argument("adam_update: gradient size mismatch");
  if (state.m.size() != theta.size()) {
    state.m = Vector::Zero(theta.size());
    state.v = Vector::Zero(theta.size());
    state.t = 0;
  }
  ++state.t;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const Vector step = (state.m / c1).array() / ((state.v / c2).array().sqrt() + cfg.eps);
  theta -= cfg.lr * step;
  if (cfg.weight_decay > 0.0) theta -= (cfg.lr * cfg.weight_decay) * params.flatten();
  params.assign(theta);
}

std::vector<double> step_weights(const PolicyParams& params, const std::vector<GroupBatch>& batches,
                                 const TrainConfig& cfg, long step) {
  std::vector<double> w;
  for (std::size_t p = 0; p < batches.size(); ++p) {
    const auto part = batch_weights(batches[p], current_tokens(params, batches[p]).logp_theta, cfg, step, p);
    w.insert(w.end(), part.begin(), part.end());
  }
  return w;
}

LossEvaluation step_loss(const PolicyParams& params, const std::vector<GroupBatch>& batches,
                         const std::vector<double>& weights, const TrainConfig& cfg) {
  if (batches.empty()) throw std::invalid_argument("step_loss: no batches");
  GraphBuilder b;
  const PolicyGraph pg = declare_policy(b, params.shape);
  const int window = params.shape.context_window;
  std::vector<Expr> losses;
  std::size_t k = 0;
  for (const auto& batch : batches) {
    batch.validate();
    const PolicyOutputs out = policy_forward(pg, batch.stacked_contexts(window), batch.stacked_tokens());
    const TokenConstants c = batch.constants();
    if (cfg.algorithm == Algorithm::Grpo) {
      losses.push_back(grpo_group_loss(out.token_log_probs, c, cfg.surrogate));
    } else {
      const auto n = static_cast<Eigen::Index>(batch.token_count());
      if (k + static_cast<std::size_t>(n) > weights.size()) throw std::invalid_argument("step_loss: too few weights");
      const Matrix w = Eigen::Map<const Matrix>(weights.data() + k, n, 1);
      losses.push_back(trgrpo_group_loss(out.token_log_probs, c, w, cfg.surrogate));
    }
    k += batch.token_count();
  }
  Expr total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = total + losses[i];
  total = total * (1.0 / static_cast<double>(losses.size()));
  const Graph g = b.build(total);
  const Evaluation ev = g.evaluate(params.bindings());
  LossEvaluation r;
  r.loss = ev.scalar();
  r.gradients = ev.gradient();
  r.flat_gradient = params.flatten(r.gradients);
  return r;
}

StepMetrics train_step(PolicyParams& params, AdamState& adam, const std::vector<GroupBatch>& batches,
                       const TrainConfig& cfg, long step) {
  StepMetrics m;
  m.step = step;
  std::vector<double> weights;
  try {
    for (int u = 0; u < cfg.updates_per_collection; ++u) {
      weights = step_weights(params, batches, cfg, step);
      const LossEvaluation le = step_loss(params, batches, weights, cfg);
      const double norm = le.flat_gradient.norm();
      if (!std::isfinite(le.loss)) throw std::runtime_error("non-finite loss");
      if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient");
      if (u == 0) {
        m.loss = le.loss;
        m.grad_norm = norm;
        m.sharpness = sharpness_surrogate(le.loss, norm, {cfg.rho});
        // Token statistics at the parameters the gradient was taken at.
        double reward_sum = 0.0, kl_sum = 0.0, entropy_sum = 0.0;
        long rollouts = 0, tokens = 0, clipped = 0;
        std::size_t k = 0;
        for (const auto& b : batches) {
          const TokenView view = current_tokens(params, b);
          std::size_t t = 0;
          for (std::size_t i = 0; i < b.rollouts.size(); ++i) {
            const Rollout& r = b.rollouts[i];
            reward_sum += r.reward;
            ++rollouts;
            for (std::size_t j = 0; j < r.tokens.size(); ++j, ++t, ++k) {
              const double w = weights[k];
              const double ratio = std::exp(view.logp_theta[t] - r.logp_old[j]);
              clipped += trust_indicator(ratio, b.advantages[i], cfg.surrogate, w) == 0;
              const double y = w * std::exp(r.logp_ref[j] - view.logp_theta[t]);
              kl_sum += y - std::log(y) - 1.0;
              entropy_sum += view.entropy[t];
              ++tokens;
            }
          }
        }
        m.mean_reward = reward_sum / static_cast<double>(rollouts);
        m.clip_fraction = static_cast<double>(clipped) / static_cast<double>(tokens);
        m.kl_mean = kl_sum / static_cast<double>(tokens);
        m.entropy_mean = entropy_sum / static_cast<double>(tokens);
        const WeightReport wr = weight_report(weights, cfg.weights);
        m.weight_mean = wr.mean;
        m.weight_min = wr.min;
        m.weight_max = wr.max;
      }
      adam_update(params, le.flat_gradient, adam, cfg.adam);
    }
  } catch (const TrainingAbort&) {
    throw;
  } catch (const std::exception& e) {
    throw TrainingAbort(step, std::string("step ") + std::to_string(step) + ": " + e.what(),
                        batches_dump(batches, params, weights, cfg, step));
  }
  return m;
}

Trainer::Trainer(TrainConfig cfg)
    : cfg_(std::move(cfg)),
      env_(make_environment(cfg_.task, cfg_.bracket_types)),
      params_(PolicyParams::initialize(policy_shape(cfg_), cfg_.seed, cfg_.init_scale)),
      ref_(params_, SnapshotRole::Ref) {
  cfg_.validate();
}

StepMetrics Trainer::step() {
  const PolicySnapshot old(params_, SnapshotRole::Old);
  const auto prompts = step_prompts(*env_, cfg_, step_);
  last_batches_ = collect_rollouts(old, ref_, prompts, *env_, cfg_, step_);
  last_weights_ = step_weights(params_, last_batches_, cfg_, step_);
  StepMetrics m = train_step(params_, adam_, last_batches_, cfg_, step_);
  ++step_;
  return m;
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  return os;
}

}  // namespace

ExperimentResult run_experiment(const TrainConfig& cfg, const std::filesystem::path& out_dir, std::ostream* log) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "checkpoints", ec);
  if (ec) throw std::runtime_error("cannot create '" + (out_dir / "checkpoints").string() + "': " + ec.message());

  ExperimentResult result;
  result.metrics_csv = out_dir / "metrics.csv";
  std::ofstream metrics = open_output(result.metrics_csv);
  std::ofstream timing = open_output(out_dir / "timing.csv");
  std::ofstream dumps;
  if (cfg.dump_rollouts) dumps = open_output(out_dir / "rollouts.jsonl");
  metrics << metrics_csv_header();
  timing << "step,wall_ms\n";

  Trainer trainer(cfg);
  for (int s = 0; s < cfg.total_steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.dump_rollouts) {
      // Diagnostics are taken at the parameters the batch is sampled from.
      const PolicyParams before = trainer.params();
      StepMetrics m = trainer.step();
      dumps << batches_dump(trainer.last_batches(), before, trainer.last_weights(), cfg, m.step);
      result.metrics.push_back(m);
    } else {
      result.metrics.push_back(trainer.step());
    }
    StepMetrics& m = result.metrics.back();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    m.wall_ms = cfg.wall_clock ? ms : 0.0;
    metrics << metrics_csv_row(m);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%ld,%.3f\n", m.step, ms);
    timing << buf;
    if (cfg.checkpoint_every > 0 && (m.step + 1) % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "step_%06ld.ckpt", m.step + 1);
      save_checkpoint(trainer.params(), out_dir / "checkpoints" / name);
    }
    if (log && (m.step % 50 == 0 || m.step + 1 == cfg.total_steps)) {
      char line[200];
      std::snprintf(line, sizeof(line), "step %5ld  reward %+.3f  grad_norm %.4f  clip %.3f  entropy %.3f\n", m.step,
                    m.mean_reward, m.grad_norm, m.clip_fraction, m.entropy_mean);
      *log << line << std::flush;
    }
  }
  if (!metrics) throw std::runtime_error("write failed for '" + result.metrics_csv.string() + "'");
  result.final_params = trainer.params();
  result.final_checkpoint = out_dir / "final.ckpt";
  save_checkpoint(result.final_params, result.final_checkpoint);
  return result;
}

double trailing_mean_reward(const std::vector<StepMetrics>& metrics, std::size_t window) {
  if (metrics.empty()) return 0.0;
  const std::size_t n = std::min(window, metrics.size());
  double s = 0.0;
  for (std::size_t i = metrics.size() - n; i < metrics.size(); ++i) s += metrics[i].mean_reward;
  return s / static_cast<double>(n);
}

double grad_norm_std(const std::vector<StepMetrics>& metrics) {
  if (metrics.size() < 2) return 0.0;
  double mean = 0.0;
  for (const auto& m : metrics) mean += m.grad_norm;
  mean /= static_cast<double>(metrics.size());
  double ss = 0.0;
  for (const auto& m : metrics) ss += (m.grad_norm - mean) * (m.grad_norm - mean);
  return std::sqrt(ss / static_cast<double>(metrics.size()));
}

void TokenStatsAccumulator::add(int token, double pi) {
  if (!(pi > 0.0 && pi <= 1.0)) throw std::invalid_argument("token stats: probability outside (0, 1]");
  auto& s = stats_[token];
  ++s.first;
  s.second += pi;
}

void TokenStatsAccumulator::add_dump_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  for (const auto& r : j.at("rollouts"))
    for (const auto& t : r.at("tokens")) add(t.at("token").get<int>(), t.at("pi_theta").get<double>());
}

TokenRanking TokenStatsAccumulator::rank(long min_occurrences, std::size_t top_k) const {
  std::vector<TokenStat> kept;
  for (const auto& [token, s] : stats_)
    if (s.first >= min_occurrences) kept.push_back({token, s.first, s.second / static_cast<double>(s.first)});
  TokenRanking r;
  if (kept.empty()) {
    r.notice = "no token occurs at least " + std::to_string(min_occurrences) + " times";
    return r;
  }
  auto asc = [](const TokenStat& a, const TokenStat& b) {
    return a.mean_probability != b.mean_probability ? a.mean_probability < b.mean_probability : a.token < b.token;
  };
  std::sort(kept.begin(), kept.end(), asc);
  const std::size_t n = std::min(top_k, kept.size());
  r.ascending.assign(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n));
  std::stable_sort(kept.begin(), kept.end(), [](const TokenStat& a, const TokenStat& b) {
    return a.mean_probability != b.mean_probability ? a.mean_probability > b.mean_probability : a.token < b.token;
  });
  r.descending.assign(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n));
  return r;
}

TokenRanking token_probability_stats(std::istream& dumps, long min_occurrences, std::size_t top_k) {
  TokenStatsAccumulator acc;
  std::string line;
  long lineno = 0;
  while (std::getline(dumps, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      acc.add_dump_line(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("rollout dump line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (acc.empty()) throw std::runtime_error("rollout dump stream is empty");
  return acc.rank(min_occurrences, top_k);
}

std::string token_ranking_csv(const std::vector<TokenStat>& stats, const Vocabulary* vocab) {
  std::ostringstream os;
  os << "rank,token,symbol,occurrences,mean_probability\n";
  char buf[160];
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const TokenStat& s = stats[i];
    const std::string sym = vocab && vocab->contains(s.token) ? vocab->symbol(s.token) : "";
    std::snprintf(buf, sizeof(buf), "%zu,%d,%s,%ld,%.17g\n", i + 1, s.token, sym.c_str(), s.occurrences,
                  s.mean_probability);
    os << buf;
  }
  return os.str();
}

}  // namespace trgrpo
