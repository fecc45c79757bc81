#include "trgrpo/grpo.hpp"

#include "json.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace trgrpo {

void SurrogateConfig::validate() const {
  if (!(epsilon_low >= 0.0 && epsilon_low < 1.0)) throw std::invalid_argument("epsilon_l must be in [0, 1)");
  if (!(epsilon_high > 0.0)) throw std::invalid_argument("epsilon_h must be positive");
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be non-negative");
}

std::vector<double> group_advantages(std::span<const double> rewards, bool sample_std) {
  const std::size_t g = rewards.size();
  if (g < 2) throw std::invalid_argument("group_advantages: group size must be at least 2");
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(g);
  double ss = 0.0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double std = std::sqrt(ss / static_cast<double>(sample_std ? g - 1 : g));
  std::vector<double> adv(g, 0.0);
  if (std < kDegenerateStd) return adv;
  for (std::size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / std;
  return adv;
}

int trust_indicator(double ratio, double advantage, const SurrogateConfig& cfg, double weight) {
  const double wr = weight * ratio;
  if (advantage > 0.0 && wr > 1.0 + cfg.epsilon_high) return 0;
  if (advantage < 0.0 && wr < 1.0 - cfg.epsilon_low) return 0;
  return 1;
}

TokenTerm make_token_term(double pi_theta, double pi_old, double pi_ref, double advantage, const SurrogateConfig& cfg,
                          double weight) {
  if (!(pi_theta > 0.0 && pi_old > 0.0 && pi_ref > 0.0)) throw std::invalid_argument("token probabilities must be positive");
  if (!(weight > 0.0)) throw std::invalid_argument("token weight must be positive");
  TokenTerm t;
  t.pi_theta = pi_theta;
  t.pi_old = pi_old;
  t.pi_ref = pi_ref;
  t.advantage = advantage;
  t.ratio = pi_theta / pi_old;
  t.weight = weight;
  t.indicator = trust_indicator(t.ratio, advantage, cfg, weight);
  t.gamma = gamma_coefficient(t, cfg);
  return t;
}

double gamma_coefficient(const TokenTerm& term, const SurrogateConfig& cfg) {
  const double surrogate = term.ratio * term.advantage * term.indicator;
  const double x = term.pi_ref / term.pi_theta;
  if (term.weight == 1.0) return surrogate + cfg.beta * x - cfg.beta;
  return surrogate + (cfg.beta * term.weight * x - cfg.beta) / term.weight;
}

Expr grpo_kl(Expr logp, const Matrix& logp_ref) {
  GraphBuilder& b = logp.builder();
  Expr x = exp(b.constant(logp_ref) - logp);
  return x - log(x) - 1.0;
}

Expr grpo_token_surrogate(Expr logp, const TokenConstants& c, const SurrogateConfig& cfg) {
  GraphBuilder& b = logp.builder();
  Expr ratio = exp(logp - b.constant(c.logp_old));
  Expr adv = b.constant(c.advantage);
  Expr unclipped = ratio * adv;
  Expr clipped = clip(ratio, 1.0 - cfg.epsilon_low, 1.0 + cfg.epsilon_high) * adv;
  Expr surrogate = min(unclipped, clipped);
  if (cfg.beta == 0.0) return surrogate;
  return surrogate - cfg.beta * grpo_kl(logp, c.logp_ref);
}

std::size_t GroupBatch::token_count() const {
  std::size_t n = 0;
  for (const auto& r : rollouts) n += r.tokens.size();
  return n;
}

std::vector<int> GroupBatch::stacked_tokens() const {
  std::vector<int> out;
  out.reserve(token_count());
  for (const auto& r : rollouts) out.insert(out.end(), r.tokens.begin(), r.tokens.end());
  return out;
}

IndexMatrix GroupBatch::stacked_contexts(int window) const {
  IndexMatrix out(static_cast<Eigen::Index>(token_count()), window);
  Eigen::Index row = 0;
  for (const auto& r : rollouts) {
    const IndexMatrix ctx = rollout_contexts(prompt.tokens, r.tokens, window);
    out.middleRows(row, ctx.rows()) = ctx;
    row += ctx.rows();
  }
  return out;
}

TokenConstants GroupBatch::constants() const {
  const auto t = static_cast<Eigen::Index>(token_count());
  TokenConstants c{Matrix(t, 1), Matrix(t, 1), Matrix(t, 1)};
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const Rollout& r = rollouts[i];
    for (std::size_t k = 0; k < r.tokens.size(); ++k, ++row) {
      c.logp_old(row, 0) = r.logp_old[k];
      c.logp_ref(row, 0) = r.logp_ref[k];
      c.advantage(row, 0) = advantages[i];
    }
  }
  return c;
}

void GroupBatch::validate() const {
  if (rollouts.size() < 2) throw std::invalid_argument("group batch: need at least 2 rollouts");
  if (advantages.size() != rollouts.size()) throw std::invalid_argument("group batch: advantages not computed");
  for (const auto& r : rollouts) {
    if (r.tokens.empty()) throw std::invalid_argument("group batch: empty rollout");
    if (r.logp_old.size() != r.tokens.size() || r.logp_ref.size() != r.tokens.size())
      throw std::invalid_argument("group batch: log-prob list length differs from rollout length");
    if (!std::isfinite(r.reward)) throw std::invalid_argument("group batch: non-finite reward");
  }
}

Expr grpo_group_loss(Expr logp, const TokenConstants& c, const SurrogateConfig& cfg) {
  return -mean(grpo_token_surrogate(logp, c, cfg));
}

Expr grpo_group_loss(const PolicyGraph& policy, const GroupBatch& batch, const SurrogateConfig& cfg, int window) {
  batch.validate();
  const PolicyOutputs out = policy_forward(policy, batch.stacked_contexts(window), batch.stacked_tokens());
  return grpo_group_loss(out.token_log_probs, batch.constants(), cfg);
}

std::string group_batch_jsonl(const GroupBatch& batch, const TokenDiagnostics& diag, const SurrogateConfig& cfg,
                              long step) {
  nlohmann::json j;
  j["step"] = step;
  j["task"] = task_name(batch.prompt.task);
  j["difficulty"] = batch.prompt.difficulty;
  j["prompt_tokens"] = batch.prompt.tokens;
  std::vector<double> rewards;
  for (const auto& r : batch.rollouts) rewards.push_back(r.reward);
  j["rewards"] = rewards;
  j["advantages"] = batch.advantages;
  nlohmann::json rollouts = nlohmann::json::array();
  std::size_t k = 0;
  for (std::size_t i = 0; i < batch.rollouts.size(); ++i) {
    const Rollout& r = batch.rollouts[i];
    nlohmann::json tokens = nlohmann::json::array();
    for (std::size_t t = 0; t < r.tokens.size(); ++t, ++k) {
      const double w = k < diag.weights.size() ? diag.weights[k] : 1.0;
      const double pi = std::exp(diag.logp_theta.at(k));
      const TokenTerm term =
          make_token_term(pi, std::exp(r.logp_old[t]), std::exp(r.logp_ref[t]), batch.advantages[i], cfg, w);
      tokens.push_back({{"token", r.tokens[t]},
                        {"pi_theta", term.pi_theta},
                        {"pi_old", term.pi_old},
                        {"pi_ref", term.pi_ref},
                        {"advantage", term.advantage},
                        {"gamma", term.gamma},
                        {"indicator", term.indicator},
                        {"weight", term.weight}});
    }
    rollouts.push_back({{"reward", r.reward}, {"tokens", std::move(tokens)}});
  }
  j["rollouts"] = std::move(rollouts);
  return j.dump();
}

}  // namespace trgrpo
