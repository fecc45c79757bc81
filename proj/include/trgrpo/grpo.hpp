#pragma once

#include "trgrpo/envs.hpp"
#include "trgrpo/graph.hpp"
#include "trgrpo/policy.hpp"

#include <span>
#include <string>
#include <vector>

namespace trgrpo {

struct SurrogateConfig {
  double epsilon_low = 0.20;
  double epsilon_high = 0.24;
  double beta = 0.001;
  bool sample_std = false;  // Bessel-corrected std in the advantage normalisation

  void validate() const;
};

/// Reward std below this makes a group degenerate: all advantages are zero.
inline constexpr double kDegenerateStd = 1e-8;

/// (r_i - mean) / std over the group, population std unless `sample_std`.
std::vector<double> group_advantages(std::span<const double> rewards, bool sample_std = false);

/// 0 when the clipped branch owns the token: A > 0 and w*ratio > 1 + eps_h,
/// or A < 0 and w*ratio < 1 - eps_l. w = 1 is plain GRPO.
int trust_indicator(double ratio, double advantage, const SurrogateConfig& cfg, double weight = 1.0);

struct TokenTerm {
  double pi_theta = 1.0;
  double pi_old = 1.0;
  double pi_ref = 1.0;
  double advantage = 0.0;
  double ratio = 1.0;
  int indicator = 1;
  double gamma = 0.0;
  double weight = 1.0;
};

TokenTerm make_token_term(double pi_theta, double pi_old, double pi_ref, double advantage, const SurrogateConfig& cfg,
                          double weight = 1.0);

/// Scalar multiplying the score of a token in the objective's gradient.
/// With w = 1: ratio*A*indicator + beta*pi_ref/pi_theta - beta. For general w
/// the KL part is (beta*w*pi_ref/pi_theta - beta)/w, so that w*gamma times the
/// score is exactly the token's gradient.
double gamma_coefficient(const TokenTerm& term, const SurrogateConfig& cfg);

// Per-token constants of a stacked group, T x 1 each.
struct TokenConstants {
  Matrix logp_old;
  Matrix logp_ref;
  Matrix advantage;
};

/// x - log x - 1 with x = pi_ref / pi_theta, per token.
Expr grpo_kl(Expr logp, const Matrix& logp_ref);

/// min(r*A, clip(r, 1-eps_l, 1+eps_h)*A) - beta*KL per token, r = exp(logp - logp_old).
Expr grpo_token_surrogate(Expr logp, const TokenConstants& c, const SurrogateConfig& cfg);

struct Rollout {
  std::vector<int> tokens;
  std::vector<double> logp_old;
  std::vector<double> logp_ref;
  double reward = 0.0;
};

struct GroupBatch {
  Prompt prompt;
  std::vector<Rollout> rollouts;
  std::vector<double> advantages;

  std::size_t token_count() const;
  std::vector<int> stacked_tokens() const;
  IndexMatrix stacked_contexts(int window) const;
  TokenConstants constants() const;
  void validate() const;
};

/// -(1/sum|o_i|) * sum over tokens of the plain GRPO surrogate.
Expr grpo_group_loss(Expr logp, const TokenConstants& c, const SurrogateConfig& cfg);
Expr grpo_group_loss(const PolicyGraph& policy, const GroupBatch& batch, const SurrogateConfig& cfg, int window);

// Offline inspection record for one group. Per-token vectors are stacked in
// rollout order.
struct TokenDiagnostics {
  std::vector<double> logp_theta;
  std::vector<double> weights;
};

std::string group_batch_jsonl(const GroupBatch& batch, const TokenDiagnostics& diag, const SurrogateConfig& cfg,
                              long step);

}  // namespace trgrpo
