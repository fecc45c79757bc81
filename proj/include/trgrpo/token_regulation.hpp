#pragma once

#include "trgrpo/grpo.hpp"
#include "trgrpo/rng.hpp"

#include <span>
#include <string>
#include <vector>

namespace trgrpo {

// How the probability enters the logistic: Verbatim evaluates sigma(pi / tau),
// Scaled evaluates sigma(pi * tau).
enum class WeightMode { Verbatim, Scaled };
enum class WeightScheme { Tr, Equal, Random, Reverse };

const char* weight_mode_name(WeightMode mode);
const char* weight_scheme_name(WeightScheme scheme);
WeightMode parse_weight_mode(const std::string& name);
WeightScheme parse_weight_scheme(const std::string& name);

struct WeightConfig {
  double alpha = 2.0;
  double mu = 0.25;
  double tau = 9.0;
  double lower = 1.0;
  double upper = 1.4;
  WeightMode mode = WeightMode::Scaled;
  WeightScheme scheme = WeightScheme::Tr;
  double random_low = 0.5;
  double random_high = 1.5;

  void validate() const;
};

/// clip(alpha * (sigmoid(arg) - mu), L, U) with arg = pi/tau or pi*tau.
/// The probability is treated as a constant.
double token_weight(double pi, const WeightConfig& cfg);

/// Weight under the configured scheme. Tr returns `base_weight` unchanged;
/// Equal returns 1; Random draws uniformly from [random_low, random_high];
/// Reverse returns 2 - base_weight.
double ablation_weight(double base_weight, const WeightConfig& cfg, Rng& rng);

/// Scheme-specific weights for a stacked token sequence given current log-probs.
std::vector<double> scheme_weights(std::span<const double> logp_theta, const WeightConfig& cfg, Rng& rng);

struct WeightReport {
  std::vector<double> weights;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double fraction_at_lower = 0.0;
  double fraction_at_upper = 0.0;
};

WeightReport weight_report(std::span<const double> weights, const WeightConfig& cfg);
std::string format_weight_report(const WeightReport& report);

/// True when token_weight takes a single value over the whole of (0, 1].
/// The map is monotone, so comparing the endpoints suffices.
bool weight_is_constant(const WeightConfig& cfg);
std::string saturation_warning(const WeightConfig& cfg);

/// y - log y - 1 with y = w * pi_ref / pi_theta, per token.
Expr weighted_kl(Expr logp, const Matrix& logp_ref, const Matrix& weights);

/// min(w*r*A, clip(w*r, 1-eps_l, 1+eps_h)*A) - beta*KL_w per token. `weights`
/// enter as constants.
Expr trgrpo_token_surrogate(Expr logp, const TokenConstants& c, const Matrix& weights, const SurrogateConfig& cfg);

/// Same surrogate with the weight computed inside the graph from
/// stop_gradient(exp(logp)) by the tr scheme.
Expr trgrpo_token_surrogate_sg(Expr logp, const TokenConstants& c, const WeightConfig& wcfg,
                               const SurrogateConfig& cfg);

Expr trgrpo_group_loss(Expr logp, const TokenConstants& c, const Matrix& weights, const SurrogateConfig& cfg);

/// gamma * w * score, with gamma from gamma_coefficient(term) (term.weight = w).
Vector per_token_gradient(const TokenTerm& term, const SurrogateConfig& cfg, const Vector& score);

/// Weight curve on pi = k / points for k = 1..points, as "pi,w" CSV.
std::string weight_curve_csv(const WeightConfig& cfg, int points = 1000);

}  // namespace trgrpo
