#include "trgrpo/token_regulation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace trgrpo {

const char* weight_mode_name(WeightMode mode) { return mode == WeightMode::Verbatim ? "verbatim" : "scaled"; }

const char* weight_scheme_name(WeightScheme scheme) {
  switch (scheme) {
    case WeightScheme::Tr: return "tr";
    case WeightScheme::Equal: return "equal";
    case WeightScheme::Random: return "random";
    case WeightScheme::Reverse: return "reverse";
  }
  return "?";
}

WeightMode parse_weight_mode(const std::string& name) {
  if (name == "verbatim") return WeightMode::Verbatim;
  if (name == "scaled") return WeightMode::Scaled;
  throw std::invalid_argument("unknown weight mode '" + name + "'");
}

WeightScheme parse_weight_scheme(const std::string& name) {
  if (name == "tr") return WeightScheme::Tr;
  if (name == "equal") return WeightScheme::Equal;
  if (name == "random") return WeightScheme::Random;
  if (name == "reverse") return WeightScheme::Reverse;
  throw std::invalid_argument("unknown weight scheme '" + name + "'");
}

void WeightConfig::validate() const {
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (!(lower <= upper)) throw std::invalid_argument("weight_lower must not exceed weight_upper");
  if (!(lower > 0.0)) throw std::invalid_argument("weight_lower must be positive");
  if (!(random_low > 0.0 && random_low <= random_high)) throw std::invalid_argument("random weight range is invalid");
}

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double shaping_argument(double pi, const WeightConfig& cfg) {
  return cfg.mode == WeightMode::Verbatim ? pi / cfg.tau : pi * cfg.tau;
}

}  // namespace

double token_weight(double pi, const WeightConfig& cfg) {
  if (!(pi > 0.0)) throw std::invalid_argument("token_weight: probability must be positive");
  const double raw = cfg.alpha * (logistic(shaping_argument(pi, cfg)) - cfg.mu);
  return std::clamp(raw, cfg.lower, cfg.upper);
}

double ablation_weight(double base_weight, const WeightConfig& cfg, Rng& rng) {
  switch (cfg.scheme) {
    case WeightScheme::Tr: return base_weight;
    case WeightScheme::Equal: return 1.0;
    case WeightScheme::Random: return rng.uniform(cfg.random_low, cfg.random_high);
    case WeightScheme::Reverse: return 2.0 - base_weight;
  }
  return base_weight;
}

std::vector<double> scheme_weights(std::span<const double> logp_theta, const WeightConfig& cfg, Rng& rng) {
  std::vector<double> w;
  w.reserve(logp_theta.size());
  for (double lp : logp_theta) {
    const double base = cfg.scheme == WeightScheme::Equal || cfg.scheme == WeightScheme::Random
                            ? 1.0
                            : token_weight(std::exp(lp), cfg);
    w.push_back(ablation_weight(base, cfg, rng));
  }
  return w;
}

WeightReport weight_report(std::span<const double> weights, const WeightConfig& cfg) {
  WeightReport r;
  r.weights.assign(weights.begin(), weights.end());
  if (weights.empty()) return r;
  r.min = *std::min_element(weights.begin(), weights.end());
  r.max = *std::max_element(weights.begin(), weights.end());
  double total = 0.0;
  std::size_t lo = 0, hi = 0;
  for (double w : weights) {
    total += w;
    lo += w == cfg.lower;
    hi += w == cfg.upper;
  }
  const auto n = static_cast<double>(weights.size());
  r.mean = total / n;
  r.fraction_at_lower = static_cast<double>(lo) / n;
  r.fraction_at_upper = static_cast<double>(hi) / n;
  return r;
}

std::string format_weight_report(const WeightReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "weights n=%zu min=%.6f max=%.6f mean=%.6f at_lower=%.4f at_upper=%.4f",
                r.weights.size(), r.min, r.max, r.mean, r.fraction_at_lower, r.fraction_at_upper);
  return buf;
}

bool weight_is_constant(const WeightConfig& cfg) {
  return token_weight(std::numeric_limits<double>::denorm_min(), cfg) == token_weight(1.0, cfg);
}

std::string saturation_warning(const WeightConfig& cfg) {
  if (!weight_is_constant(cfg)) return {};
  std::ostringstream os;
  os << "warning: token weight is constant (" << token_weight(1.0, cfg) << ") over pi in (0, 1] for mode="
     << weight_mode_name(cfg.mode) << " alpha=" << cfg.alpha << " mu=" << cfg.mu << " tau=" << cfg.tau
     << " L=" << cfg.lower << " U=" << cfg.upper;
  return os.str();
}

Expr weighted_kl(Expr logp, const Matrix& logp_ref, const Matrix& weights) {
  GraphBuilder& b = logp.builder();
  Expr y = b.constant(weights) * exp(b.constant(logp_ref) - logp);
  return y - log(y) - 1.0;
}

namespace {

Expr weighted_surrogate(Expr logp, const TokenConstants& c, Expr w, const SurrogateConfig& cfg) {
  GraphBuilder& b = logp.builder();
  Expr ratio = exp(logp - b.constant(c.logp_old));
  Expr adv = b.constant(c.advantage);
  Expr wr = w * ratio;
  Expr unclipped = wr * adv;
  Expr clipped = clip(wr, 1.0 - cfg.epsilon_low, 1.0 + cfg.epsilon_high) * adv;
  Expr surrogate = min(unclipped, clipped);
  if (cfg.beta == 0.0) return surrogate;
  Expr y = w * exp(b.constant(c.logp_ref) - logp);
  return surrogate - cfg.beta * (y - log(y) - 1.0);
}

}  // namespace

Expr trgrpo_token_surrogate(Expr logp, const TokenConstants& c, const Matrix& weights, const SurrogateConfig& cfg) {
  if (weights.rows() != logp.rows() || weights.cols() != 1)
    throw std::invalid_argument("trgrpo_token_surrogate: need one weight per token");
  return weighted_surrogate(logp, c, logp.builder().constant(weights), cfg);
}

Expr trgrpo_token_surrogate_sg(Expr logp, const TokenConstants& c, const WeightConfig& wcfg,
                               const SurrogateConfig& cfg) {
  Expr pi = stop_gradient(exp(logp));
  Expr arg = wcfg.mode == WeightMode::Verbatim ? pi * (1.0 / wcfg.tau) : pi * wcfg.tau;
  Expr w = clip(wcfg.alpha * (sigmoid(arg) - wcfg.mu), wcfg.lower, wcfg.upper);
  return weighted_surrogate(logp, c, w, cfg);
}

Expr trgrpo_group_loss(Expr logp, const TokenConstants& c, const Matrix& weights, const SurrogateConfig& cfg) {
  return -mean(trgrpo_token_surrogate(logp, c, weights, cfg));
}

Vector per_token_gradient(const TokenTerm& term, const SurrogateConfig& cfg, const Vector& score) {
  return (gamma_coefficient(term, cfg) * term.weight) * score;
}

std::string weight_curve_csv(const WeightConfig& cfg, int points) {
  if (points < 1) throw std::invalid_argument("weight_curve_csv: need at least one point");
  std::ostringstream os;
  os << "pi,w\n";
  char buf[96];
  for (int k = 1; k <= points; ++k) {
    const double pi = static_cast<double>(k) / points;
    std::snprintf(buf, sizeof(buf), "%.6f,%.17g\n", pi, token_weight(pi, cfg));
    os << buf;
  }
  return os.str();
}

}  // namespace trgrpo
