#include "doctest.h"
#include "oracles.hpp"

#include "trgrpo/token_regulation.hpp"

#include <sstream>

using namespace trgrpo;

namespace {

struct TokenEval {
  double value;
  double grad;
};

TokenEval tr_token_at(double logp, double logp_old, double logp_ref, double adv, double w, const SurrogateConfig& cfg) {
  GraphBuilder b;
  Expr lp = b.input("logp", 1, 1);
  TokenConstants c{Matrix::Constant(1, 1, logp_old), Matrix::Constant(1, 1, logp_ref), Matrix::Constant(1, 1, adv)};
  const Graph g = b.build(trgrpo_token_surrogate(lp, c, Matrix::Constant(1, 1, w), cfg));
  const Evaluation ev = g.evaluate({{"logp", Matrix::Constant(1, 1, logp)}});
  return {ev.scalar(), ev.gradient().at("logp")(0, 0)};
}

}  // namespace

TEST_CASE("token weight examples") {
  WeightConfig cfg;
  CHECK(token_weight(0.9, cfg) == 1.4);
  CHECK(token_weight(1e-12, cfg) == 1.0);
  CHECK(token_weight(0.2, cfg) == doctest::Approx(2.0 * (oracle::logistic(1.8) - 0.25)));
  cfg.mode = WeightMode::Verbatim;
  CHECK(token_weight(0.9, cfg) == 1.0);
  CHECK(weight_is_constant(cfg));
  CHECK_FALSE(saturation_warning(cfg).empty());
  cfg.mode = WeightMode::Scaled;
  CHECK_FALSE(weight_is_constant(cfg));
  CHECK(saturation_warning(cfg).empty());
  CHECK_THROWS(token_weight(0.0, cfg));
}

TEST_CASE("token weight is monotone and bounded on a fine grid") {
  for (WeightMode mode : {WeightMode::Scaled, WeightMode::Verbatim}) {
    WeightConfig cfg;
    cfg.mode = mode;
    double prev = 0.0;
    for (int k = 1; k <= 10000; ++k) {
      const double w = token_weight(k / 10000.0, cfg);
      CHECK(w >= cfg.lower);
      CHECK(w <= cfg.upper);
      CHECK(w >= prev);
      prev = w;
    }
  }
}

TEST_CASE("ablation schemes") {
  WeightConfig cfg;
  Rng rng(4);
  cfg.scheme = WeightScheme::Reverse;
  CHECK(ablation_weight(1.4, cfg, rng) == doctest::Approx(0.6));
  cfg.scheme = WeightScheme::Equal;
  CHECK(ablation_weight(1.4, cfg, rng) == 1.0);
  cfg.scheme = WeightScheme::Tr;
  CHECK(ablation_weight(1.3, cfg, rng) == 1.3);
  cfg.scheme = WeightScheme::Random;
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double w = ablation_weight(1.0, cfg, rng);
    CHECK(w >= 0.5);
    CHECK(w <= 1.5);
    acc += w;
  }
  CHECK(std::abs(acc / n - 1.0) <= 0.02);

  const std::vector<double> logp{std::log(0.9), std::log(0.01), std::log(0.3)};
  cfg.scheme = WeightScheme::Reverse;
  const auto rev = scheme_weights(logp, cfg, rng);
  cfg.scheme = WeightScheme::Tr;
  const auto tr = scheme_weights(logp, cfg, rng);
  for (std::size_t i = 0; i < logp.size(); ++i) CHECK(rev[i] + tr[i] == doctest::Approx(2.0));
  CHECK(parse_weight_scheme("reverse") == WeightScheme::Reverse);
  CHECK_THROWS(parse_weight_scheme("inverse"));
}

TEST_CASE("weighted surrogate examples") {
  SurrogateConfig cfg;
  cfg.beta = 0.0;
  SUBCASE("up-weighted positive token hits the upper clip") {
    const auto t = tr_token_at(-0.5, -0.5, -0.5, 1.0, 1.4, cfg);
    CHECK(t.value == doctest::Approx(1.24));
    CHECK(t.grad == 0.0);
  }
  SUBCASE("down-weighted negative token hits the lower clip") {
    const auto t = tr_token_at(-0.5, -0.5, -0.5, -1.0, 0.6, cfg);
    CHECK(t.value == doctest::Approx(-0.8));
    CHECK(t.grad == 0.0);
  }
  SUBCASE("inside the trust region the gradient is w r A") {
    const auto t = tr_token_at(-0.5, -0.4, -0.5, 0.7, 1.1, cfg);
    const double r = std::exp(-0.1);
    CHECK(t.value == doctest::Approx(1.1 * r * 0.7));
    CHECK(t.grad == doctest::Approx(1.1 * r * 0.7));
  }
}

TEST_CASE("weighted KL") {
  auto kl = [](double logp, double logp_ref, double w) {
    GraphBuilder b;
    Expr lp = b.input("logp", 1, 1);
    const Graph g = b.build(weighted_kl(lp, Matrix::Constant(1, 1, logp_ref), Matrix::Constant(1, 1, w)));
    return g.evaluate({{"logp", Matrix::Constant(1, 1, logp)}}).scalar();
  };
  CHECK(kl(-1.0, -1.0, 1.4) == doctest::Approx(0.063528).epsilon(1e-5));
  CHECK(kl(-1.0, -1.0 - std::log(1.4), 1.4) == doctest::Approx(0.0).epsilon(1e-15));
  for (double lp : {-2.0, -0.3, 0.0})
    for (double lr : {-1.5, -0.3, 0.0}) CHECK(kl(lp, lr, 1.0) >= 0.0);

  SUBCASE("at w = 1 the weighted terms equal the plain ones exactly") {
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
      const int T = rng.integer(1, 5);
      Matrix lp(T, 1), lo(T, 1), lr(T, 1), adv(T, 1);
      for (int t = 0; t < T; ++t) {
        lp(t, 0) = rng.uniform(-3, -0.01);
        lo(t, 0) = lp(t, 0) + rng.uniform(-0.5, 0.5);
        lr(t, 0) = lp(t, 0) + rng.uniform(-0.5, 0.5);
        adv(t, 0) = rng.uniform(-2, 2);
      }
      TokenConstants c{lo, lr, adv};
      SurrogateConfig cfg;
      GraphBuilder b1, b2;
      Expr x1 = b1.input("logp", T, 1), x2 = b2.input("logp", T, 1);
      const Graph g1 = b1.build(grpo_group_loss(x1, c, cfg));
      const Graph g2 = b2.build(trgrpo_group_loss(x2, c, Matrix::Ones(T, 1), cfg));
      const Evaluation e1 = g1.evaluate({{"logp", lp}}), e2 = g2.evaluate({{"logp", lp}});
      CHECK(e1.scalar() == e2.scalar());
      CHECK(e1.gradient().at("logp") == e2.gradient().at("logp"));
    }
  }
}

TEST_CASE("stop-gradient weights match constant weights") {
  Rng rng(21);
  SurrogateConfig cfg;
  WeightConfig wcfg;
  for (int i = 0; i < 200; ++i) {
    const int T = rng.integer(1, 6);
    Matrix lp(T, 1), lo(T, 1), lr(T, 1), adv(T, 1), w(T, 1);
    for (int t = 0; t < T; ++t) {
      lp(t, 0) = rng.uniform(-4, -0.001);
      lo(t, 0) = lp(t, 0) + rng.uniform(-0.4, 0.4);
      lr(t, 0) = lp(t, 0) + rng.uniform(-0.4, 0.4);
      adv(t, 0) = rng.uniform(-2, 2);
      w(t, 0) = token_weight(std::exp(lp(t, 0)), wcfg);
    }
    TokenConstants c{lo, lr, adv};
    GraphBuilder b1, b2;
    Expr x1 = b1.input("logp", T, 1), x2 = b2.input("logp", T, 1);
    const Graph g1 = b1.build(sum(trgrpo_token_surrogate(x1, c, w, cfg)));
    const Graph g2 = b2.build(sum(trgrpo_token_surrogate_sg(x2, c, wcfg, cfg)));
    const Evaluation e1 = g1.evaluate({{"logp", lp}}), e2 = g2.evaluate({{"logp", lp}});
    CHECK(std::abs(e1.scalar() - e2.scalar()) <= 1e-15 * std::max(1.0, std::abs(e1.scalar())));
    CHECK((e1.gradient().at("logp") - e2.gradient().at("logp")).cwiseAbs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("indicator agrees with the autodiff gradient branch") {
  Rng rng(13);
  SurrogateConfig cfg;
  cfg.beta = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double w = rng.uniform(0.5, 1.5);
    const double adv = rng.uniform(-2, 2);
    const double logp_old = rng.uniform(-3, 0);
    double ratio = rng.uniform(0.3, 2.0);
    // keep away from the kinks, where the branch choice is a convention
    if (std::abs(w * ratio - (1 + cfg.epsilon_high)) < 1e-9 || std::abs(w * ratio - (1 - cfg.epsilon_low)) < 1e-9)
      ratio += 1e-3;
    const double logp = logp_old + std::log(ratio);
    const int ind = trust_indicator(std::exp(logp - logp_old), adv, cfg, w);
    const auto t = tr_token_at(logp, logp_old, logp, adv, w, cfg);
    if (ind == 0) {
      CHECK(t.grad == 0.0);
    } else {
      CHECK(t.grad == doctest::Approx(w * std::exp(logp - logp_old) * adv).epsilon(1e-12));
    }
  }
}

TEST_CASE("per-token gradient is w gamma times the score") {
  SurrogateConfig cfg;
  const TokenTerm term = make_token_term(0.3, 0.28, 0.31, 0.9, cfg, 1.2);
  Vector score(3);
  score << 0.7, -0.2, -0.5;
  const Vector g = per_token_gradient(term, cfg, score);
  CHECK((g - term.weight * term.gamma * score).norm() <= 1e-15);
  CHECK(term.gamma == doctest::Approx(gamma_coefficient(term, cfg)));
}

TEST_CASE("w times (1 - pi) stays inside its range") {
  WeightConfig cfg;
  for (int k = 1; k <= 10000; ++k) {
    const double pi = k / 10000.0;
    const double v = token_weight(pi, cfg) * (1.0 - pi);
    CHECK(v >= 0.0);
    CHECK(v <= cfg.upper);
  }
}

TEST_CASE("weight report and curve") {
  WeightConfig cfg;
  const std::vector<double> w{1.0, 1.0, 1.2, 1.4};
  const WeightReport r = weight_report(w, cfg);
  CHECK(r.min == 1.0);
  CHECK(r.max == 1.4);
  CHECK(r.mean == doctest::Approx(1.15));
  CHECK(r.fraction_at_lower == 0.5);
  CHECK(r.fraction_at_upper == 0.25);
  CHECK(format_weight_report(r).find("mean=1.150000") != std::string::npos);

  const std::string csv = weight_curve_csv(cfg, 10);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line == "pi,w");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 10);
  CHECK(csv.find("1.000000,1.3999999999999999") != std::string::npos);
  CHECK_THROWS(weight_curve_csv(cfg, 0));
}
