#pragma once

#include "trgrpo/grpo.hpp"
#include "trgrpo/linalg.hpp"
#include "trgrpo/policy.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trgrpo {

inline constexpr double kBoundSlack = 1e-9;

template <typename Scalar>
struct SandwichT {
  Scalar lower{0};
  Scalar measured{0};
  Scalar upper{0};
  bool holds(Scalar slack = Scalar(kBoundSlack)) const {
    return lower - slack <= measured && measured <= upper + slack;
  }
};
using Sandwich = SandwichT<double>;

/// ||x|| prod a_i <= ||x A_1 ... A_m|| <= ||x|| prod b_i, where a_i, b_i are
/// the square roots of the extreme eigenvalues of A_i A_i^T.
template <typename Scalar>
SandwichT<Scalar> matrix_chain_sandwich(const RowVectorX<Scalar>& x, std::span<const MatrixX<Scalar>> chain) {
  RowVectorX<Scalar> y = x;
  Scalar lower = x.norm();
  Scalar upper = x.norm();
  for (const auto& a : chain) {
    if (a.rows() != y.size()) throw std::invalid_argument("matrix_chain_sandwich: dimension mismatch in chain");
    const auto gains = right_multiplication_gains(a);
    lower *= gains.lower;
    upper *= gains.upper;
    y = (y * a).eval();
  }
  return {lower, y.norm(), upper};
}

/// (1 - p_k) <= ||1_k - p|| <= sqrt(2) (1 - p_k).
template <typename Derived>
SandwichT<typename Derived::Scalar> score_norm_bounds(const Eigen::MatrixBase<Derived>& p, Eigen::Index k) {
  using Scalar = typename Derived::Scalar;
  if (k < 0 || k >= p.size()) throw std::out_of_range("score_norm_bounds: token index out of range");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> score = -p.reshaped();
  score(k) += Scalar(1);
  const Scalar gap = Scalar(1) - p.reshaped()(k);
  return {gap, score.norm(), std::sqrt(Scalar(2)) * gap};
}

// Pointwise Jacobian gain constants of one forward pass. Index l runs over the
// hidden layers; a_J/b_J[l] belong to d a_{l+2}/d a_{l+1}, and the final entry
// (the map past the last hidden layer) is the identity with gains (1, 1).
struct BoundConstants {
  double a_W = 0.0;
  double b_W = 0.0;
  std::vector<double> a_G, b_G;
  std::vector<double> a_J, b_J;
  int layers = 0;
};

BoundConstants bound_constants(const PolicyParams& params, std::span<const int> context);
BoundConstants bound_constants(const LayerJacobians& jac);

struct BoundReport {
  double lower = 0.0;
  double measured = 0.0;
  double upper = 0.0;
  double slack_lower = 0.0;  // measured - lower
  double slack_upper = 0.0;  // upper - measured
  bool pass = false;
};

/// Token-gradient sandwich for w * gamma * grad log pi over the hidden-layer
/// parameters. Uses term.pi_theta and term.gamma.
BoundReport token_gradient_bound(const TokenTerm& term, double w, const BoundConstants& constants,
                                 double measured_g_norm);

/// d log pi(token | context) / d theta for every policy parameter, by autodiff.
Gradients log_prob_gradient(const PolicyParams& params, std::span<const int> context, int token);

/// Norm of the gradient restricted to the hidden-layer weights and biases.
double hidden_gradient_norm(const PolicyParams& params, const Gradients& grads);

struct SharpnessConfig {
  double rho = 0.05;
};

/// loss + rho * ||grad||.
double sharpness_surrogate(double loss_value, double grad_norm, const SharpnessConfig& cfg = {});

// Verification suite.
struct CheckRow {
  std::string check;
  int index = 0;
  double lower = 0.0;
  double measured = 0.0;
  double upper = 0.0;
  bool pass = false;
};

struct TheorySuiteOptions {
  std::uint64_t seed = 7;
  int chains = 1000;
  int distributions = 10000;
  int bound_configs = 100;
  int jacobian_configs = 20;
};

struct TheoryReport {
  std::vector<CheckRow> rows;
  int failures() const;
  std::string summary() const;
  std::string csv() const;
};

TheoryReport run_theory_suite(const TheorySuiteOptions& options = {});

}  // namespace trgrpo
