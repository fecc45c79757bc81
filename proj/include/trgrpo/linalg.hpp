#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace trgrpo {

// Dense row-major storage shared by the graph engine, the policy and the
// theory checks. A scalar is a 1x1 matrix.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;
using Vector = VectorX<double>;
using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Singular values of `a` in descending order, min(rows, cols) of them.
///
/// One-sided Jacobi (Hestenes): columns of a working copy are rotated pairwise
/// until mutually orthogonal; the column norms are then the singular values.
/// Wide inputs are transposed first so the rotation count scales with the
/// smaller dimension.
template <typename Derived>
std::vector<typename Derived::Scalar> jacobi_singular_values(const Eigen::MatrixBase<Derived>& a,
                                                             int max_sweeps = 60) {
  using Scalar = typename Derived::Scalar;
  using Work = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;  // column-major: columns are contiguous
  Work u = a.rows() >= a.cols() ? Work(a) : Work(a.transpose());
  const Eigen::Index n = u.cols();
  const Scalar eps = std::numeric_limits<Scalar>::epsilon();

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar alpha = u.col(p).squaredNorm();
        const Scalar beta = u.col(q).squaredNorm();
        const Scalar gamma = u.col(p).dot(u.col(q));
        if (gamma == Scalar(0) || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const Scalar zeta = (beta - alpha) / (Scalar(2) * gamma);
        const Scalar t = std::copysign(Scalar(1), zeta) / (std::abs(zeta) + std::sqrt(Scalar(1) + zeta * zeta));
        const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + t * t);
        const Scalar s = c * t;
        for (Eigen::Index i = 0; i < u.rows(); ++i) {
          const Scalar up = u(i, p);
          const Scalar uq = u(i, q);
          u(i, p) = c * up - s * uq;
          u(i, q) = s * up + c * uq;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<Scalar> sigma(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) sigma[static_cast<std::size_t>(j)] = u.col(j).norm();
  std::sort(sigma.begin(), sigma.end(), [](Scalar x, Scalar y) { return x > y; });
  return sigma;
}

/// Extreme gains of x -> x * A over row vectors x: the square roots of the
/// extreme eigenvalues of A A^T. The lower gain is zero whenever A has more
/// rows than columns, since A A^T is then rank deficient.
template <typename Scalar>
struct GainBounds {
  Scalar lower{0};
  Scalar upper{0};
};

template <typename Derived>
GainBounds<typename Derived::Scalar> right_multiplication_gains(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  if (a.size() == 0) throw std::invalid_argument("right_multiplication_gains: empty matrix");
  const auto sigma = jacobi_singular_values(a);
  GainBounds<Scalar> g;
  g.upper = sigma.front();
  g.lower = a.rows() <= a.cols() ? sigma.back() : Scalar(0);
  return g;
}

}  // namespace trgrpo
