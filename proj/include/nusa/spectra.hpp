// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "nusa/errors.hpp"

namespace nusa {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& a) {
  return a.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& a, const std::string& what) {
  if (!a.allFinite()) throw NumericalError(what + ": non-finite entry");
}

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename DA, typename DB>
void require_same_shape(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b,
                        const std::string& what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(what + ": shape " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
  }
}

/// Dense product a*b. Throws ShapeError on inner-dimension mismatch and
/// NumericalError when the product overflows.
template <typename DA, typename DB>
MatrixX<typename DA::Scalar> matmul(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a.rows(), a.cols()) + " * " +
                     shape_string(b.rows(), b.cols()));
  }
  MatrixX<typename DA::Scalar> out = a * b;
  require_finite(out, "matmul");
  return out;
}

/// Tr(AᵀB), the elementwise sum of products.
template <typename DA, typename DB>
typename DA::Scalar frobenius_inner(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  require_same_shape(a, b, "frobenius_inner");
  return a.cwiseProduct(b).sum();
}

/// Spectral norm of QᵀQ − I.
template <typename Derived>
typename Derived::Scalar orthonormality_error(const Eigen::MatrixBase<Derived>& q) {
  using Scalar = typename Derived::Scalar;
  if (q.cols() == 0) return Scalar(0);
  MatrixX<Scalar> gram = q.transpose() * q;
  gram.diagonal().array() -= Scalar(1);
  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> eig(gram, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().cwiseAbs().maxCoeff();
}

// Thin SVD W = U diag(sigma) Vᵀ with U m×d, V n×d, d = min(m, n).
template <typename Scalar>
struct SvdFactorization {
  MatrixX<Scalar> u;
  VectorX<Scalar> sigma;
  MatrixX<Scalar> v;
  int sweeps = 0;

  Eigen::Index rank_bound() const { return sigma.size(); }

  MatrixX<Scalar> reconstruct() const { return u * sigma.asDiagonal() * v.transpose(); }
};

struct SvdOptions {
  int max_sweeps = 60;
  // A column pair is orthogonal once |a_pᵀa_q| <= tolerance * ‖a_p‖‖a_q‖.
  double tolerance = 1e-12;
};

namespace detail {

// Fills zero columns of q (flagged in `missing`) with unit vectors orthogonal to
// every other column. Each one is the standard basis vector with the largest
// residual after projecting out the columns in place, which is at least
// 1/sqrt(m) in norm.
template <typename Scalar>
void complete_orthonormal(MatrixX<Scalar>& q, const std::vector<bool>& missing) {
  const Eigen::Index m = q.rows();
  std::vector<bool> pending = missing;
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (!pending[static_cast<std::size_t>(j)]) continue;
    VectorX<Scalar> best;
    Scalar best_norm = Scalar(-1);
    for (Eigen::Index candidate = 0; candidate < m; ++candidate) {
      VectorX<Scalar> e = VectorX<Scalar>::Unit(m, candidate);
      // Two passes of Gram-Schmidt against the columns already in place.
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index k = 0; k < q.cols(); ++k) {
          if (pending[static_cast<std::size_t>(k)]) continue;
          e -= q.col(k).dot(e) * q.col(k);
        }
      }
      const Scalar norm = e.norm();
      if (norm > best_norm) {
        best_norm = norm;
        best = std::move(e);
      }
    }
    if (!(best_norm > Scalar(0.5) / std::sqrt(static_cast<Scalar>(m)))) {
      throw NumericalError("svd_thin: cannot complete orthonormal basis");
    }
    q.col(j) = best / best_norm;
    pending[static_cast<std::size_t>(j)] = false;
  }
}

// One-sided Jacobi on a tall (m >= n) matrix.
template <typename Scalar>
SvdFactorization<Scalar> jacobi_tall(MatrixX<Scalar> a, const SvdOptions& opts) {
  using std::abs;
  using std::sqrt;
  const Eigen::Index m = a.rows();
  const Eigen::Index n = a.cols();
  const Scalar eps = std::numeric_limits<Scalar>::epsilon();
  const Scalar tol = std::max(static_cast<Scalar>(opts.tolerance), Scalar(4) * eps);
  // Columns below this norm carry only rounding noise; rotating them never settles.
  const Scalar negligible =
      Scalar(16) * eps * std::sqrt(static_cast<Scalar>(std::max(m, n))) * a.norm();

  MatrixX<Scalar> v = MatrixX<Scalar>::Identity(n, n);
  int sweep = 0;
  Scalar worst = Scalar(0);
  bool converged = (n < 2);
  while (!converged) {
    if (sweep >= opts.max_sweeps) {
      throw ConvergenceError("svd_thin: no convergence after " + std::to_string(sweep) + " sweeps",
                             static_cast<double>(worst));
    }
    ++sweep;
    worst = Scalar(0);
    bool rotated = false;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar alpha = a.col(p).squaredNorm();
        const Scalar beta = a.col(q).squaredNorm();
        if (sqrt(alpha) <= negligible || sqrt(beta) <= negligible) continue;
        const Scalar gamma = a.col(p).dot(a.col(q));
        const Scalar rel = abs(gamma) / sqrt(alpha * beta);
        worst = std::max(worst, rel);
        if (rel <= tol) continue;
        rotated = true;
        const Scalar zeta = (beta - alpha) / (Scalar(2) * gamma);
        const Scalar t = (zeta >= Scalar(0) ? Scalar(1) : Scalar(-1)) /
                         (abs(zeta) + sqrt(Scalar(1) + zeta * zeta));
        const Scalar c = Scalar(1) / sqrt(Scalar(1) + t * t);
        const Scalar s = c * t;
        for (Eigen::Index i = 0; i < m; ++i) {
          const Scalar ap = a(i, p);
          const Scalar aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const Scalar vp = v(i, p);
          const Scalar vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    converged = !rotated;
  }

  VectorX<Scalar> norms(n);
  for (Eigen::Index j = 0; j < n; ++j) norms(j) = a.col(j).norm();

  // Descending by sigma; equal values keep their original column order.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return norms(x) > norms(y); });

  SvdFactorization<Scalar> out;
  out.sweeps = sweep;
  out.u.setZero(m, n);
  out.v.resize(n, n);
  out.sigma.resize(n);
  std::vector<bool> missing(static_cast<std::size_t>(n), false);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index src = order[static_cast<std::size_t>(j)];
    out.sigma(j) = norms(src);
    out.v.col(j) = v.col(src);
    if (norms(src) > negligible) {
      out.u.col(j) = a.col(src) / norms(src);
    } else {
      missing[static_cast<std::size_t>(j)] = true;
    }
  }
  complete_orthonormal(out.u, missing);
  return out;
}

}  // namespace detail

/// Thin SVD by cyclic one-sided Jacobi.
///
/// Singular values come back non-increasing (ties keep column order). Each
/// column of U is signed so that its largest-magnitude entry is non-negative,
/// with the matching V column flipped alongside; the output is therefore a
/// deterministic function of the input. Throws ConvergenceError carrying the
/// worst remaining relative off-diagonal when `max_sweeps` is exhausted.
template <typename Derived>
SvdFactorization<typename Derived::Scalar> svd_thin(const Eigen::MatrixBase<Derived>& w,
                                                    const SvdOptions& opts = {}) {
  using Scalar = typename Derived::Scalar;
  if (w.rows() < 1 || w.cols() < 1) throw ShapeError("svd_thin: empty matrix");
  require_finite(w, "svd_thin");

  SvdFactorization<Scalar> out;
  if (w.rows() >= w.cols()) {
    out = detail::jacobi_tall<Scalar>(MatrixX<Scalar>(w), opts);
  } else {
    out = detail::jacobi_tall<Scalar>(MatrixX<Scalar>(w.transpose()), opts);
    std::swap(out.u, out.v);
  }

  for (Eigen::Index j = 0; j < out.u.cols(); ++j) {
    Eigen::Index pivot = 0;
    out.u.col(j).cwiseAbs().maxCoeff(&pivot);
    if (out.u(pivot, j) < Scalar(0)) {
      out.u.col(j) = -out.u.col(j);
      out.v.col(j) = -out.v.col(j);
    }
  }
  return out;
}

/// ‖W − U diag(σ) Vᵀ‖_F.
template <typename Scalar, typename Derived>
Scalar reconstruction_residual(const SvdFactorization<Scalar>& svd, const Eigen::MatrixBase<Derived>& w) {
  return (w - svd.reconstruct()).norm();
}

}  // namespace nusa
