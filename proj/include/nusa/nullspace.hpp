// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nusa/spectra.hpp"

namespace nusa {

/// Smallest k such that the first k squared singular values reach a `rho`
/// fraction of the total energy. Throws DegenerateSpectrumError for an
/// all-zero spectrum.
template <typename Derived>
Eigen::Index principal_dim(const Eigen::MatrixBase<Derived>& sigma, double rho) {
  using Scalar = typename Derived::Scalar;
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("principal_dim: rho must lie in (0, 1)");
  if (sigma.size() == 0) throw DegenerateSpectrumError("principal_dim: empty spectrum");
  Scalar total = Scalar(0);
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) < Scalar(0)) throw DegenerateSpectrumError("principal_dim: negative singular value");
    if (i > 0 && sigma(i) > sigma(i - 1)) throw DegenerateSpectrumError("principal_dim: spectrum not sorted");
    total += sigma(i) * sigma(i);
  }
  if (!(total > Scalar(0))) throw DegenerateSpectrumError("principal_dim: all-zero spectrum");
  const Scalar target = static_cast<Scalar>(rho) * total;
  Scalar cumulative = Scalar(0);
  for (Eigen::Index k = 0; k < sigma.size(); ++k) {
    cumulative += sigma(k) * sigma(k);
    if (cumulative >= target) return k + 1;
  }
  return sigma.size();
}

// Frozen null-space bases for one weight matrix: the last r singular
// directions, with r = min(d - k, r_max).
template <typename Scalar>
struct NullSpacePlanT {
  Eigen::Index k = 0;
  Eigen::Index r = 0;
  MatrixX<Scalar> u_null;  // m × r
  MatrixX<Scalar> v_null;  // n × r
  VectorX<Scalar> sigma_null;  // the r singular values paired with the bases
  Scalar sigma_null_max = Scalar(0);  // σ_{k+1}, or 0 when k = d
  double rho = 0.95;
  Eigen::Index r_max = 1;

  bool frozen() const { return r == 0; }
};

using NullSpacePlan = NullSpacePlanT<double>;

template <typename Scalar>
NullSpacePlanT<Scalar> plan_nullspace(const SvdFactorization<Scalar>& svd, double rho, Eigen::Index r_max) {
  if (r_max < 1) throw ConfigError("plan_nullspace: r_max must be >= 1");
  const Eigen::Index d = svd.sigma.size();
  NullSpacePlanT<Scalar> plan;
  plan.rho = rho;
  plan.r_max = r_max;
  plan.k = principal_dim(svd.sigma, rho);
  plan.r = std::min(d - plan.k, r_max);
  plan.sigma_null_max = plan.k < d ? svd.sigma(plan.k) : Scalar(0);
  plan.u_null = svd.u.rightCols(plan.r);
  plan.v_null = svd.v.rightCols(plan.r);
  plan.sigma_null = svd.sigma.tail(plan.r);
  return plan;
}

enum class SubspaceMode { tail, top, random };

std::string to_string(SubspaceMode mode);
SubspaceMode parse_subspace_mode(const std::string& name);

/// Seeded Haar-like orthonormal n×r basis: Q of the QR of a Gaussian matrix,
/// with column signs fixed so that diag(R) is positive.
Matrix random_orthonormal(Eigen::Index n, Eigen::Index r, std::uint64_t seed);

/// Bases for an adapter of rank r: the trailing (tail) or leading (top) singular
/// directions, or a seeded random orthonormal pair.
template <typename Scalar>
std::pair<MatrixX<Scalar>, MatrixX<Scalar>> select_subspace(const SvdFactorization<Scalar>& svd,
                                                            SubspaceMode mode, Eigen::Index r,
                                                            std::uint64_t seed) {
  const Eigen::Index d = svd.sigma.size();
  if (r < 0 || r > d) {
    throw ShapeError("select_subspace: rank " + std::to_string(r) + " exceeds d = " + std::to_string(d));
  }
  switch (mode) {
    case SubspaceMode::tail:
      return {svd.u.rightCols(r), svd.v.rightCols(r)};
    case SubspaceMode::top:
      return {svd.u.leftCols(r), svd.v.leftCols(r)};
    case SubspaceMode::random:
      // Independent streams for the two sides.
      return {random_orthonormal(svd.u.rows(), r, seed).template cast<Scalar>(),
              random_orthonormal(svd.v.rows(), r, seed ^ 0x9e3779b97f4a7c15ULL).template cast<Scalar>()};
  }
  throw ConfigError("select_subspace: unknown mode");
}

struct SpectralSnapshot {
  std::string layer_id;
  int task_index = 0;
  Eigen::Index r95 = 0;
  Eigen::Index null_at_95 = 0;
  double energy_total = 0.0;
  Eigen::Index d = 0;
};

SpectralSnapshot spectral_snapshot(const Matrix& w, const std::string& layer_id, int task_index);

void write_snapshots_csv(std::ostream& out, const std::vector<SpectralSnapshot>& snapshots);

}  // namespace nusa
