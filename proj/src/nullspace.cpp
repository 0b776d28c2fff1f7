// SPDX-License-Identifier: Apache-2.0
#include "nusa/nullspace.hpp"

#include "nusa/errors.hpp"

namespace nusa {

std::string to_string(SubspaceMode mode) {
  switch (mode) {
    case SubspaceMode::tail: return "tail";
    case SubspaceMode::top: return "top";
    case SubspaceMode::random: return "random";
  }
  return "?";
}

SubspaceMode parse_subspace_mode(const std::string& name) {
  if (name == "tail") return SubspaceMode::tail;
  if (name == "top") return SubspaceMode::top;
  if (name == "random") return SubspaceMode::random;
  throw ConfigError("unknown subspace mode '" + name + "'");
}

Matrix random_orthonormal(Eigen::Index n, Eigen::Index r, std::uint64_t seed) {
  if (r > n) throw ShapeError("random_orthonormal: r > n");
  if (r == 0) return Matrix(n, 0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(n, r);
  // Fill column by column so the draw order does not depend on storage order.
  for (Eigen::Index j = 0; j < r; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) g(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, r);
  const Matrix rmat = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < r; ++j) {
    if (rmat(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

SpectralSnapshot spectral_snapshot(const Matrix& w, const std::string& layer_id, int task_index) {
  const auto svd = svd_thin(w);
  SpectralSnapshot snap;
  snap.layer_id = layer_id;
  snap.task_index = task_index;
  snap.d = svd.sigma.size();
  snap.r95 = principal_dim(svd.sigma, 0.95);
  snap.null_at_95 = snap.d - snap.r95;
  snap.energy_total = svd.sigma.squaredNorm();
  return snap;
}

void write_snapshots_csv(std::ostream& out, const std::vector<SpectralSnapshot>& snapshots) {
  out << "layer_id,task_index,r95,null_at_95\n";
  for (const auto& s : snapshots) {
    out << s.layer_id << ',' << s.task_index << ',' << s.r95 << ',' << s.null_at_95 << '\n';
  }
}

}  // namespace nusa
