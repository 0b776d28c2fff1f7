// SPDX-License-Identifier: Apache-2.0
#include "nusa/adapter.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "nusa/matrix_io.hpp"

namespace nusa {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::core_only: return "core_only";
    case Variant::core_and_v: return "core_and_v";
    case Variant::core_u_v: return "core_u_v";
    case Variant::plain_lowrank: return "plain_lowrank";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "core_only") return Variant::core_only;
  if (name == "core_and_v") return Variant::core_and_v;
  if (name == "core_u_v") return Variant::core_u_v;
  if (name == "plain_lowrank") return Variant::plain_lowrank;
  throw ConfigError("unknown adapter variant '" + name + "'");
}

TrainableMask trainable_mask(Variant v) {
  switch (v) {
    case Variant::core_only: return {true, false, false};
    case Variant::core_and_v: return {true, false, true};
    case Variant::core_u_v: return {true, true, true};
    case Variant::plain_lowrank: return {false, true, true};
  }
  return {};
}

double Adapter::scale() const {
  const auto r = rank();
  return r == 0 ? 0.0 : alpha / std::sqrt(static_cast<double>(r));
}

namespace {

void check_shapes(const Adapter& a) {
  const auto r = a.rank();
  if (a.m_core.cols() != r || a.u_basis.cols() != r || a.v_basis.cols() != r) {
    throw ShapeError("adapter: inconsistent rank (U " + shape_string(a.u_basis.rows(), a.u_basis.cols()) +
                     ", M " + shape_string(a.m_core.rows(), a.m_core.cols()) + ", V " +
                     shape_string(a.v_basis.rows(), a.v_basis.cols()) + ")");
  }
}

void check_base(const Adapter& a, const Matrix& w_base, const char* what) {
  check_shapes(a);
  if (w_base.rows() != a.out_dim() || w_base.cols() != a.in_dim()) {
    throw ShapeError(std::string(what) + ": adapter is " + shape_string(a.out_dim(), a.in_dim()) +
                     ", weight is " + shape_string(w_base.rows(), w_base.cols()));
  }
}

}  // namespace

Adapter make_nullspace_adapter(const Matrix& w_base, const NullSpacePlan& plan, double alpha, Variant variant) {
  if (variant == Variant::plain_lowrank) throw ConfigError("plain_lowrank has no null-space form");
  if (plan.u_null.rows() != w_base.rows() || plan.v_null.rows() != w_base.cols()) {
    throw ShapeError("make_nullspace_adapter: plan does not match weight shape");
  }
  Adapter a;
  a.u_basis = plan.u_null;
  a.v_basis = plan.v_null;
  a.m_core = Matrix::Zero(plan.r, plan.r);
  a.alpha = alpha;
  a.variant = variant;
  a.provenance = Provenance{matrix_digest(w_base), SubspaceMode::tail, plan.sigma_null_max, plan.sigma_null};
  return a;
}

Adapter make_subspace_adapter(const Matrix& w_base, const SvdFactorization<double>& svd, SubspaceMode mode,
                              Eigen::Index r, std::uint64_t seed, double alpha, Variant variant) {
  if (variant == Variant::plain_lowrank) throw ConfigError("plain_lowrank has no subspace form");
  auto [u, v] = select_subspace(svd, mode, r, seed);
  Adapter a;
  a.u_basis = std::move(u);
  a.v_basis = std::move(v);
  a.m_core = Matrix::Zero(r, r);
  a.alpha = alpha;
  a.variant = variant;
  Provenance p;
  p.base_digest = matrix_digest(w_base);
  p.mode = mode;
  const Eigen::Index d = svd.sigma.size();
  if (mode == SubspaceMode::tail) {
    p.sigma_basis = svd.sigma.tail(r);
    p.sigma_null_max = r > 0 ? svd.sigma(d - r) : 0.0;
  } else if (mode == SubspaceMode::top) {
    p.sigma_basis = svd.sigma.head(r);
    p.sigma_null_max = r > 0 ? svd.sigma(0) : 0.0;
  }
  a.provenance = std::move(p);
  return a;
}

Adapter make_plain_lowrank(Eigen::Index m, Eigen::Index n, Eigen::Index r, double alpha, std::uint64_t seed) {
  if (r < 0 || r > std::min(m, n)) throw ShapeError("make_plain_lowrank: bad rank");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(m)));
  Adapter a;
  a.u_basis.resize(m, r);
  for (Eigen::Index j = 0; j < r; ++j) {
    for (Eigen::Index i = 0; i < m; ++i) a.u_basis(i, j) = normal(rng);
  }
  a.v_basis = Matrix::Zero(n, r);
  a.m_core = Matrix::Identity(r, r);
  a.alpha = alpha;
  a.variant = Variant::plain_lowrank;
  return a;
}

Matrix delta_w(const Adapter& a) {
  check_shapes(a);
  if (a.rank() == 0) return Matrix::Zero(a.out_dim(), a.in_dim());
  Matrix out = a.scale() * (a.u_basis * (a.m_core * a.v_basis.transpose()));
  require_finite(out, "delta_w");
  return out;
}

Matrix apply(const Adapter& a, const Matrix& w_base, const Matrix& x) {
  check_base(a, w_base, "apply");
  if (x.rows() != w_base.cols()) {
    throw ShapeError("apply: input has " + std::to_string(x.rows()) + " rows, weight has " +
                     std::to_string(w_base.cols()) + " columns");
  }
  Matrix out = w_base * x;
  if (a.rank() > 0) out.noalias() += a.scale() * (a.u_basis * (a.m_core * (a.v_basis.transpose() * x)));
  require_finite(out, "apply");
  return out;
}

Matrix grad_core(const Adapter& a, const Matrix& upstream) {
  check_shapes(a);
  if (upstream.rows() != a.out_dim() || upstream.cols() != a.in_dim()) {
    throw ShapeError("grad_core: upstream is " + shape_string(upstream.rows(), upstream.cols()));
  }
  return a.scale() * (a.u_basis.transpose() * upstream * a.v_basis);
}

AdapterGrads grads(const Adapter& a, const Matrix& upstream) {
  const auto mask = a.mask();
  AdapterGrads g;
  g.m_core = mask.m_core ? grad_core(a, upstream) : Matrix::Zero(a.rank(), a.rank());
  if (!mask.m_core) check_shapes(a);
  const double s = a.scale();
  if (mask.u_basis) g.u_basis = s * (upstream * (a.v_basis * a.m_core.transpose()));
  if (mask.v_basis) g.v_basis = s * (upstream.transpose() * (a.u_basis * a.m_core));
  return g;
}

Matrix merge(const Adapter& a, const Matrix& w_base) {
  check_base(a, w_base, "merge");
  if (a.rank() == 0) return w_base;
  Matrix out = w_base + delta_w(a);
  require_finite(out, "merge");
  return out;
}

bool Interference::within_bound(double tol) const {
  return std::abs(inner) <= bound + tol * (1.0 + std::abs(bound));
}

bool Interference::within_nuclear_bound(double tol) const {
  return std::abs(inner) <= nuclear_bound + tol * (1.0 + std::abs(nuclear_bound));
}

double nuclear_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  return svd_thin(m).sigma.sum();
}

Interference interference_unchecked(const Adapter& a, const Matrix& w_base) {
  check_base(a, w_base, "interference");
  if (!a.provenance || a.provenance->mode != SubspaceMode::tail) {
    throw ProvenanceError("interference: adapter bases are not a null-space (tail) selection");
  }
  const auto& p = *a.provenance;
  Interference out;
  if (a.rank() == 0) return out;
  const double s = a.scale();
  out.inner = frobenius_inner(w_base, delta_w(a));
  out.bound = s * p.sigma_null_max * a.m_core.norm();
  out.nuclear_bound = s * p.sigma_null_max * nuclear_norm(a.m_core);
  out.trace = s * p.sigma_basis.dot(a.m_core.diagonal());
  return out;
}

Interference interference(const Adapter& a, const Matrix& w_base) {
  if (!a.provenance) throw ProvenanceError("interference: adapter has no provenance");
  if (a.provenance->base_digest != matrix_digest(w_base)) {
    throw ProvenanceError("interference: adapter bases were not planned from this weight matrix");
  }
  return interference_unchecked(a, w_base);
}

void save_adapter(const std::filesystem::path& dir, const std::string& stem, const Adapter& a,
                  const AdapterSidecar& meta) {
  check_shapes(a);
  std::filesystem::create_directories(dir);
  write_nusa(dir / (stem + ".u.nusa"), a.u_basis);
  write_nusa(dir / (stem + ".v.nusa"), a.v_basis);
  write_nusa(dir / (stem + ".m.nusa"), a.m_core);
  nlohmann::ordered_json j;
  j["variant"] = to_string(a.variant);
  j["alpha"] = a.alpha;
  j["r"] = a.rank();
  j["rho"] = meta.rho;
  j["seed"] = meta.seed;
  std::ofstream f(dir / (stem + ".json"));
  if (!f) throw IoError("cannot write adapter sidecar for " + stem);
  f << j.dump(2) << '\n';
}

Adapter load_adapter(const std::filesystem::path& dir, const std::string& stem, AdapterSidecar* meta) {
  std::ifstream f(dir / (stem + ".json"));
  if (!f) throw IoError("cannot open adapter sidecar for " + stem);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("adapter sidecar: " + std::string(e.what()));
  }
  Adapter a;
  a.variant = parse_variant(j.at("variant").get<std::string>());
  a.alpha = j.at("alpha").get<double>();
  a.u_basis = read_nusa(dir / (stem + ".u.nusa"));
  a.v_basis = read_nusa(dir / (stem + ".v.nusa"));
  a.m_core = read_nusa(dir / (stem + ".m.nusa"));
  check_shapes(a);
  if (j.at("r").get<Eigen::Index>() != a.rank()) throw IoError("adapter sidecar: rank mismatch");
  if (meta) {
    meta->rho = j.at("rho").get<double>();
    meta->seed = j.at("seed").get<std::uint64_t>();
  }
  return a;
}

}  // namespace nusa
