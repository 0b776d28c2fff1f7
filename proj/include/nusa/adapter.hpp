// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "nusa/digest.hpp"
#include "nusa/nullspace.hpp"
#include "nusa/spectra.hpp"

namespace nusa {

// Which parameters of ΔW = s·U M Vᵀ train.
//   core_only      M                (the null-space method)
//   core_and_v     M, V
//   core_u_v       M, U, V
//   plain_lowrank  U = B, V = Aᵀ    (standard LoRA, M pinned to I)
enum class Variant { core_only, core_and_v, core_u_v, plain_lowrank };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct TrainableMask {
  bool m_core = false;
  bool u_basis = false;
  bool v_basis = false;
};

TrainableMask trainable_mask(Variant v);

// Where the bases of an adapter came from. Only adapters whose bases are the
// frozen tail of a specific W carry a usable interference bound.
struct Provenance {
  Digest base_digest{};
  SubspaceMode mode = SubspaceMode::tail;
  double sigma_null_max = 0.0;
  Vector sigma_basis;  // singular values paired with the basis columns
};

struct Adapter {
  Matrix u_basis;  // m × r
  Matrix v_basis;  // n × r
  Matrix m_core;   // r × r
  double alpha = 1.0;
  Variant variant = Variant::core_only;
  std::optional<Provenance> provenance;

  Eigen::Index rank() const { return m_core.rows(); }
  Eigen::Index out_dim() const { return u_basis.rows(); }
  Eigen::Index in_dim() const { return v_basis.rows(); }
  // α/√r; zero for an inert rank-0 adapter.
  double scale() const;
  TrainableMask mask() const { return trainable_mask(variant); }
};

/// Null-space adapter from a plan of `w_base`: tail bases, zero core.
Adapter make_nullspace_adapter(const Matrix& w_base, const NullSpacePlan& plan, double alpha,
                               Variant variant = Variant::core_only);

/// Adapter on an arbitrary subspace selection (tail/top/random) of `w_base`.
Adapter make_subspace_adapter(const Matrix& w_base, const SvdFactorization<double>& svd, SubspaceMode mode,
                              Eigen::Index r, std::uint64_t seed, double alpha, Variant variant);

/// Standard LoRA: B ~ N(0, 1/m) in u_basis, A = 0 stored transposed in v_basis.
Adapter make_plain_lowrank(Eigen::Index m, Eigen::Index n, Eigen::Index r, double alpha, std::uint64_t seed);

/// s·U M Vᵀ.
Matrix delta_w(const Adapter& a);

/// (W + ΔW)·x, column-vector convention.
Matrix apply(const Adapter& a, const Matrix& w_base, const Matrix& x);

struct AdapterGrads {
  Matrix m_core;  // always sized r×r; zero if masked
  std::optional<Matrix> u_basis;
  std::optional<Matrix> v_basis;
};

/// s·Uᵀ G V for upstream G = ∂L/∂ΔW.
Matrix grad_core(const Adapter& a, const Matrix& upstream);

/// Gradients for every trainable parameter of the adapter's variant.
AdapterGrads grads(const Adapter& a, const Matrix& upstream);

/// W + ΔW.
Matrix merge(const Adapter& a, const Matrix& w_base);

// `bound` uses ‖M‖_F. It is not a valid bound for every M: Tr(Σ_n M) can reach
// σ_max^null·‖M‖_* (e.g. M = I_r gives r·σ against √r·σ). `nuclear_bound`
// uses ‖M‖_* and always holds.
struct Interference {
  double inner = 0.0;          // ⟨W, ΔW⟩_F
  double bound = 0.0;          // s·σ_max^null·‖M‖_F
  double nuclear_bound = 0.0;  // s·σ_max^null·‖M‖_*
  double trace = 0.0;          // s·Tr(Σ_n M)
  bool within_bound(double tol = 1e-9) const;
  bool within_nuclear_bound(double tol = 1e-9) const;
};

/// Sum of singular values.
double nuclear_norm(const Matrix& m);

/// Interference of a tail adapter with the weight it was planned from. Throws
/// ProvenanceError if the adapter lacks tail provenance or W does not match.
Interference interference(const Adapter& a, const Matrix& w_base);

/// Same, without re-hashing W (the caller vouches for provenance).
Interference interference_unchecked(const Adapter& a, const Matrix& w_base);

// Checkpoint: <stem>.u.nusa, <stem>.v.nusa, <stem>.m.nusa and <stem>.json with
// {variant, alpha, r, rho, seed}.
struct AdapterSidecar {
  double rho = 0.95;
  std::uint64_t seed = 0;
};

void save_adapter(const std::filesystem::path& dir, const std::string& stem, const Adapter& a,
                  const AdapterSidecar& meta);
Adapter load_adapter(const std::filesystem::path& dir, const std::string& stem, AdapterSidecar* meta = nullptr);

}  // namespace nusa
