// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>

#include "nusa/adapter.hpp"
#include "oracles.hpp"

using namespace nusa;

namespace {

Adapter random_adapter(Eigen::Index m, Eigen::Index n, Eigen::Index r, Variant v, std::uint64_t seed) {
  Adapter a;
  a.u_basis = oracle::gaussian(m, r, seed);
  a.v_basis = oracle::gaussian(n, r, seed + 1);
  a.m_core = oracle::gaussian(r, r, seed + 2);
  a.alpha = 2.0;
  a.variant = v;
  return a;
}

Adapter unit_adapter(Eigen::Index m, Eigen::Index n, double c) {
  Adapter a;
  a.u_basis = Matrix::Zero(m, 1);
  a.u_basis(0, 0) = 1.0;
  a.v_basis = Matrix::Zero(n, 1);
  a.v_basis(0, 0) = 1.0;
  a.m_core = Matrix::Constant(1, 1, c);
  a.alpha = 1.0;
  return a;
}

// L = ½‖ΔW − T‖² so that ∂L/∂ΔW = ΔW − T.
double quadratic_loss(const Adapter& a, const Matrix& target) {
  return 0.5 * (delta_w(a) - target).squaredNorm();
}

}  // namespace

TEST_CASE("scale is alpha over root r") {
  const Adapter a = random_adapter(6, 5, 4, Variant::core_only, 1);
  CHECK(a.scale() == doctest::Approx(1.0));
  CHECK(trainable_mask(Variant::core_only).u_basis == false);
  CHECK(trainable_mask(Variant::core_and_v).v_basis == true);
  CHECK(trainable_mask(Variant::core_u_v).u_basis == true);
  CHECK(parse_variant(to_string(Variant::plain_lowrank)) == Variant::plain_lowrank);
  CHECK_THROWS_AS(parse_variant("full"), ConfigError);
}

TEST_CASE("delta_w examples") {
  const Matrix w = oracle::gaussian(6, 6, 2);
  const auto plan = plan_nullspace(svd_thin(w), 0.5, 3);
  const Adapter fresh = make_nullspace_adapter(w, plan, 2.0);
  CHECK(delta_w(fresh).isZero(0.0));

  const Matrix d = delta_w(unit_adapter(3, 4, 2.5));
  CHECK(d(0, 0) == 2.5);
  CHECK(d.cwiseAbs().sum() == 2.5);

  const Adapter r = random_adapter(6, 6, 3, Variant::core_only, 3);
  const Matrix want = r.scale() * oracle::naive_matmul(oracle::naive_matmul(r.u_basis, r.m_core), Matrix(r.v_basis.transpose()));
  CHECK((delta_w(r) - want).norm() <= 1e-12 * want.norm());

  Adapter bad = r;
  bad.m_core = Matrix::Zero(2, 2);
  CHECK_THROWS_AS(delta_w(bad), ShapeError);
}

TEST_CASE("apply examples") {
  const Matrix w = oracle::gaussian(5, 4, 4);
  const Matrix x = oracle::gaussian(4, 3, 5);
  const auto plan = plan_nullspace(svd_thin(w), 0.5, 2);
  CHECK(apply(make_nullspace_adapter(w, plan, 1.0), w, x) == matmul(w, x));

  const Adapter a = random_adapter(5, 4, 2, Variant::core_only, 6);
  CHECK(apply(a, w, Matrix(Matrix::Zero(4, 3))).isZero(0.0));
  const Matrix want = oracle::naive_matmul(w + delta_w(a), x);
  CHECK((apply(a, w, x) - want).norm() <= 1e-12 * want.norm());
  CHECK_THROWS_AS(apply(a, w, Matrix(Matrix::Zero(5, 3))), ShapeError);
}

TEST_CASE("grad_core examples") {
  const Adapter a = random_adapter(8, 8, 3, Variant::core_only, 7);
  CHECK(grad_core(a, Matrix(Matrix::Zero(8, 8))).isZero(0.0));

  const Adapter u = unit_adapter(4, 4, 0.0);
  const Matrix g = oracle::gaussian(4, 4, 8);
  CHECK(grad_core(u, g)(0, 0) == doctest::Approx(u.scale() * g(0, 0)));
  CHECK_THROWS_AS(grad_core(a, Matrix(Matrix::Zero(8, 7))), ShapeError);
}

TEST_CASE("adapter gradients match central differences for every variant") {
  const Matrix target = oracle::gaussian(8, 8, 9);
  for (Variant v : {Variant::core_only, Variant::core_and_v, Variant::core_u_v, Variant::plain_lowrank}) {
    CAPTURE(to_string(v));
    Adapter a = random_adapter(8, 8, 3, v, 10);
    const AdapterGrads g = grads(a, delta_w(a) - target);
    auto loss = [&] { return quadratic_loss(a, target); };
    const auto mask = a.mask();
    if (mask.m_core) CHECK(oracle::relative(g.m_core, oracle::central_difference(a.m_core, loss)) <= 1e-6);
    CHECK(g.u_basis.has_value() == mask.u_basis);
    CHECK(g.v_basis.has_value() == mask.v_basis);
    if (mask.u_basis) CHECK(oracle::relative(*g.u_basis, oracle::central_difference(a.u_basis, loss)) <= 1e-6);
    if (mask.v_basis) CHECK(oracle::relative(*g.v_basis, oracle::central_difference(a.v_basis, loss)) <= 1e-6);
  }
}

TEST_CASE("merge examples") {
  const Matrix w = oracle::gaussian(6, 5, 11);
  const auto plan = plan_nullspace(svd_thin(w), 0.5, 2);
  CHECK(merge(make_nullspace_adapter(w, plan, 1.0), w) == w);

  const Adapter a1 = random_adapter(6, 5, 2, Variant::core_only, 12);
  const Adapter a2 = random_adapter(6, 5, 3, Variant::core_only, 13);
  const Matrix x = oracle::gaussian(5, 7, 14);
  const Matrix merged = merge(a1, w);
  const Matrix via_apply = apply(a1, w, x);
  CHECK((merged * x - via_apply).norm() <= 1e-12 * via_apply.norm());

  const Matrix ab = merge(a2, merge(a1, w));
  const Matrix ba = merge(a1, merge(a2, w));
  const Matrix sum = w + delta_w(a1) + delta_w(a2);
  CHECK((ab - ba).norm() <= 1e-12 * sum.norm());
  CHECK((ab - sum).norm() <= 1e-12 * sum.norm());
}

TEST_CASE("interference examples") {
  const Matrix w = oracle::gaussian(12, 12, 15);
  const auto plan = plan_nullspace(svd_thin(w), 0.9, 4);
  Adapter a = make_nullspace_adapter(w, plan, 2.0);
  const auto zero = interference(a, w);
  CHECK(zero.inner == 0.0);
  CHECK(zero.bound == 0.0);

  a.m_core = oracle::gaussian(plan.r, plan.r, 16);
  const auto inf = interference(a, w);
  const double trace = a.scale() * (Matrix(plan.sigma_null.asDiagonal()) * a.m_core).trace();
  CHECK(std::abs(inf.inner - trace) <= 1e-10 * (1.0 + std::abs(trace)));
  CHECK(std::abs(inf.trace - trace) <= 1e-12 * (1.0 + std::abs(trace)));
  CHECK(inf.within_nuclear_bound());
  CHECK(inf.bound == doctest::Approx(a.scale() * plan.sigma_null_max * a.m_core.norm()));

  const Vector u = oracle::gaussian(10, 1, 17).col(0), v = oracle::gaussian(8, 1, 18).col(0);
  const Matrix low = u * v.transpose();
  const auto lp = plan_nullspace(svd_thin(low), 0.95, 4);
  Adapter b = make_nullspace_adapter(low, lp, 1.0);
  b.m_core = oracle::gaussian(lp.r, lp.r, 19);
  CHECK(std::abs(interference(b, low).inner) <= 1e-10);
}

TEST_CASE("the Frobenius-norm bound can be exceeded while the nuclear bound holds") {
  // Equal null singular values with M = I: the trace is r·σ while the stated
  // bound gives √r·σ.
  Vector s(6);
  s << 5, 4, 3, 1, 1, 1;
  const Matrix w = oracle::with_spectrum(6, 6, s, 20);
  const auto plan = plan_nullspace(svd_thin(w), 0.9, 3);
  REQUIRE(plan.r == 3);
  Adapter a = make_nullspace_adapter(w, plan, 1.0);
  a.m_core = Matrix::Identity(3, 3);
  const auto inf = interference(a, w);
  CHECK(inf.inner == doctest::Approx(a.scale() * 3.0).epsilon(1e-9));
  CHECK_FALSE(inf.within_bound());
  CHECK(inf.within_nuclear_bound());
}

TEST_CASE("interference requires matching tail provenance") {
  const Matrix w = oracle::gaussian(8, 8, 21);
  const auto svd = svd_thin(w);
  const auto plan = plan_nullspace(svd, 0.9, 2);
  const Adapter a = make_nullspace_adapter(w, plan, 1.0);
  Matrix other = w;
  other(0, 0) += 1e-12;
  CHECK_THROWS_AS(interference(a, other), ProvenanceError);
  CHECK_THROWS_AS(interference(random_adapter(8, 8, 2, Variant::core_only, 22), w), ProvenanceError);
  const Adapter top = make_subspace_adapter(w, svd, SubspaceMode::top, 2, 0, 1.0, Variant::core_only);
  CHECK_THROWS_AS(interference(top, w), ProvenanceError);
}

TEST_CASE("core_only training leaves the frozen bases bitwise unchanged") {
  const Matrix w = oracle::gaussian(8, 8, 23);
  const auto plan = plan_nullspace(svd_thin(w), 0.8, 3);
  Adapter a = make_nullspace_adapter(w, plan, 2.0);
  const Digest du = matrix_digest(a.u_basis), dv = matrix_digest(a.v_basis);
  const Matrix target = oracle::gaussian(8, 8, 24);
  for (int i = 0; i < 20; ++i) {
    const AdapterGrads g = grads(a, delta_w(a) - target);
    CHECK_FALSE(g.u_basis.has_value());
    CHECK_FALSE(g.v_basis.has_value());
    a.m_core -= 0.1 * g.m_core;
  }
  CHECK(matrix_digest(a.u_basis) == du);
  CHECK(matrix_digest(a.v_basis) == dv);
  CHECK_FALSE(a.m_core.isZero());
}

TEST_CASE("plain low-rank initialisation keeps the update at zero") {
  const Adapter a = make_plain_lowrank(10, 6, 3, 2.0, 5);
  CHECK(delta_w(a).isZero(0.0));
  CHECK_FALSE(a.u_basis.isZero());
  CHECK(a.u_basis.rows() == 10);
  CHECK(a.v_basis.rows() == 6);
  CHECK_THROWS_AS(make_plain_lowrank(3, 3, 4, 1.0, 0), ShapeError);
}

TEST_CASE("adapter checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "nusa_adapter_ckpt";
  std::filesystem::remove_all(dir);
  const Adapter a = random_adapter(5, 4, 2, Variant::core_and_v, 25);
  save_adapter(dir, "layer0", a, {0.99, 7});
  AdapterSidecar meta;
  const Adapter b = load_adapter(dir, "layer0", &meta);
  CHECK(b.u_basis == a.u_basis);
  CHECK(b.v_basis == a.v_basis);
  CHECK(b.m_core == a.m_core);
  CHECK(b.variant == a.variant);
  CHECK(b.alpha == a.alpha);
  CHECK(meta.rho == 0.99);
  CHECK(meta.seed == 7);
  CHECK_THROWS_AS(load_adapter(dir, "missing"), IoError);
  std::filesystem::remove_all(dir);
}
