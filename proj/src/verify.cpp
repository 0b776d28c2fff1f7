// SPDX-License-Identifier: Apache-2.0
#include "nusa/verify.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <random>

#include "nusa/adapter.hpp"
#include "nusa/continual.hpp"
#include "nusa/nn.hpp"
#include "nusa/nullspace.hpp"

namespace nusa {

Matrix random_test_matrix(Eigen::Index m, Eigen::Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int kind = static_cast<int>(seed % 3);
  if (kind == 0) {
    Matrix w(m, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < m; ++i) w(i, j) = normal(rng);
    }
    return w;
  }
  const Eigen::Index d = std::min(m, n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector sigma(d);
  const double decay = 0.5 + 0.49 * unit(rng);
  const double top = 0.5 + 4.5 * unit(rng);
  for (Eigen::Index i = 0; i < d; ++i) sigma(i) = top * std::pow(decay, static_cast<double>(i));
  if (kind == 2) {
    const Eigen::Index rank = 1 + static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(d));
    sigma.tail(d - rank).setZero();
  }
  const Matrix u = random_orthonormal(m, d, rng());
  const Matrix v = random_orthonormal(n, d, rng());
  return u * sigma.asDiagonal() * v.transpose();
}

namespace {

using Rng = std::mt19937_64;

constexpr std::array<double, 5> kRhos{0.80, 0.90, 0.95, 0.99, 0.999};

Eigen::Index uniform_index(Rng& rng, Eigen::Index lo, Eigen::Index hi) {
  return std::uniform_int_distribution<Eigen::Index>(lo, hi)(rng);
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng) {
  std::normal_distribution<double> normal(0.0, sd);
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = normal(rng);
  }
  return out;
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

void record(PropertyResult& p, bool ok, std::uint64_t seed, double measure, const std::string& witness) {
  ++p.checks;
  p.worst = std::max(p.worst, measure);
  if (ok) return;
  if (p.failures == 0) {
    p.first_failing_seed = seed;
    p.witness = witness;
  }
  ++p.failures;
}

// Singular values from the eigenvalues of the smaller Gram matrix, in long double.
Eigen::Matrix<long double, Eigen::Dynamic, 1> gram_singular_values(const Matrix& w) {
  using LMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  const LMatrix wl = w.cast<long double>();
  const LMatrix g = w.rows() >= w.cols() ? LMatrix(wl.transpose() * wl) : LMatrix(wl * wl.transpose());
  Eigen::SelfAdjointEigenSolver<LMatrix> eig(g, Eigen::EigenvaluesOnly);
  const auto& lambda = eig.eigenvalues();
  const Eigen::Index d = lambda.size();
  Eigen::Matrix<long double, Eigen::Dynamic, 1> s(d);
  for (Eigen::Index i = 0; i < d; ++i) s(i) = std::sqrt(std::max(lambda(d - 1 - i), 0.0L));
  return s;
}

PropertyResult svd_oracle(const VerifyOptions& o) {
  PropertyResult p;
  p.name = "svd_oracle";
  for (int i = 0; i < o.trials; ++i) {
    const std::uint64_t seed = mix_seed(o.seed, 1'000'000 + static_cast<std::uint64_t>(i));
    Rng rng(seed);
    const Eigen::Index m = uniform_index(rng, 1, 64);
    const Eigen::Index n = uniform_index(rng, 1, 64);
    const Matrix w = random_test_matrix(m, n, rng());
    const auto svd = svd_thin(w);
    const double wn = w.norm();
    const double res = reconstruction_residual(svd, w) / std::max(wn, 1e-300);
    const double orth = std::max(orthonormality_error(svd.u), orthonormality_error(svd.v));
    bool sorted = true;
    for (Eigen::Index k = 1; k < svd.sigma.size(); ++k) sorted = sorted && svd.sigma(k) <= svd.sigma(k - 1);
    const auto oracle = gram_singular_values(w);
    const double smax = static_cast<double>(oracle(0));
    double gap = 0.0;
    for (Eigen::Index k = 0; k < oracle.size(); ++k) {
      gap = std::max(gap, std::abs(svd.sigma(k) - static_cast<double>(oracle(k))) / std::max(smax, 1e-300));
    }
    const bool ok = res <= 1e-10 && orth <= 1e-10 && sorted && gap <= 1e-8 && (svd.sigma.array() >= 0.0).all();
    record(p, ok, seed, std::max({res, orth, gap}),
           fmt("%gx%g", static_cast<double>(m), static_cast<double>(n)) +
               fmt(" residual=%.3e orth=%.3e sigma_gap=%.3e", res, orth, gap) + (sorted ? "" : " unsorted"));
  }
  return p;
}

PropertyResult orthogonality(const VerifyOptions& o) {
  PropertyResult p;
  p.name = "orthogonality";
  for (int i = 0; i < o.trials; ++i) {
    const std::uint64_t seed = mix_seed(o.seed, 2'000'000 + static_cast<std::uint64_t>(i));
    Rng rng(seed);
    const Eigen::Index m = uniform_index(rng, 2, 48);
    const Eigen::Index n = uniform_index(rng, 2, 48);
    const Matrix w = random_test_matrix(m, n, rng());
    const double rho = kRhos[static_cast<std::size_t>(uniform_index(rng, 0, 4))];
    const auto svd = svd_thin(w);
    const Eigen::Index d = svd.sigma.size();
    const auto plan = plan_nullspace(svd, rho, d);  // uncapped so the two blocks span U
    const Matrix up = svd.u.leftCols(plan.k);
    const Matrix vp = svd.v.leftCols(plan.k);
    const double orth = std::max(orthonormality_error(plan.u_null), orthonormality_error(plan.v_null));
    const double cross = std::max((up.transpose() * plan.u_null).norm(), (vp.transpose() * plan.v_null).norm());
    const Matrix projector = up * up.transpose() + plan.u_null * plan.u_null.transpose();
    const double complement = (projector * svd.u - svd.u).norm();
    const bool ok = orth <= 1e-10 && cross <= 1e-10 && complement <= 1e-9 && plan.k + plan.r == d;
    record(p, ok, seed, std::max({orth, cross, complement}),
           fmt("k=%g r=%g", static_cast<double>(plan.k), static_cast<double>(plan.r)) +
               fmt(" orth=%.3e cross=%.3e complement=%.3e", orth, cross, complement));
  }
  return p;
}

// `nuclear` selects the ‖M‖_* bound instead of the ‖M‖_F one.
PropertyResult lemma1(const VerifyOptions& o, bool nuclear) {
  PropertyResult p;
  p.name = nuclear ? "lemma1_nuclear" : "lemma1";
  for (int i = 0; i < o.trials; ++i) {
    const std::uint64_t seed = mix_seed(o.seed, 3'000'000 + static_cast<std::uint64_t>(i));
    Rng rng(seed);
    const Eigen::Index m = uniform_index(rng, 2, 32);
    const Eigen::Index n = uniform_index(rng, 2, 32);
    const Matrix w = random_test_matrix(m, n, rng());
    const double rho = kRhos[static_cast<std::size_t>(uniform_index(rng, 0, 4))];
    const auto svd = svd_thin(w);
    const Eigen::Index d = svd.sigma.size();
    // Every fourth trial is tight: M = c·e₁e₁ᵀ on the leading null direction.
    const bool tight = i % 4 == 0;
    const Eigen::Index r_max = tight ? d : uniform_index(rng, 1, d);
    const auto plan = plan_nullspace(svd, rho, r_max);
    if (plan.frozen()) {
      record(p, true, seed, 0.0, "");
      continue;
    }
    const double alpha = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
    Adapter a = make_nullspace_adapter(w, plan, alpha);
    if (tight) {
      a.m_core.setZero();
      a.m_core(0, 0) = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
    } else {
      a.m_core = gaussian(plan.r, plan.r, 1.0, rng);
    }
    const Interference inf = interference(a, w);
    const double bound = o.bound_scale * (nuclear ? inf.nuclear_bound : inf.bound);
    const double excess = std::abs(inf.inner) - bound;
    const double trace_gap = std::abs(inf.inner - inf.trace);
    const bool ok = excess <= 1e-9 && trace_gap <= 1e-9;
    record(p, ok, seed, std::max(excess, trace_gap),
           fmt("inner=%.6e bound=%.6e trace=%.6e", inf.inner, bound, inf.trace) +
               (tight ? " (tight)" : ""));
  }
  return p;
}

PropertyResult theorem1(const VerifyOptions& o, bool nuclear) {
  PropertyResult p;
  p.name = nuclear ? "theorem1_nuclear" : "theorem1";
  for (int i = 0; i < o.trials; ++i) {
    const std::uint64_t seed = mix_seed(o.seed, 4'000'000 + static_cast<std::uint64_t>(i));
    Rng rng(seed);
    const Eigen::Index m = uniform_index(rng, 2, 24);
    const Eigen::Index n = uniform_index(rng, 2, 24);
    Matrix w = random_test_matrix(m, n, rng());
    const int tasks = static_cast<int>(uniform_index(rng, 3, 5));
    const double rho = kRhos[static_cast<std::size_t>(uniform_index(rng, 0, 4))];
    double inner_sum = 0.0;
    double bound_sum = 0.0;
    for (int t = 0; t < tasks; ++t) {
      const auto svd = svd_thin(w);
      const auto plan = plan_nullspace(svd, rho, uniform_index(rng, 1, svd.sigma.size()));
      if (plan.frozen()) continue;
      Adapter a = make_nullspace_adapter(w, plan, 1.0);
      if (i % 4 == 0) {
        a.m_core.setZero();
        a.m_core(0, 0) = 0.5;
      } else {
        a.m_core = gaussian(plan.r, plan.r, 0.5, rng);
      }
      const Interference inf = interference(a, w);
      inner_sum += std::abs(inf.inner);
      bound_sum += o.bound_scale * (nuclear ? inf.nuclear_bound : inf.bound);
      w = merge(a, w);
    }
    const double excess = inner_sum - bound_sum;
    record(p, excess <= 1e-9, seed, excess,
           fmt("tasks=%g cumulative_inner=%.6e cumulative_bound=%.6e", tasks, inner_sum, bound_sum));
  }
  return p;
}

PropertyResult merge_equivalence(const VerifyOptions& o) {
  PropertyResult p;
  p.name = "merge_equivalence";
  for (int i = 0; i < o.trials; ++i) {
    const std::uint64_t seed = mix_seed(o.seed, 5'000'000 + static_cast<std::uint64_t>(i));
    Rng rng(seed);
    const Eigen::Index m = uniform_index(rng, 2, 32);
    const Eigen::Index n = uniform_index(rng, 2, 32);
    const Matrix w = random_test_matrix(m, n, rng());
    const auto svd = svd_thin(w);
    const Eigen::Index r = uniform_index(rng, 1, svd.sigma.size());
    const auto mode = static_cast<SubspaceMode>(i % 3);
    Adapter a = make_subspace_adapter(w, svd, mode, r, rng(), 2.0, Variant::core_only);
    a.m_core = gaussian(r, r, 1.0, rng);
    const Matrix x = gaussian(n, uniform_index(rng, 1, 16), 1.0, rng);
    const Matrix lhs = apply(a, w, x);
    const Matrix rhs = merge(a, w) * x;
    const double rel = (lhs - rhs).norm() / std::max(lhs.norm(), 1e-300);
    record(p, rel <= 1e-12, seed, rel, fmt("relative_gap=%.3e", rel));
  }
  return p;
}

// ‖a − b‖_F / max(‖b‖_F, 1e-3): relative with a floor for near-zero gradients.
double rel_error(const Matrix& analytic, const Matrix& numeric) {
  return (analytic - numeric).norm() / std::max(numeric.norm(), 1e-3);
}

template <typename Loss>
Matrix central_difference(Matrix& param, Loss&& loss, double h = 1e-5) {
  Matrix g(param.rows(), param.cols());
  for (Eigen::Index i = 0; i < param.rows(); ++i) {
    for (Eigen::Index j = 0; j < param.cols(); ++j) {
      const double keep = param(i, j);
      param(i, j) = keep + h;
      const double up = loss();
      param(i, j) = keep - h;
      const double down = loss();
      param(i, j) = keep;
      g(i, j) = (up - down) / (2.0 * h);
    }
  }
  return g;
}

double adapter_gradient_error(Variant variant, Rng& rng) {
  const Eigen::Index dim = 8;
  const Eigen::Index r = uniform_index(rng, 1, 4);
  Adapter a;
  a.variant = variant;
  a.alpha = 1.5;
  a.u_basis = random_orthonormal(dim, r, rng());
  a.v_basis = random_orthonormal(dim, r, rng());
  a.m_core = gaussian(r, r, 1.0, rng);
  const Matrix target = gaussian(dim, dim, 1.0, rng);
  auto loss = [&] { return 0.5 * (delta_w(a) - target).squaredNorm(); };
  const AdapterGrads g = grads(a, delta_w(a) - target);
  const TrainableMask mask = a.mask();
  double worst = 0.0;
  if (mask.m_core) worst = std::max(worst, rel_error(g.m_core, central_difference(a.m_core, loss)));
  if (mask.u_basis) worst = std::max(worst, rel_error(*g.u_basis, central_difference(a.u_basis, loss)));
  if (mask.v_basis) worst = std::max(worst, rel_error(*g.v_basis, central_difference(a.v_basis, loss)));
  return worst;
}

// Smallest |pre-activation| of the ReLU layers; finite differences are only
// valid away from the kinks.
double relu_margin(const Model& model, const Matrix& x) {
  ForwardCache cache;
  forward(model, x, &cache);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (model.layers[l].activation == Activation::relu) margin = std::min(margin, cache.pre[l].cwiseAbs().minCoeff());
  }
  return margin;
}

double model_gradient_error(GradTarget target, Rng& rng) {
  Model model = make_mlp(8, {8, 8}, 3, 1.0, rng());
  for (auto& l : model.layers) l.bias = gaussian(l.out_dim(), 1, 0.1, rng).col(0);
  if (target == GradTarget::adapters) {
    const std::array<Variant, 4> variants{Variant::core_only, Variant::core_and_v, Variant::core_u_v, Variant::plain_lowrank};
    for (std::size_t l = 0; l + 1 < model.layers.size(); ++l) {
      Adapter a;
      a.variant = variants[rng() % variants.size()];
      a.alpha = 2.0;
      a.u_basis = random_orthonormal(8, 3, rng());
      a.v_basis = random_orthonormal(8, 3, rng());
      a.m_core = gaussian(3, 3, 0.5, rng);
      model.layers[l].adapter = a;
    }
  }
  Matrix x;
  for (int attempt = 0;; ++attempt) {
    x = gaussian(6, 8, 1.0, rng);
    if (relu_margin(model, x) > 1e-3) break;
    if (attempt == 100) throw NumericalError("gradient check: no kink-free batch found");
  }
  std::vector<int> y(6);
  for (auto& v : y) v = static_cast<int>(rng() % 3);
  LossOptions lo;
  lo.target = target;
  const LossAndGrads lg = loss_and_grads(model, x, y, lo);
  auto loss = [&] { return loss_and_grads(model, x, y, lo).loss; };
  double worst = 0.0;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Layer& layer = model.layers[l];
    const LayerGrads& g = lg.layers[l];
    if (target == GradTarget::full) {
      worst = std::max(worst, rel_error(*g.weights, central_difference(layer.weights, loss)));
      Matrix b = layer.bias;
      auto bias_loss = [&] {
        layer.bias = b.col(0);
        return loss();
      };
      worst = std::max(worst, rel_error(*g.bias, central_difference(b, bias_loss)));
      layer.bias = b.col(0);
    } else if (layer.adapter) {
      Adapter& a = *layer.adapter;
      const TrainableMask mask = a.mask();
      if (mask.m_core) worst = std::max(worst, rel_error(g.adapter->m_core, central_difference(a.m_core, loss)));
      if (mask.u_basis) worst = std::max(worst, rel_error(*g.adapter->u_basis, central_difference(a.u_basis, loss)));
      if (mask.v_basis) worst = std::max(worst, rel_error(*g.adapter->v_basis, central_difference(a.v_basis, loss)));
    }
  }
  return worst;
}

PropertyResult gradients(const VerifyOptions& o) {
  PropertyResult p;
  p.name = "gradients";
  const std::array<Variant, 4> variants{Variant::core_only, Variant::core_and_v, Variant::core_u_v, Variant::plain_lowrank};
  for (int i = 0; i < o.trials; ++i) {
    const std::uint64_t seed = mix_seed(o.seed, 6'000'000 + static_cast<std::uint64_t>(i));
    Rng rng(seed);
    const Variant v = variants[static_cast<std::size_t>(i) % variants.size()];
    const double adapter_err = adapter_gradient_error(v, rng);
    const GradTarget target = i % 2 == 0 ? GradTarget::full : GradTarget::adapters;
    const double model_err = model_gradient_error(target, rng);
    const double err = std::max(adapter_err, model_err);
    record(p, err <= 1e-5, seed, err,
           "variant=" + to_string(v) + fmt(" adapter_rel=%.3e model_rel=%.3e", adapter_err, model_err));
  }
  return p;
}

}  // namespace

std::vector<PropertyResult> run_verify(const VerifyOptions& opts, const std::function<void(const std::string&)>& progress) {
  if (opts.trials < 1) throw ConfigError("verify: trials must be >= 1");
  using Runner = std::function<PropertyResult(const VerifyOptions&)>;
  const std::vector<std::pair<const char*, Runner>> battery{
      {"svd_oracle", svd_oracle},
      {"orthogonality", orthogonality},
      {"lemma1", [](const VerifyOptions& o) { return lemma1(o, false); }},
      {"lemma1_nuclear", [](const VerifyOptions& o) { return lemma1(o, true); }},
      {"theorem1", [](const VerifyOptions& o) { return theorem1(o, false); }},
      {"theorem1_nuclear", [](const VerifyOptions& o) { return theorem1(o, true); }},
      {"merge_equivalence", merge_equivalence},
      {"gradients", gradients}};
  std::vector<PropertyResult> out;
  for (const auto& [name, run] : battery) {
    if (progress) progress(name);
    out.push_back(run(opts));
  }
  return out;
}

}  // namespace nusa
