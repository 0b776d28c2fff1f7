// SPDX-License-Identifier: Apache-2.0
#include "nusa/continual.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "nusa/config.hpp"

namespace nusa {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string to_string(StreamKind k) {
  switch (k) {
    case StreamKind::split_gaussians: return "split_gaussians";
    case StreamKind::permuted_features: return "permuted_features";
    case StreamKind::rotated_moons: return "rotated_moons";
  }
  return "?";
}

StreamKind parse_stream_kind(const std::string& name) {
  if (name == "split_gaussians") return StreamKind::split_gaussians;
  if (name == "permuted_features") return StreamKind::permuted_features;
  if (name == "rotated_moons") return StreamKind::rotated_moons;
  throw ConfigError("unknown stream kind '" + name + "'");
}

void TaskStreamSpec::validate() const {
  if (num_tasks < 2) throw ConfigError("stream.num_tasks must be >= 2");
  if (classes_per_task < 2) throw ConfigError("stream.classes_per_task must be >= 2");
  if (samples_per_class_train < 1 || samples_per_class_test < 1) throw ConfigError("stream sample counts must be >= 1");
  if (input_dim < 2) throw ConfigError("stream.input_dim must be >= 2");
  if (!(separation > 0.0) || !(noise >= 0.0)) throw ConfigError("stream.separation must be > 0 and noise >= 0");
  if (kind == StreamKind::rotated_moons && classes_per_task != 2) {
    throw ConfigError("rotated_moons supports exactly 2 classes per task");
  }
}

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = sd * normal(rng);
  }
  return out;
}

// Samples are drawn class by class: rows [c·n, (c+1)·n) belong to class c.
Matrix sample_around(const Matrix& means, int per_class, double noise, std::mt19937_64& rng) {
  const Eigen::Index dim = means.cols();
  Matrix x = gaussian(means.rows() * per_class, dim, noise, rng);
  for (Eigen::Index c = 0; c < means.rows(); ++c) x.middleRows(c * per_class, per_class).rowwise() += means.row(c);
  return x;
}

std::vector<int> block_labels(int classes, int per_class, int offset) {
  std::vector<int> y;
  y.reserve(static_cast<std::size_t>(classes * per_class));
  for (int c = 0; c < classes; ++c) y.insert(y.end(), static_cast<std::size_t>(per_class), offset + c);
  return y;
}

Matrix moons(int per_class, double noise, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> normal(0.0, noise);
  Matrix p(2 * per_class, 2);
  for (int i = 0; i < per_class; ++i) {
    const double a = angle(rng);
    p(i, 0) = std::cos(a) - 0.5;
    p(i, 1) = std::sin(a) - 0.25;
  }
  for (int i = 0; i < per_class; ++i) {
    const double a = angle(rng);
    p(per_class + i, 0) = 0.5 - std::cos(a);
    p(per_class + i, 1) = 0.25 - std::sin(a);
  }
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    p(i, 0) += normal(rng);
    p(i, 1) += normal(rng);
  }
  return p;
}

}  // namespace

std::vector<Task> generate_stream(const TaskStreamSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const int c = spec.classes_per_task;
  const double mean_sd = spec.separation / std::sqrt(static_cast<double>(spec.input_dim));
  std::vector<Task> tasks(static_cast<std::size_t>(spec.num_tasks));
  for (int t = 0; t < spec.num_tasks; ++t) {
    tasks[t].index = t;
    tasks[t].window = ClassWindow{t * c, c};
    tasks[t].y_train = block_labels(c, spec.samples_per_class_train, t * c);
    tasks[t].y_test = block_labels(c, spec.samples_per_class_test, t * c);
  }
  switch (spec.kind) {
    case StreamKind::split_gaussians:
      for (auto& task : tasks) {
        const Matrix means = gaussian(c, spec.input_dim, mean_sd, rng);
        task.x_train = sample_around(means, spec.samples_per_class_train, spec.noise, rng);
        task.x_test = sample_around(means, spec.samples_per_class_test, spec.noise, rng);
      }
      break;
    case StreamKind::permuted_features: {
      const Matrix means = gaussian(c, spec.input_dim, mean_sd, rng);
      const Matrix base_train = sample_around(means, spec.samples_per_class_train, spec.noise, rng);
      const Matrix base_test = sample_around(means, spec.samples_per_class_test, spec.noise, rng);
      for (auto& task : tasks) {
        std::vector<int> perm(static_cast<std::size_t>(spec.input_dim));
        std::iota(perm.begin(), perm.end(), 0);
        if (task.index > 0) std::shuffle(perm.begin(), perm.end(), rng);
        task.x_train.resize(base_train.rows(), base_train.cols());
        task.x_test.resize(base_test.rows(), base_test.cols());
        for (int j = 0; j < spec.input_dim; ++j) {
          task.x_train.col(j) = base_train.col(perm[j]);
          task.x_test.col(j) = base_test.col(perm[j]);
        }
      }
      break;
    }
    case StreamKind::rotated_moons: {
      const Matrix embed = random_orthonormal(spec.input_dim, 2, rng());
      const Matrix base_train = moons(spec.samples_per_class_train, spec.noise, rng);
      const Matrix base_test = moons(spec.samples_per_class_test, spec.noise, rng);
      for (auto& task : tasks) {
        const double phi = std::numbers::pi * task.index / spec.num_tasks;
        Eigen::Matrix2d rot;
        rot << std::cos(phi), -std::sin(phi), std::sin(phi), std::cos(phi);
        const Matrix proj = spec.separation * embed * rot;  // input_dim × 2
        task.x_train = base_train * proj.transpose();
        task.x_test = base_test * proj.transpose();
      }
      break;
    }
  }
  return tasks;
}

namespace {

void fill_gaussian_layer(Layer& l, double scale, std::mt19937_64& rng) {
  l.weights = gaussian(l.out_dim(), l.in_dim(), scale / std::sqrt(static_cast<double>(l.in_dim())), rng);
  l.bias.setZero();
}

}  // namespace

Model build_backbone(const ModelSpec& spec, int input_dim, int total_classes, std::uint64_t seed) {
  if (spec.hidden.empty()) throw ConfigError("model.hidden must list at least one layer");
  const PretrainSpec& p = spec.pretrain;
  std::mt19937_64 rng(mix_seed(seed, 0));
  Model model = make_mlp(input_dim, spec.hidden, p.classes, spec.init_scale, mix_seed(seed, 1));
  Layer& head = model.layers.back();
  fill_gaussian_layer(head, 1.0, rng);
  if (p.steps > 0) {
    if (p.classes < 2 || p.samples_per_class < 1 || p.batch_size < 1) throw ConfigError("model.pretrain counts invalid");
    const Matrix means = gaussian(p.classes, input_dim, p.separation / std::sqrt(static_cast<double>(input_dim)), rng);
    const Matrix x = sample_around(means, p.samples_per_class, p.noise, rng);
    const std::vector<int> y = block_labels(p.classes, p.samples_per_class, 0);
    OptimizerState opt;
    opt.learning_rate = p.learning_rate;
    opt.warmup_fraction = 0.0;
    opt.schedule = Schedule::constant;
    opt.total_steps = p.steps;
    opt.weight_decay = p.weight_decay;
    opt.validate();
    std::uniform_int_distribution<Eigen::Index> pick(0, x.rows() - 1);
    Matrix xb(p.batch_size, input_dim);
    std::vector<int> yb(static_cast<std::size_t>(p.batch_size));
    LossOptions lo;
    lo.target = GradTarget::full;
    for (int it = 0; it < p.steps; ++it) {
      for (int i = 0; i < p.batch_size; ++i) {
        const Eigen::Index idx = pick(rng);
        xb.row(i) = x.row(idx);
        yb[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(idx)];
      }
      LossAndGrads lg = loss_and_grads(model, xb, yb, lo);
      lg.layers.back() = LayerGrads{};  // the auxiliary head stays fixed
      step(opt, model, lg.layers);
    }
  }
  Layer fresh;
  fresh.id = head.id;
  fresh.activation = Activation::none;
  fresh.weights.resize(total_classes, head.in_dim());
  fresh.bias = Vector::Zero(total_classes);
  fill_gaussian_layer(fresh, 1.0, rng);
  head = std::move(fresh);
  model.validate();
  return model;
}

void StepChecks::absorb(const StepChecks& o) {
  lemma_checks += o.lemma_checks;
  lemma_violations += o.lemma_violations;
  nuclear_violations += o.nuclear_violations;
  trace_violations += o.trace_violations;
  constraint_checks += o.constraint_checks;
  constraint_violations += o.constraint_violations;
  worst_lemma_excess = std::max(worst_lemma_excess, o.worst_lemma_excess);
  worst_nuclear_excess = std::max(worst_nuclear_excess, o.worst_nuclear_excess);
  worst_constraint = std::max(worst_constraint, o.worst_constraint);
  worst_trace_gap = std::max(worst_trace_gap, o.worst_trace_gap);
}

namespace {

struct LayerSlot {
  int layer = 0;
  Matrix w_before;
  Matrix u_principal;
  Matrix v_principal;
  Eigen::Index k = 0;
  bool bounded = false;  // tail bases that stay frozen
};

void check_step(const Adapter& a, const LayerSlot& slot, double tol, StepChecks& c) {
  const Interference inf = interference_unchecked(a, slot.w_before);
  ++c.lemma_checks;
  const double excess = std::abs(inf.inner) - inf.bound;
  c.worst_lemma_excess = std::max(c.worst_lemma_excess, excess);
  if (excess > tol) ++c.lemma_violations;
  const double nuclear_excess = std::abs(inf.inner) - inf.nuclear_bound;
  c.worst_nuclear_excess = std::max(c.worst_nuclear_excess, nuclear_excess);
  if (nuclear_excess > tol) ++c.nuclear_violations;
  const double gap = std::abs(inf.inner - inf.trace);
  c.worst_trace_gap = std::max(c.worst_trace_gap, gap);
  if (gap > tol * (1.0 + std::abs(inf.trace))) ++c.trace_violations;

  const Matrix dw = delta_w(a);
  const double leak = (slot.u_principal.transpose() * dw * slot.v_principal).norm() / std::max(1.0, dw.norm());
  ++c.constraint_checks;
  c.worst_constraint = std::max(c.worst_constraint, leak);
  if (leak > tol) ++c.constraint_violations;
}

}  // namespace

TaskRecord run_task_cycle(Model& model, const Task& task, const CycleConfig& cfg, std::uint64_t seed) {
  model.validate();
  if (task.x_train.cols() != model.input_dim()) throw ShapeError("run_task_cycle: task features do not match model input");
  if (task.x_train.rows() == 0) throw DataError("run_task_cycle: empty training set");
  const AdapterSpec& as = cfg.adapter;
  const TrainingSpec& ts = cfg.training;
  TaskRecord record;
  record.task_index = task.index;

  std::vector<LayerSlot> slots;
  for (int li : cfg.adapted_layers) {
    if (li < 0 || li >= static_cast<int>(model.layers.size())) {
      throw ConfigError("adapted layer index " + std::to_string(li) + " out of range");
    }
    Layer& layer = model.layers[static_cast<std::size_t>(li)];
    const Matrix& w = layer.weights;
    const auto svd = svd_thin(w);
    const NullSpacePlan plan = plan_nullspace(svd, as.rho, as.r_max);
    const std::uint64_t layer_seed = mix_seed(seed, 1000 + static_cast<std::uint64_t>(li));
    LayerSlot slot;
    slot.layer = li;
    slot.w_before = w;
    slot.k = plan.k;
    if (as.variant == Variant::plain_lowrank) {
      const Eigen::Index r = std::min<Eigen::Index>(as.r_max, svd.sigma.size());
      layer.adapter = make_plain_lowrank(w.rows(), w.cols(), r, as.alpha, layer_seed);
    } else {
      if (plan.frozen()) continue;
      if (as.mode == SubspaceMode::tail) {
        layer.adapter = make_nullspace_adapter(w, plan, as.alpha, as.variant);
      } else {
        layer.adapter = make_subspace_adapter(w, svd, as.mode, plan.r, layer_seed, as.alpha, as.variant);
      }
      slot.bounded = as.mode == SubspaceMode::tail && as.variant == Variant::core_only;
      if (slot.bounded) {
        slot.u_principal = svd.u.leftCols(plan.k);
        slot.v_principal = svd.v.leftCols(plan.k);
      }
    }
    slots.push_back(std::move(slot));
  }

  if (ts.iterations > 0 && !slots.empty()) {
    OptimizerState opt;
    opt.learning_rate = ts.learning_rate;
    opt.warmup_fraction = ts.warmup_fraction;
    opt.schedule = ts.schedule;
    opt.total_steps = ts.iterations;
    opt.kind = ts.optimizer;
    opt.weight_decay = ts.weight_decay;
    opt.validate();
    if (ts.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
    std::mt19937_64 rng(mix_seed(seed, 7));
    std::mt19937_64 drop_rng(mix_seed(seed, 8));
    std::uniform_int_distribution<Eigen::Index> pick(0, task.x_train.rows() - 1);
    Matrix xb(ts.batch_size, task.x_train.cols());
    std::vector<int> yb(static_cast<std::size_t>(ts.batch_size));
    LossOptions lo;
    lo.target = GradTarget::adapters;
    lo.window = task.window;
    lo.label_smoothing = ts.label_smoothing;
    lo.dropout = Dropout{ts.dropout, &drop_rng};
    record.losses.reserve(static_cast<std::size_t>(ts.iterations));
    for (int it = 0; it < ts.iterations; ++it) {
      for (int i = 0; i < ts.batch_size; ++i) {
        const Eigen::Index idx = pick(rng);
        xb.row(i) = task.x_train.row(idx);
        yb[static_cast<std::size_t>(i)] = task.y_train[static_cast<std::size_t>(idx)];
      }
      LossAndGrads lg = loss_and_grads(model, xb, yb, lo);
      clip_grad_norm(lg.layers, ts.grad_clip);
      step(opt, model, lg.layers);
      record.losses.push_back(lg.loss);
      for (const auto& slot : slots) {
        if (slot.bounded) check_step(*model.layers[static_cast<std::size_t>(slot.layer)].adapter, slot, cfg.check_tolerance, record.checks);
      }
    }
  }

  for (const auto& slot : slots) {
    Layer& layer = model.layers[static_cast<std::size_t>(slot.layer)];
    const Adapter& a = *layer.adapter;
    LedgerEntry e;
    e.task_index = task.index;
    e.layer_id = layer.id;
    e.k = slot.k;
    e.r = a.rank();
    e.core_norm = a.m_core.norm();
    if (slot.bounded) {
      const Interference inf = interference_unchecked(a, slot.w_before);
      e.inner = inf.inner;
      e.bound = inf.bound;
      e.nuclear_bound = inf.nuclear_bound;
      e.trace = inf.trace;
      e.sigma_null_max = a.provenance->sigma_null_max;
    } else {
      e.inner = frobenius_inner(slot.w_before, delta_w(a));
    }
    record.ledger.push_back(std::move(e));
    if (ts.iterations > 0) layer.weights = merge(a, slot.w_before);
  }
  model.clear_adapters();
  return record;
}

AccuracyMatrix evaluate_grid(const std::vector<Model>& snapshots, const std::vector<Task>& tasks) {
  if (snapshots.size() != tasks.size()) {
    throw ProtocolError("evaluate_grid: " + std::to_string(snapshots.size()) + " snapshots for " +
                        std::to_string(tasks.size()) + " tasks");
  }
  AccuracyMatrix a(tasks.size(), std::vector<double>(tasks.size(), 0.0));
  for (std::size_t t = 0; t < snapshots.size(); ++t) {
    for (std::size_t j = 0; j < tasks.size(); ++j) {
      a[t][j] = accuracy(snapshots[t], tasks[j].x_test, tasks[j].y_test, tasks[j].window);
    }
  }
  return a;
}

Metrics metrics(const AccuracyMatrix& a) {
  const std::size_t n = a.size();
  if (n == 0) throw ProtocolError("metrics: empty accuracy grid");
  for (const auto& row : a) {
    if (row.size() != n) throw ProtocolError("metrics: accuracy grid is not square");
    for (double v : row) {
      if (!std::isfinite(v)) throw ProtocolError("metrics: accuracy grid has missing entries");
    }
  }
  Metrics m;
  double all = 0.0;
  double upper = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < n; ++j) {
      all += a[t][j];
      if (j > t) upper += a[t][j];
    }
  }
  m.avg = all / static_cast<double>(n * n);
  m.last = std::accumulate(a[n - 1].begin(), a[n - 1].end(), 0.0) / static_cast<double>(n);
  if (n > 1) {
    m.transfer = upper / static_cast<double>(n * (n - 1) / 2);
    double drop = 0.0;
    for (std::size_t j = 0; j + 1 < n; ++j) drop += a[j][j] - a[n - 1][j];
    m.forgetting = drop / static_cast<double>(n - 1);
  }
  return m;
}

std::vector<SpectralSnapshot> spectral_trajectory(const std::vector<Model>& snapshots, const std::vector<int>& layers) {
  std::vector<SpectralSnapshot> out;
  for (int li : layers) {
    for (std::size_t t = 0; t < snapshots.size(); ++t) {
      const auto& model_layers = snapshots[t].layers;
      if (li < 0 || li >= static_cast<int>(model_layers.size())) throw ConfigError("spectral_trajectory: bad layer index");
      const Layer& l = model_layers[static_cast<std::size_t>(li)];
      out.push_back(spectral_snapshot(l.weights, l.id, static_cast<int>(t)));
    }
  }
  return out;
}

CycleConfig cycle_config(const ExperimentConfig& cfg) {
  CycleConfig c;
  c.adapter = cfg.adapter;
  c.training = cfg.training;
  c.adapted_layers = cfg.model.adapted_layers;
  return c;
}

std::vector<LedgerEntry> RunReport::ledger() const {
  std::vector<LedgerEntry> out;
  for (const auto& t : tasks) out.insert(out.end(), t.ledger.begin(), t.ledger.end());
  return out;
}

RunReport run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const Model* backbone) {
  TaskStreamSpec stream = cfg.stream;
  stream.seed = mix_seed(cfg.stream.seed, seed);
  const std::vector<Task> tasks = generate_stream(stream);
  const int total_classes = stream.num_tasks * stream.classes_per_task;
  Model model = backbone ? *backbone : build_backbone(cfg.model, stream.input_dim, total_classes, mix_seed(seed, 1));
  model.validate();
  if (model.input_dim() != stream.input_dim || model.classes() != total_classes) {
    throw ShapeError("run_experiment: backbone does not match the stream");
  }
  const CycleConfig cc = cycle_config(cfg);

  RunReport report;
  report.seed = seed;
  std::vector<Model> history{model};
  for (const Task& task : tasks) {
    report.tasks.push_back(run_task_cycle(model, task, cc, mix_seed(seed, 100 + static_cast<std::uint64_t>(task.index))));
    report.checks.absorb(report.tasks.back().checks);
    history.push_back(model);
  }
  report.accuracy = evaluate_grid(std::vector<Model>(history.begin() + 1, history.end()), tasks);
  report.summary = metrics(report.accuracy);
  report.spectra = spectral_trajectory(history, cc.adapted_layers);

  // Theorem check per layer and in total.
  struct Sums {
    double inner = 0.0, bound = 0.0, nuclear = 0.0;
  };
  std::vector<std::pair<std::string, Sums>> per_layer;
  for (const auto& t : report.tasks) {
    for (const auto& e : t.ledger) {
      if (std::isnan(e.bound)) continue;
      report.cumulative_inner += std::abs(e.inner);
      report.cumulative_bound += e.bound;
      report.cumulative_nuclear_bound += e.nuclear_bound;
      auto it = std::find_if(per_layer.begin(), per_layer.end(), [&](const auto& p) { return p.first == e.layer_id; });
      if (it == per_layer.end()) {
        per_layer.push_back({e.layer_id, Sums{}});
        it = per_layer.end() - 1;
      }
      it->second.inner += std::abs(e.inner);
      it->second.bound += e.bound;
      it->second.nuclear += e.nuclear_bound;
    }
  }
  const double tol = cc.check_tolerance;
  auto holds = [tol](double inner, double bound) { return inner <= bound + tol; };
  report.theorem_holds = holds(report.cumulative_inner, report.cumulative_bound);
  report.theorem_nuclear_holds = holds(report.cumulative_inner, report.cumulative_nuclear_bound);
  for (const auto& [id, sums] : per_layer) {
    report.theorem_holds = report.theorem_holds && holds(sums.inner, sums.bound);
    report.theorem_nuclear_holds = report.theorem_nuclear_holds && holds(sums.inner, sums.nuclear);
  }

  for (const auto& s : report.spectra) {
    if (s.task_index > 0 && s.null_at_95 < 2 * cfg.adapter.r_max) {
      report.warnings.push_back("capacity: layer " + s.layer_id + " after task " + std::to_string(s.task_index - 1) +
                                " has null_at_95 = " + std::to_string(s.null_at_95) + " < 2r = " +
                                std::to_string(2 * cfg.adapter.r_max));
    }
  }
  return report;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::ordered_json checks_json(const StepChecks& c) {
  nlohmann::ordered_json j;
  j["lemma_checks"] = c.lemma_checks;
  j["lemma_violations"] = c.lemma_violations;
  j["nuclear_violations"] = c.nuclear_violations;
  j["trace_violations"] = c.trace_violations;
  j["constraint_checks"] = c.constraint_checks;
  j["constraint_violations"] = c.constraint_violations;
  j["worst_lemma_excess"] = c.lemma_checks > 0 ? nlohmann::ordered_json(c.worst_lemma_excess) : nlohmann::ordered_json();
  j["worst_nuclear_excess"] = c.lemma_checks > 0 ? nlohmann::ordered_json(c.worst_nuclear_excess) : nlohmann::ordered_json();
  j["worst_constraint"] = c.worst_constraint;
  j["worst_trace_gap"] = c.worst_trace_gap;
  return j;
}

}  // namespace

void write_report_json(std::ostream& out, const ExperimentConfig& cfg, const RunReport& r, const std::string& timestamp) {
  nlohmann::ordered_json j;
  j["generated_at"] = timestamp;
  j["config"] = config_to_json(cfg);
  j["seed"] = r.seed;
  j["accuracy"] = r.accuracy;
  j["transfer"] = r.summary.transfer;
  j["avg"] = r.summary.avg;
  j["last"] = r.summary.last;
  j["forgetting"] = r.summary.forgetting;
  auto& ledger = j["ledger"] = nlohmann::ordered_json::array();
  for (const auto& e : r.ledger()) {
    nlohmann::ordered_json row;
    row["task_index"] = e.task_index;
    row["layer_id"] = e.layer_id;
    row["k"] = e.k;
    row["r"] = e.r;
    row["inner"] = e.inner;
    row["bound"] = e.bound;
    row["nuclear_bound"] = e.nuclear_bound;
    row["trace"] = e.trace;
    row["sigma_null_max"] = e.sigma_null_max;
    row["core_norm"] = e.core_norm;
    ledger.push_back(std::move(row));
  }
  j["cumulative_inner"] = r.cumulative_inner;
  j["cumulative_bound"] = r.cumulative_bound;
  j["cumulative_nuclear_bound"] = r.cumulative_nuclear_bound;
  j["theorem_holds"] = r.theorem_holds;
  j["theorem_nuclear_holds"] = r.theorem_nuclear_holds;
  j["checks"] = checks_json(r.checks);
  auto& spectra = j["spectra"] = nlohmann::ordered_json::array();
  for (const auto& s : r.spectra) {
    spectra.push_back({{"layer_id", s.layer_id}, {"task_index", s.task_index}, {"r95", s.r95},
                       {"null_at_95", s.null_at_95}, {"energy_total", s.energy_total}});
  }
  j["warnings"] = r.warnings;
  out << j.dump(2) << '\n';
}

void write_metrics_csv(std::ostream& out, const ExperimentConfig& cfg, const std::vector<RunReport>& reports) {
  out << "seed,variant,mode,r_max,rho,alpha,transfer,avg,last,forgetting,lemma_violations,nuclear_violations,"
         "constraint_violations,theorem_holds,theorem_nuclear_holds\n";
  for (const auto& r : reports) {
    out << r.seed << ',' << to_string(cfg.adapter.variant) << ',' << to_string(cfg.adapter.mode) << ','
        << cfg.adapter.r_max << ',' << num(cfg.adapter.rho) << ',' << num(cfg.adapter.alpha) << ','
        << num(r.summary.transfer) << ',' << num(r.summary.avg) << ',' << num(r.summary.last) << ','
        << num(r.summary.forgetting) << ',' << r.checks.lemma_violations << ',' << r.checks.nuclear_violations << ','
        << r.checks.constraint_violations << ',' << (r.theorem_holds ? 1 : 0) << ',' << (r.theorem_nuclear_holds ? 1 : 0)
        << '\n';
  }
}

void write_spectra_csv(std::ostream& out, const std::vector<RunReport>& reports) {
  out << "seed,layer_id,task_index,r95,null_at_95\n";
  for (const auto& r : reports) {
    for (const auto& s : r.spectra) {
      out << r.seed << ',' << s.layer_id << ',' << s.task_index << ',' << s.r95 << ',' << s.null_at_95 << '\n';
    }
  }
}

void write_ledger_csv(std::ostream& out, const std::vector<RunReport>& reports) {
  out << "seed,task_index,layer_id,k,r,inner,bound,nuclear_bound,trace,sigma_null_max,core_norm\n";
  for (const auto& r : reports) {
    for (const auto& e : r.ledger()) {
      out << r.seed << ',' << e.task_index << ',' << e.layer_id << ',' << e.k << ',' << e.r << ',' << num(e.inner) << ','
          << num(e.bound) << ',' << num(e.nuclear_bound) << ',' << num(e.trace) << ',' << num(e.sigma_null_max) << ',' << num(e.core_norm) << '\n';
    }
  }
}

}  // namespace nusa
