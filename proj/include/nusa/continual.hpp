// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nusa/adapter.hpp"
#include "nusa/nn.hpp"
#include "nusa/nullspace.hpp"

namespace nusa {

/// splitmix64 finalizer; used to derive independent seeds from (run, task, layer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

enum class StreamKind { split_gaussians, permuted_features, rotated_moons };

std::string to_string(StreamKind k);
StreamKind parse_stream_kind(const std::string& name);

struct TaskStreamSpec {
  StreamKind kind = StreamKind::split_gaussians;
  int num_tasks = 5;
  int classes_per_task = 2;
  int samples_per_class_train = 100;
  int samples_per_class_test = 100;
  std::uint64_t seed = 0;
  int input_dim = 32;
  double separation = 1.5;  // class means ~ N(0, separation²/input_dim)
  double noise = 0.3;       // per-feature standard deviation around the mean

  void validate() const;
};

// One task's data. Labels are global (task t owns classes [t·C, (t+1)·C)).
struct Task {
  int index = 0;
  Matrix x_train;
  std::vector<int> y_train;
  Matrix x_test;
  std::vector<int> y_test;
  ClassWindow window;
};

std::vector<Task> generate_stream(const TaskStreamSpec& spec);

// Backbone pretraining on an auxiliary Gaussian classification problem whose
// classes are unrelated to the stream. steps = 0 keeps the random init.
struct PretrainSpec {
  int classes = 16;
  int samples_per_class = 200;
  int steps = 3000;
  int batch_size = 64;
  double learning_rate = 0.1;
  double weight_decay = 1e-3;
  double separation = 3.0;
  double noise = 0.3;
};

struct ModelSpec {
  std::vector<Eigen::Index> hidden{64, 64};
  double init_scale = 0.3;
  std::vector<int> adapted_layers{0, 1};  // indices into the hidden layers
  PretrainSpec pretrain;
};

/// Pretrained hidden stack plus a fresh random linear head over all stream classes.
Model build_backbone(const ModelSpec& spec, int input_dim, int total_classes, std::uint64_t seed);

struct AdapterSpec {
  Variant variant = Variant::core_only;
  SubspaceMode mode = SubspaceMode::tail;
  int r_max = 8;
  double rho = 0.95;
  double alpha = 2.0;
};

struct TrainingSpec {
  int iterations = 300;
  double learning_rate = 1.0;
  double warmup_fraction = 0.05;
  Schedule schedule = Schedule::cosine;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double weight_decay = 0.0;
  double label_smoothing = 0.0;
  double dropout = 0.0;
  double grad_clip = 1.0;  // joint gradient-norm cap per step; 0 disables
};

struct CycleConfig {
  AdapterSpec adapter;
  TrainingSpec training;
  std::vector<int> adapted_layers{0, 1};
  double check_tolerance = 1e-9;
};

// Interference of the merged update on one layer for one task.
struct LedgerEntry {
  int task_index = 0;
  std::string layer_id;
  Eigen::Index k = 0;
  Eigen::Index r = 0;
  double inner = 0.0;
  double bound = std::numeric_limits<double>::quiet_NaN();  // NaN when the bases carry no bound
  double nuclear_bound = std::numeric_limits<double>::quiet_NaN();
  double trace = std::numeric_limits<double>::quiet_NaN();
  double sigma_null_max = std::numeric_limits<double>::quiet_NaN();
  double core_norm = 0.0;
};

// Per-step monitoring over one task.
struct StepChecks {
  long lemma_checks = 0;
  long lemma_violations = 0;    // |inner| > s·σ_max^null·‖M‖_F + tol
  long nuclear_violations = 0;  // |inner| > s·σ_max^null·‖M‖_* + tol
  long trace_violations = 0;
  long constraint_checks = 0;
  long constraint_violations = 0;
  double worst_lemma_excess = -std::numeric_limits<double>::infinity();  // |inner| − bound
  double worst_nuclear_excess = -std::numeric_limits<double>::infinity();
  double worst_constraint = 0.0;  // ‖U_pᵀΔWV_p‖_F / max(1, ‖ΔW‖_F)
  double worst_trace_gap = 0.0;   // |inner − trace|

  void absorb(const StepChecks& other);
};

struct TaskRecord {
  int task_index = 0;
  std::vector<LedgerEntry> ledger;
  StepChecks checks;
  std::vector<double> losses;  // one per iteration
};

/// One task of the cycle: per adapted layer SVD → plan/select → adapter, train,
/// merge, discard. Layers with d − k = 0 stay frozen for the task.
TaskRecord run_task_cycle(Model& model, const Task& task, const CycleConfig& cfg, std::uint64_t seed);

// a[t][j]: accuracy on task j after finishing task t.
using AccuracyMatrix = std::vector<std::vector<double>>;

/// Requires one snapshot per task.
AccuracyMatrix evaluate_grid(const std::vector<Model>& snapshots, const std::vector<Task>& tasks);

struct Metrics {
  double transfer = std::numeric_limits<double>::quiet_NaN();
  double avg = 0.0;
  double last = 0.0;
  double forgetting = std::numeric_limits<double>::quiet_NaN();
};

/// Transfer: mean of a[t][j], j > t. Avg: mean of all entries. Last: mean of the
/// final row. Forgetting: mean over j < T of a[j][j] − a[T][j]. Undefined
/// quantities (T = 1) are NaN.
Metrics metrics(const AccuracyMatrix& a);

/// r95 / null@95 per listed layer for every snapshot (snapshot i has task_index i).
std::vector<SpectralSnapshot> spectral_trajectory(const std::vector<Model>& snapshots,
                                                  const std::vector<int>& layers);

struct ExperimentConfig {
  TaskStreamSpec stream;
  ModelSpec model;
  AdapterSpec adapter;
  TrainingSpec training;
  std::filesystem::path output_dir = "nusa_out";
};

CycleConfig cycle_config(const ExperimentConfig& cfg);

struct RunReport {
  std::uint64_t seed = 0;
  AccuracyMatrix accuracy;
  Metrics summary;
  std::vector<TaskRecord> tasks;
  std::vector<SpectralSnapshot> spectra;
  StepChecks checks;
  double cumulative_inner = 0.0;  // Σ |inner| over bounded ledger entries
  double cumulative_bound = 0.0;  // Σ bound over the same entries
  double cumulative_nuclear_bound = 0.0;
  bool theorem_holds = true;          // with the ‖M‖_F bound
  bool theorem_nuclear_holds = true;  // with the ‖M‖_* bound
  std::vector<std::string> warnings;

  std::vector<LedgerEntry> ledger() const;
};

/// Full run for one seed. `backbone` overrides the pretrained model (it must
/// match build_backbone's shapes); useful for reusing one backbone across
/// configurations.
RunReport run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const Model* backbone = nullptr);

/// Report writers. CSV values use round-trip precision so reruns are byte-identical.
void write_report_json(std::ostream& out, const ExperimentConfig& cfg, const RunReport& report,
                       const std::string& timestamp);
void write_metrics_csv(std::ostream& out, const ExperimentConfig& cfg, const std::vector<RunReport>& reports);
void write_spectra_csv(std::ostream& out, const std::vector<RunReport>& reports);
void write_ledger_csv(std::ostream& out, const std::vector<RunReport>& reports);

}  // namespace nusa
