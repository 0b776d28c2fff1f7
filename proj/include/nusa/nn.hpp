// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nusa/adapter.hpp"
#include "nusa/spectra.hpp"

namespace nusa {

enum class Activation { relu, none };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

// y = act((W + ΔW) x + b). Samples are rows of the batch, so a layer maps an
// N×in batch to N×out.
struct Layer {
  std::string id;
  Matrix weights;  // out × in
  Vector bias;     // out
  std::optional<Adapter> adapter;
  Activation activation = Activation::relu;

  Eigen::Index in_dim() const { return weights.cols(); }
  Eigen::Index out_dim() const { return weights.rows(); }
  // W + ΔW (or W when no adapter is attached).
  Matrix effective_weights() const;
};

struct Model {
  std::vector<Layer> layers;

  Eigen::Index input_dim() const { return layers.front().in_dim(); }
  Eigen::Index classes() const { return layers.back().out_dim(); }
  // Throws ShapeError when consecutive layers do not compose or an adapter
  // does not fit its layer.
  void validate() const;
  void clear_adapters();
};

/// Fully connected ReLU network with a linear output layer; weights N(0, scale²/fan_in), zero bias.
Model make_mlp(Eigen::Index input_dim, const std::vector<Eigen::Index>& hidden, Eigen::Index classes,
               double init_scale, std::uint64_t seed);

struct ForwardCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
  std::vector<Matrix> dropout_masks;  // scaled keep-masks on the adapter branch (empty when off)
};

struct Dropout {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
};

/// Logits for a batch. Fills `cache` for backprop when given.
Matrix forward(const Model& model, const Matrix& batch, ForwardCache* cache = nullptr,
               const Dropout& dropout = {});

// Contiguous range of logits that compete in the softmax (one task's classes).
struct ClassWindow {
  Eigen::Index first = 0;
  Eigen::Index count = 0;
};

enum class GradTarget {
  adapters,  // trainable adapter parameters only; base weights stay frozen
  full       // base weights and biases (backbone pretraining), adapters ignored
};

struct LayerGrads {
  std::optional<AdapterGrads> adapter;
  std::optional<Matrix> weights;
  std::optional<Vector> bias;
};

struct LossOptions {
  GradTarget target = GradTarget::adapters;
  std::optional<ClassWindow> window;
  double label_smoothing = 0.0;
  Dropout dropout;
};

struct LossAndGrads {
  double loss = 0.0;
  std::vector<LayerGrads> layers;
};

/// Mean softmax cross-entropy over the batch and its gradients. Labels are
/// global class indices; with a window they must fall inside it.
LossAndGrads loss_and_grads(const Model& model, const Matrix& batch, std::span<const int> labels,
                            const LossOptions& opts = {});

/// Fraction of rows whose argmax over the window equals the label.
double accuracy(const Model& model, const Matrix& x, std::span<const int> labels,
                std::optional<ClassWindow> window = std::nullopt);

enum class Schedule { cosine, constant };
enum class OptimizerKind { sgd, adamw };

std::string to_string(Schedule s);
Schedule parse_schedule(const std::string& name);
std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& name);

struct OptimizerState {
  double learning_rate = 0.1;
  double warmup_fraction = 0.05;
  Schedule schedule = Schedule::cosine;
  int step = 0;  // updates taken so far
  int total_steps = 1;
  OptimizerKind kind = OptimizerKind::sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  // First/second moments per parameter slot (AdamW only).
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;

  void validate() const;
  /// Rate used by update number `t` (1-based): linear warmup over
  /// ceil(warmup_fraction·total) steps, times 0.5(1 + cos(π(t−1)/total)) for cosine.
  double rate_at(int t) const;
};

/// Applies update number opt.step + 1 to one parameter matrix whose AdamW
/// moments live in `slot`. Does not advance opt.step.
void update_parameter(OptimizerState& opt, std::size_t slot, Eigen::Ref<Matrix> param,
                      const Eigen::Ref<const Matrix>& grad);

/// Rescales every gradient in `grads` so their joint Frobenius norm is at most
/// `max_norm`. Returns the norm before clipping; max_norm <= 0 leaves them alone.
double clip_grad_norm(std::vector<LayerGrads>& grads, double max_norm);

/// p ← p − lr(step)·g (SGD) or the AdamW rule, for every gradient present.
void step(OptimizerState& opt, Model& model, const std::vector<LayerGrads>& grads);

// Checkpoint directory: layer<i>.w.nusa, layer<i>.b.nusa, adapter files and
// manifest.json describing shapes, activations and adapter sidecars.
void save_model(const std::filesystem::path& dir, const Model& model);
Model load_model(const std::filesystem::path& dir);

}  // namespace nusa
