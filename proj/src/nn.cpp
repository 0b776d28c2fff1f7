// SPDX-License-Identifier: Apache-2.0
#include "nusa/nn.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "nusa/matrix_io.hpp"

namespace nusa {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "none"; }

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "none") return Activation::none;
  throw ConfigError("unknown activation '" + name + "'");
}

std::string to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

Schedule parse_schedule(const std::string& name) {
  if (name == "cosine") return Schedule::cosine;
  if (name == "constant") return Schedule::constant;
  throw ConfigError("unknown schedule '" + name + "'");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adamw"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + name + "'");
}

Matrix Layer::effective_weights() const {
  if (!adapter || adapter->rank() == 0) return weights;
  return weights + delta_w(*adapter);
}

void Model::validate() const {
  if (layers.empty()) throw ShapeError("model has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.bias.size() != l.out_dim()) throw ShapeError("layer " + l.id + ": bias length mismatch");
    if (i > 0 && layers[i - 1].out_dim() != l.in_dim()) {
      throw ShapeError("layer " + l.id + ": input " + std::to_string(l.in_dim()) + " does not match previous output " +
                       std::to_string(layers[i - 1].out_dim()));
    }
    if (l.adapter) {
      const Adapter& a = *l.adapter;
      if (a.out_dim() != l.out_dim() || a.in_dim() != l.in_dim() || a.m_core.rows() != a.m_core.cols() ||
          a.u_basis.cols() != a.rank() || a.v_basis.cols() != a.rank()) {
        throw ShapeError("layer " + l.id + ": adapter does not fit the weight");
      }
    }
  }
}

void Model::clear_adapters() {
  for (auto& l : layers) l.adapter.reset();
}

Model make_mlp(Eigen::Index input_dim, const std::vector<Eigen::Index>& hidden, Eigen::Index classes,
               double init_scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Model model;
  Eigen::Index fan_in = input_dim;
  auto add = [&](Eigen::Index out, Activation act) {
    Layer l;
    l.id = "layer" + std::to_string(model.layers.size());
    l.weights.resize(out, fan_in);
    const double sd = init_scale / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < out; ++i) {
      for (Eigen::Index j = 0; j < fan_in; ++j) l.weights(i, j) = sd * normal(rng);
    }
    l.bias = Vector::Zero(out);
    l.activation = act;
    model.layers.push_back(std::move(l));
    fan_in = out;
  };
  for (auto h : hidden) add(h, Activation::relu);
  add(classes, Activation::none);
  return model;
}

Matrix forward(const Model& model, const Matrix& batch, ForwardCache* cache, const Dropout& dropout) {
  if (batch.cols() != model.input_dim()) {
    throw ShapeError("forward: batch has " + std::to_string(batch.cols()) + " features, model expects " +
                     std::to_string(model.input_dim()));
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
    cache->dropout_masks.clear();
  }
  const bool drop = dropout.rate > 0.0 && dropout.rng != nullptr;
  std::bernoulli_distribution keep(1.0 - dropout.rate);
  Matrix h = batch;
  for (const Layer& l : model.layers) {
    Matrix z = h * l.weights.transpose();
    z.rowwise() += l.bias.transpose();
    Matrix mask;
    if (l.adapter && l.adapter->rank() > 0) {
      const Adapter& a = *l.adapter;
      if (drop) {
        mask.resize(h.rows(), h.cols());
        const double inv = 1.0 / (1.0 - dropout.rate);
        for (Eigen::Index i = 0; i < mask.rows(); ++i) {
          for (Eigen::Index j = 0; j < mask.cols(); ++j) mask(i, j) = keep(*dropout.rng) ? inv : 0.0;
        }
        z.noalias() += a.scale() * ((h.cwiseProduct(mask) * a.v_basis) * a.m_core.transpose()) * a.u_basis.transpose();
      } else {
        z.noalias() += a.scale() * ((h * a.v_basis) * a.m_core.transpose()) * a.u_basis.transpose();
      }
    }
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(z);
      cache->dropout_masks.push_back(std::move(mask));
    }
    h = l.activation == Activation::relu ? Matrix(z.cwiseMax(0.0)) : z;
  }
  require_finite(h, "forward");
  return h;
}

namespace {

ClassWindow resolve_window(const Model& model, const std::optional<ClassWindow>& window) {
  ClassWindow w = window.value_or(ClassWindow{0, model.classes()});
  if (w.count < 1 || w.first < 0 || w.first + w.count > model.classes()) {
    throw DataError("class window [" + std::to_string(w.first) + ", " + std::to_string(w.first + w.count) +
                    ") outside " + std::to_string(model.classes()) + " classes");
  }
  return w;
}

void check_labels(std::span<const int> labels, Eigen::Index rows, const ClassWindow& w, Eigen::Index classes) {
  if (static_cast<Eigen::Index>(labels.size()) != rows) throw DataError("label count does not match batch");
  for (int y : labels) {
    if (y < 0 || y >= classes) throw DataError("label " + std::to_string(y) + " out of range");
    if (y < w.first || y >= w.first + w.count) throw DataError("label " + std::to_string(y) + " outside class window");
  }
}

}  // namespace

LossAndGrads loss_and_grads(const Model& model, const Matrix& batch, std::span<const int> labels,
                            const LossOptions& opts) {
  const ClassWindow w = resolve_window(model, opts.window);
  check_labels(labels, batch.rows(), w, model.classes());
  if (opts.label_smoothing < 0.0 || opts.label_smoothing >= 1.0) throw ConfigError("label_smoothing must be in [0, 1)");

  ForwardCache cache;
  const Matrix logits = forward(model, batch, &cache, opts.dropout);
  const Eigen::Index n = batch.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double eps = opts.label_smoothing;

  LossAndGrads out;
  Matrix d_logits = Matrix::Zero(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = logits.row(i).segment(w.first, w.count);
    const double mx = row.maxCoeff();
    const Eigen::RowVectorXd shifted = row.array() - mx;
    const double log_z = std::log(shifted.array().exp().sum());
    const Eigen::Index target = labels[static_cast<std::size_t>(i)] - w.first;
    for (Eigen::Index c = 0; c < w.count; ++c) {
      const double log_p = shifted(c) - log_z;
      const double q = (c == target ? 1.0 - eps : 0.0) + eps / static_cast<double>(w.count);
      if (q > 0.0) out.loss -= q * log_p * inv_n;
      d_logits(i, w.first + c) = (std::exp(log_p) - q) * inv_n;
    }
  }

  out.layers.resize(model.layers.size());
  Matrix d_h = d_logits;
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const Layer& l = model.layers[li];
    Matrix d_z = l.activation == Activation::relu
                     ? Matrix(d_h.cwiseProduct((cache.pre[li].array() > 0.0).cast<double>().matrix()))
                     : d_h;
    const Matrix& x = cache.inputs[li];
    const Matrix& mask = cache.dropout_masks[li];
    LayerGrads& g = out.layers[li];
    if (opts.target == GradTarget::full) {
      g.weights = d_z.transpose() * x;
      g.bias = d_z.colwise().sum().transpose();
    } else if (l.adapter && l.adapter->rank() > 0) {
      const Matrix upstream = mask.size() > 0 ? Matrix(d_z.transpose() * x.cwiseProduct(mask)) : Matrix(d_z.transpose() * x);
      g.adapter = grads(*l.adapter, upstream);
    }
    if (li > 0) {
      Matrix d_x = d_z * l.weights;
      if (l.adapter && l.adapter->rank() > 0) {
        const Adapter& a = *l.adapter;
        Matrix branch = a.scale() * ((d_z * a.u_basis) * a.m_core) * a.v_basis.transpose();
        if (mask.size() > 0) branch = branch.cwiseProduct(mask);
        d_x += branch;
      }
      d_h = std::move(d_x);
    }
  }
  if (!std::isfinite(out.loss)) throw NumericalError("loss_and_grads: non-finite loss");
  return out;
}

double accuracy(const Model& model, const Matrix& x, std::span<const int> labels, std::optional<ClassWindow> window) {
  const ClassWindow w = resolve_window(model, window);
  check_labels(labels, x.rows(), w, model.classes());
  if (x.rows() == 0) throw DataError("accuracy: empty batch");
  const Matrix logits = forward(model, x);
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).segment(w.first, w.count).maxCoeff(&best);
    if (best + w.first == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(x.rows());
}

void OptimizerState::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 0.5)) throw ConfigError("warmup_fraction must be in [0, 0.5]");
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
}

double OptimizerState::rate_at(int t) const {
  const int warm = static_cast<int>(std::ceil(warmup_fraction * total_steps));
  double f = warm > 0 ? std::min(static_cast<double>(t) / warm, 1.0) : 1.0;
  if (schedule == Schedule::cosine) {
    f *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t - 1) / total_steps));
  }
  return learning_rate * f;
}

void update_parameter(OptimizerState& opt, std::size_t slot, Eigen::Ref<Matrix> param,
                      const Eigen::Ref<const Matrix>& grad) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols()) throw ShapeError("optimizer: gradient shape mismatch");
  const int t = opt.step + 1;
  const double lr = opt.rate_at(t);
  if (opt.kind == OptimizerKind::sgd) {
    if (opt.weight_decay > 0.0) param *= 1.0 - lr * opt.weight_decay;
    param.noalias() -= lr * grad;
    return;
  }
  if (opt.first_moment.size() <= slot) {
    opt.first_moment.resize(slot + 1);
    opt.second_moment.resize(slot + 1);
  }
  Matrix& m = opt.first_moment[slot];
  Matrix& v = opt.second_moment[slot];
  if (m.size() == 0) {
    m = Matrix::Zero(param.rows(), param.cols());
    v = Matrix::Zero(param.rows(), param.cols());
  }
  m = opt.beta1 * m + (1.0 - opt.beta1) * grad;
  v = opt.beta2 * v + (1.0 - opt.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  if (opt.weight_decay > 0.0) param *= 1.0 - lr * opt.weight_decay;
  param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.epsilon);
}

double clip_grad_norm(std::vector<LayerGrads>& grads, double max_norm) {
  double sq = 0.0;
  auto visit = [&grads](auto&& f) {
    for (auto& g : grads) {
      if (g.adapter) {
        f(g.adapter->m_core);
        if (g.adapter->u_basis) f(*g.adapter->u_basis);
        if (g.adapter->v_basis) f(*g.adapter->v_basis);
      }
      if (g.weights) f(*g.weights);
      if (g.bias) f(*g.bias);
    }
  };
  visit([&sq](const auto& m) { sq += m.squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    visit([factor](auto& m) { m *= factor; });
  }
  return norm;
}

void step(OptimizerState& opt, Model& model, const std::vector<LayerGrads>& grads) {
  if (grads.size() != model.layers.size()) throw ShapeError("step: gradient list does not match layers");
  constexpr std::size_t kSlots = 5;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Layer& l = model.layers[i];
    const LayerGrads& g = grads[i];
    if (g.weights) update_parameter(opt, kSlots * i + 0, l.weights, *g.weights);
    if (g.bias) update_parameter(opt, kSlots * i + 1, l.bias, *g.bias);
    if (g.adapter) {
      if (!l.adapter) throw ShapeError("step: adapter gradient for a layer without adapter");
      Adapter& a = *l.adapter;
      const TrainableMask mask = a.mask();
      if (mask.m_core) update_parameter(opt, kSlots * i + 2, a.m_core, g.adapter->m_core);
      if (mask.u_basis && g.adapter->u_basis) update_parameter(opt, kSlots * i + 3, a.u_basis, *g.adapter->u_basis);
      if (mask.v_basis && g.adapter->v_basis) update_parameter(opt, kSlots * i + 4, a.v_basis, *g.adapter->v_basis);
    }
  }
  ++opt.step;
}

void save_model(const std::filesystem::path& dir, const Model& model) {
  model.validate();
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["classes"] = model.classes();
  manifest["layers"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    const std::string stem = "layer" + std::to_string(i);
    write_nusa(dir / (stem + ".w.nusa"), l.weights);
    write_nusa(dir / (stem + ".b.nusa"), Matrix(l.bias));
    nlohmann::ordered_json entry;
    entry["id"] = l.id;
    entry["rows"] = l.out_dim();
    entry["cols"] = l.in_dim();
    entry["activation"] = to_string(l.activation);
    if (l.adapter) {
      save_adapter(dir, stem + ".adapter", *l.adapter, AdapterSidecar{});
      entry["adapter"] = stem + ".adapter";
    } else {
      entry["adapter"] = nullptr;
    }
    manifest["layers"].push_back(std::move(entry));
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write model manifest");
  f << manifest.dump(2) << '\n';
}

Model load_model(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("model manifest: " + std::string(e.what()));
  }
  Model model;
  const auto& layers = manifest.at("layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& entry = layers[i];
    const std::string stem = "layer" + std::to_string(i);
    Layer l;
    l.id = entry.at("id").get<std::string>();
    l.weights = read_nusa(dir / (stem + ".w.nusa"));
    const Matrix b = read_nusa(dir / (stem + ".b.nusa"));
    if (b.cols() != 1) throw IoError("bias file for " + stem + " is not a column");
    l.bias = b.col(0);
    l.activation = parse_activation(entry.at("activation").get<std::string>());
    if (l.weights.rows() != entry.at("rows").get<Eigen::Index>() || l.weights.cols() != entry.at("cols").get<Eigen::Index>()) {
      throw IoError("weight file for " + stem + " disagrees with manifest");
    }
    if (!entry.at("adapter").is_null()) l.adapter = load_adapter(dir, entry.at("adapter").get<std::string>());
    model.layers.push_back(std::move(l));
  }
  model.validate();
  return model;
}

}  // namespace nusa
