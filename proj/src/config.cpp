// SPDX-License-Identifier: Apache-2.0
#include "nusa/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace nusa {

namespace {

using json = nlohmann::json;

// Walks one JSON object, rejecting keys that no handler claims.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  template <typename F>
  Section& on(const std::string& key, F&& handle) {
    handlers_[key] = std::forward<F>(handle);
    return *this;
  }

  void run() const {
    for (const auto& [key, value] : j_.items()) {
      const auto it = handlers_.find(key);
      if (it == handlers_.end()) fail(child(key), "unknown key");
      it->second(value, child(key));
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  [[noreturn]] static void fail(const std::string& path, const std::string& msg) {
    throw ConfigError(path + ": " + msg);
  }

 private:
  const json& j_;
  std::string path_;
  std::map<std::string, std::function<void(const json&, const std::string&)>> handlers_;
};

template <typename T>
auto field(T& target) {
  return [&target](const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) Section::fail(path, "expected a number");
      target = v.get<double>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) Section::fail(path, "expected a non-negative integer");
      target = v.get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) Section::fail(path, "expected an integer");
      target = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) Section::fail(path, "expected a string");
      target = v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported field type");
    }
  };
}

template <typename E, typename Parse>
auto enum_field(E& target, Parse parse) {
  return [&target, parse](const json& v, const std::string& path) {
    if (!v.is_string()) Section::fail(path, "expected a string");
    try {
      target = parse(v.get<std::string>());
    } catch (const ConfigError& e) {
      Section::fail(path, e.what());
    }
  };
}

template <typename T>
auto list_field(std::vector<T>& target) {
  return [&target](const json& v, const std::string& path) {
    if (!v.is_array()) Section::fail(path, "expected an array");
    target.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      T item{};
      field(item)(v[i], path + "[" + std::to_string(i) + "]");
      target.push_back(item);
    }
  };
}

void require(bool ok, const std::string& path, const std::string& msg) {
  if (!ok) Section::fail(path, msg);
}

}  // namespace

void validate_config(const ExperimentConfig& c) {
  const auto& s = c.stream;
  require(s.num_tasks >= 2, "stream.num_tasks", "must be >= 2");
  require(s.classes_per_task >= 2, "stream.classes_per_task", "must be >= 2");
  require(s.samples_per_class_train >= 1, "stream.samples_per_class_train", "must be >= 1");
  require(s.samples_per_class_test >= 1, "stream.samples_per_class_test", "must be >= 1");
  require(s.input_dim >= 2, "stream.input_dim", "must be >= 2");
  require(s.separation > 0.0, "stream.separation", "must be > 0");
  require(s.noise >= 0.0, "stream.noise", "must be >= 0");
  require(s.kind != StreamKind::rotated_moons || s.classes_per_task == 2, "stream.classes_per_task",
          "rotated_moons supports exactly 2 classes per task");

  const auto& m = c.model;
  require(!m.hidden.empty(), "model.hidden", "must list at least one layer");
  for (std::size_t i = 0; i < m.hidden.size(); ++i) require(m.hidden[i] >= 1, "model.hidden[" + std::to_string(i) + "]", "must be >= 1");
  require(m.init_scale > 0.0, "model.init_scale", "must be > 0");
  for (std::size_t i = 0; i < m.adapted_layers.size(); ++i) {
    const int li = m.adapted_layers[i];
    require(li >= 0 && li < static_cast<int>(m.hidden.size()), "model.adapted_layers[" + std::to_string(i) + "]",
            "must index a hidden layer");
  }
  const auto& p = m.pretrain;
  require(p.classes >= 2, "model.pretrain.classes", "must be >= 2");
  require(p.samples_per_class >= 1, "model.pretrain.samples_per_class", "must be >= 1");
  require(p.steps >= 0, "model.pretrain.steps", "must be >= 0");
  require(p.batch_size >= 1, "model.pretrain.batch_size", "must be >= 1");
  require(p.learning_rate > 0.0, "model.pretrain.learning_rate", "must be > 0");
  require(p.weight_decay >= 0.0, "model.pretrain.weight_decay", "must be >= 0");
  require(p.separation > 0.0, "model.pretrain.separation", "must be > 0");
  require(p.noise >= 0.0, "model.pretrain.noise", "must be >= 0");

  const auto& a = c.adapter;
  require(a.r_max >= 1, "adapter.r_max", "must be >= 1");
  require(a.rho > 0.0 && a.rho < 1.0, "adapter.rho", "must lie in (0, 1)");
  require(a.alpha > 0.0, "adapter.alpha", "must be > 0");

  const auto& t = c.training;
  require(t.iterations >= 0, "training.iterations", "must be >= 0");
  require(t.learning_rate > 0.0, "training.learning_rate", "must be > 0");
  require(t.warmup_fraction >= 0.0 && t.warmup_fraction <= 0.5, "training.warmup_fraction", "must lie in [0, 0.5]");
  require(!t.seeds.empty(), "training.seeds", "must not be empty");
  require(t.batch_size >= 1, "training.batch_size", "must be >= 1");
  require(t.weight_decay >= 0.0, "training.weight_decay", "must be >= 0");
  require(t.label_smoothing >= 0.0 && t.label_smoothing < 1.0, "training.label_smoothing", "must lie in [0, 1)");
  require(t.dropout >= 0.0 && t.dropout < 1.0, "training.dropout", "must lie in [0, 1)");
  require(t.grad_clip >= 0.0, "training.grad_clip", "must be >= 0");

  require(!c.output_dir.empty(), "outputs.directory", "must not be empty");
}

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("<root>: malformed JSON: ") + e.what());
  }
  ExperimentConfig c;
  std::string output_dir = c.output_dir.string();

  auto stream = [&c](const json& v, const std::string& path) {
    auto& s = c.stream;
    Section(v, path)
        .on("kind", enum_field(s.kind, parse_stream_kind))
        .on("num_tasks", field(s.num_tasks))
        .on("classes_per_task", field(s.classes_per_task))
        .on("samples_per_class_train", field(s.samples_per_class_train))
        .on("samples_per_class_test", field(s.samples_per_class_test))
        .on("seed", field(s.seed))
        .on("input_dim", field(s.input_dim))
        .on("separation", field(s.separation))
        .on("noise", field(s.noise))
        .run();
  };
  auto pretrain = [&c](const json& v, const std::string& path) {
    auto& p = c.model.pretrain;
    Section(v, path)
        .on("classes", field(p.classes))
        .on("samples_per_class", field(p.samples_per_class))
        .on("steps", field(p.steps))
        .on("batch_size", field(p.batch_size))
        .on("learning_rate", field(p.learning_rate))
        .on("weight_decay", field(p.weight_decay))
        .on("separation", field(p.separation))
        .on("noise", field(p.noise))
        .run();
  };
  auto model = [&c, pretrain](const json& v, const std::string& path) {
    auto& m = c.model;
    Section(v, path)
        .on("hidden", list_field(m.hidden))
        .on("init_scale", field(m.init_scale))
        .on("adapted_layers", list_field(m.adapted_layers))
        .on("pretrain", pretrain)
        .run();
  };
  auto adapter = [&c](const json& v, const std::string& path) {
    auto& a = c.adapter;
    Section(v, path)
        .on("variant", enum_field(a.variant, parse_variant))
        .on("mode", enum_field(a.mode, parse_subspace_mode))
        .on("r_max", field(a.r_max))
        .on("rho", field(a.rho))
        .on("alpha", field(a.alpha))
        .run();
  };
  auto training = [&c](const json& v, const std::string& path) {
    auto& t = c.training;
    Section(v, path)
        .on("iterations", field(t.iterations))
        .on("learning_rate", field(t.learning_rate))
        .on("warmup_fraction", field(t.warmup_fraction))
        .on("schedule", enum_field(t.schedule, parse_schedule))
        .on("seeds", list_field(t.seeds))
        .on("batch_size", field(t.batch_size))
        .on("optimizer", enum_field(t.optimizer, parse_optimizer))
        .on("weight_decay", field(t.weight_decay))
        .on("label_smoothing", field(t.label_smoothing))
        .on("dropout", field(t.dropout))
        .on("grad_clip", field(t.grad_clip))
        .run();
  };
  auto outputs = [&output_dir](const json& v, const std::string& path) {
    Section(v, path).on("directory", field(output_dir)).run();
  };
  Section(root, "")
      .on("stream", stream)
      .on("model", model)
      .on("adapter", adapter)
      .on("training", training)
      .on("outputs", outputs)
      .run();
  c.output_dir = output_dir;
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string() + ": cannot open config");
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_config(buf.str());
}

nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  const auto& s = c.stream;
  j["stream"] = {{"kind", to_string(s.kind)},
                 {"num_tasks", s.num_tasks},
                 {"classes_per_task", s.classes_per_task},
                 {"samples_per_class_train", s.samples_per_class_train},
                 {"samples_per_class_test", s.samples_per_class_test},
                 {"seed", s.seed},
                 {"input_dim", s.input_dim},
                 {"separation", s.separation},
                 {"noise", s.noise}};
  const auto& p = c.model.pretrain;
  j["model"] = {{"hidden", c.model.hidden},
                {"init_scale", c.model.init_scale},
                {"adapted_layers", c.model.adapted_layers},
                {"pretrain",
                 {{"classes", p.classes},
                  {"samples_per_class", p.samples_per_class},
                  {"steps", p.steps},
                  {"batch_size", p.batch_size},
                  {"learning_rate", p.learning_rate},
                  {"weight_decay", p.weight_decay},
                  {"separation", p.separation},
                  {"noise", p.noise}}}};
  const auto& a = c.adapter;
  j["adapter"] = {{"variant", to_string(a.variant)},
                  {"mode", to_string(a.mode)},
                  {"r_max", a.r_max},
                  {"rho", a.rho},
                  {"alpha", a.alpha}};
  const auto& t = c.training;
  j["training"] = {{"iterations", t.iterations},
                   {"learning_rate", t.learning_rate},
                   {"warmup_fraction", t.warmup_fraction},
                   {"schedule", to_string(t.schedule)},
                   {"seeds", t.seeds},
                   {"batch_size", t.batch_size},
                   {"optimizer", to_string(t.optimizer)},
                   {"weight_decay", t.weight_decay},
                   {"label_smoothing", t.label_smoothing},
                   {"dropout", t.dropout},
                   {"grad_clip", t.grad_clip}};
  j["outputs"] = {{"directory", c.output_dir.string()}};
  return j;
}

}  // namespace nusa
