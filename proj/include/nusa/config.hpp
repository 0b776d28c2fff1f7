// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "nusa/continual.hpp"

namespace nusa {

// Experiment config, JSON. Every section and key is optional and falls back to
// the defaults of the corresponding struct; unknown keys are rejected.
//
//   stream:   kind, num_tasks, classes_per_task, samples_per_class_train,
//             samples_per_class_test, seed, input_dim, separation, noise
//   model:    hidden[], init_scale, adapted_layers[],
//             pretrain {classes, samples_per_class, steps, batch_size,
//                       learning_rate, weight_decay, separation, noise}
//   adapter:  variant, mode, r_max, rho, alpha
//   training: iterations, learning_rate, warmup_fraction, schedule, seeds[],
//             batch_size, optimizer, weight_decay, label_smoothing, dropout
//   outputs:  directory
//
// Errors are ConfigError with the dotted path of the offending field.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);

/// Range checks shared by the parser and programmatic callers.
void validate_config(const ExperimentConfig& cfg);

}  // namespace nusa
