// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nusa/spectra.hpp"

namespace nusa {

/// Seeded m×n test matrix. Cycles through Gaussian entries, a geometric
/// spectrum with a random decay rate, and an exactly rank-deficient spectrum.
Matrix random_test_matrix(Eigen::Index m, Eigen::Index n, std::uint64_t seed);

struct VerifyOptions {
  std::uint64_t seed = 0;
  int trials = 1000;
  // Multiplies σ_max^null before the bound comparison. 1 in normal use; the
  // CLI's fault hook sets 0.5 to prove the battery notices a broken bound.
  double bound_scale = 1.0;
};

struct PropertyResult {
  std::string name;
  long checks = 0;
  long failures = 0;
  std::uint64_t first_failing_seed = 0;
  std::string witness;  // values of the first failure
  double worst = 0.0;   // largest observed error measure for the property

  bool passed() const { return failures == 0; }
};

// Properties, in order: svd_oracle, orthogonality, lemma1, lemma1_nuclear,
// theorem1, theorem1_nuclear, merge_equivalence, gradients. The plain lemma1 and
// theorem1 use the ‖M‖_F bound, which random cores can exceed; the _nuclear
// variants use ‖M‖_*. Each runs `trials` seeded cases derived from
// opts.seed. `progress` (optional) is called with each property name as it starts.
std::vector<PropertyResult> run_verify(const VerifyOptions& opts,
                                       const std::function<void(const std::string&)>& progress = {});

}  // namespace nusa
