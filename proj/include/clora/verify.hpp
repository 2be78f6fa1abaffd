// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "clora/adapters.hpp"
#include "clora/vit.hpp"

namespace clora {

/// Adapted forward against the forward of the merged weights.
struct MergeReport {
  std::size_t inputs = 0;
  double max_rel_err = 0;
  /// Merged-model FlopMeter equals the unadapted backbone's.
  bool cost_matches = true;
};

/// Draws a backbone and a fully random bank from `seed`, merges, and
/// compares both paths on `inputs` random patch sequences.
MergeReport verify_merge(const VitConfig& vit, const Placement& placement, Variant variant,
                         std::size_t r, std::size_t p, std::uint64_t seed, std::size_t inputs);

struct GradientEntry {
  std::string name;
  double rel_err = 0;
};

struct GradientReport {
  std::vector<GradientEntry> tensors;
  double max_rel_err = 0;
  double loss = 0;
};

/// Reverse-mode gradient of the full objective (batch cross-entropy through
/// a pre_block CLoRA model plus alpha / d^2 times the summed rsr terms)
/// against central differences with step `h`, for every adapter tensor.
GradientReport objective_gradient_check(const VitConfig& vit, std::size_t r, std::size_t p,
                                        double alpha, std::size_t samples, std::uint64_t seed,
                                        double h = 1e-6);

}  // namespace clora
