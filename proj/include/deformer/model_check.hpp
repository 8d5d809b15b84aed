#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deformer/config.hpp"

namespace deformer {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  double step = 1e-5;            // central-difference half width
  double floor = 1e-6;           // denominator floor of the relative error
  bool include_input = true;     // also check d/dX
};

struct GroupGradcheck {
  std::string name;
  std::size_t numel = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// 64-bit comparison of backprop against central differences for every
/// parameter tensor of a freshly initialised model, in eval mode, on the
/// probe loss sum(r * logits) with fixed random r and random inputs.
/// Normalisation statistics are randomised first so they are not identity.
std::vector<GroupGradcheck> gradcheck_model(const ModelConfig& config, const GradcheckOptions& options = {});

}  // namespace deformer
