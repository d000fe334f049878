#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msfcn/gradcheck.hpp"
#include "msfcn/model_config.hpp"

namespace msfcn {

struct OpCheckReport {
  std::string op;
  /// Input shape the op was checked at.
  std::string shape;
  GradCheckResult result;
};

/// Checks every differentiable op on random shapes up to (2, 4, 12, 12).
std::vector<OpCheckReport> run_op_gradchecks(std::uint64_t seed, const GradCheckOptions& options = {});

/// Checks the full model (batch 1, train-mode batch norm, fixed dropout mask)
/// on its parameters and input.
OpCheckReport run_model_gradcheck(const ModelConfig& cfg, std::uint64_t seed,
                                  const GradCheckOptions& options = {});

}  // namespace msfcn
