#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msfcn/tape.hpp"

namespace msfcn {

/// A tensor whose gradient is checked. The loss function must bind it with
/// `Tape::parameter` so the analytic gradient lands in its grad slot.
struct GradCheckTarget {
  std::string name;
  Tensor<double>* tensor = nullptr;
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled across all targets (all of them when fewer exist).
  std::size_t coordinates = 128;
  std::uint64_t seed = 0;
  /// A perturbation that moves the loss onto a different smooth piece (a ReLU
  /// sign or max-pool winner changes) is retried with eps / 10 down to 1e-6;
  /// if it still straddles a kink the coordinate is replaced by a fresh one.
  bool kink_guard = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// Coordinates compared.
  std::size_t coordinates = 0;
  /// Coordinates replaced because every eps straddled a kink.
  std::size_t skipped = 0;
  /// Retries with a smaller eps.
  std::size_t refined = 0;
  std::string worst_target;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using LossFn = std::function<Var(Tape<double>&)>;

/// Compares reverse-mode gradients with central differences
/// (f(x+eps) - f(x-eps)) / 2eps on a random coordinate subsample. The error of
/// one coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const LossFn& loss, std::span<const GradCheckTarget> targets,
                           const GradCheckOptions& options = {});

}  // namespace msfcn
