#include "msfcn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msfcn/ops.hpp"

namespace msfcn {

namespace {

constexpr double kMinEps = 1e-6;

struct Evaluation {
  double value;
  std::uint64_t signature;
};

Evaluation evaluate(const LossFn& loss) {
  Tape<double> tape;
  tape.track_branches(true);
  const Var out = loss(tape);
  const Tensor<double>& v = tape.value(out);
  if (v.size() != 1) throw_invalid("grad_check: loss must be scalar, got " + v.shape().str());
  return {v[0], tape.branch_signature()};
}

}  // namespace

GradCheckResult grad_check(const LossFn& loss, std::span<const GradCheckTarget> targets,
                           const GradCheckOptions& options) {
  if (!(options.eps >= kMinEps && options.eps <= 1e-4)) {
    throw_invalid("grad_check: eps must lie in [1e-6, 1e-4]");
  }
  if (targets.empty()) throw_invalid("grad_check: no targets");

  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  std::uint64_t base_signature = 0;
  {
    Tape<double> tape;
    tape.track_branches(true);
    const Var out = loss(tape);
    if (tape.value(out).size() != 1) {
      throw_invalid("grad_check: loss must be scalar, got " + tape.value(out).shape().str());
    }
    if (!std::isfinite(tape.value(out)[0])) {
      throw Error(ErrorKind::kNumeric, "grad_check: loss is non-finite at the unperturbed point");
    }
    base_signature = tape.branch_signature();
    tape.backward(out);
    for (const auto& t : targets) {
      if (!t.tensor->has_grad()) {
        throw_invalid("grad_check: target '" + t.name + "' was not bound with Tape::parameter");
      }
      const auto g = t.tensor->grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  // (target, index) pairs, flattened and visited in a seeded random order.
  std::vector<std::size_t> offsets{0};
  for (const auto& t : targets) offsets.push_back(offsets.back() + t.tensor->size());
  const std::size_t total = offsets.back();
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t wanted = std::min(total, options.coordinates);
  Rng rng(options.seed);

  GradCheckResult result;
  for (std::size_t i = 0; i < total && result.coordinates < wanted; ++i) {
    const std::size_t j = std::min(total - 1, i + static_cast<std::size_t>(uniform01(rng) * (total - i)));
    std::swap(order[i], order[j]);
    const std::size_t flat = order[i];
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
    const std::size_t ti = static_cast<std::size_t>(it - offsets.begin()) - 1;
    const std::size_t idx = flat - offsets[ti];
    double& x = (*targets[ti].tensor)[idx];
    const double saved = x;

    double eps = options.eps;
    double numeric = 0.0;
    bool smooth = false;
    while (true) {
      x = saved + eps;
      const Evaluation plus = evaluate(loss);
      x = saved - eps;
      const Evaluation minus = evaluate(loss);
      x = saved;
      if (!std::isfinite(plus.value) || !std::isfinite(minus.value)) {
        throw Error(ErrorKind::kNumeric, "grad_check: non-finite loss when perturbing " +
                                             targets[ti].name + "[" + std::to_string(idx) + "]");
      }
      numeric = (plus.value - minus.value) / (2.0 * eps);
      smooth = !options.kink_guard ||
               (plus.signature == base_signature && minus.signature == base_signature);
      if (smooth || eps / 10.0 < kMinEps * (1.0 - 1e-9)) break;
      eps /= 10.0;
      ++result.refined;
    }
    if (!smooth) {
      ++result.skipped;
      continue;
    }
    ++result.coordinates;
    const double a = analytic[ti][idx];
    const double err =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_target = targets[ti].name;
      result.worst_index = idx;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace msfcn
