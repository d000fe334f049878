#include <cmath>

#include "msfcn/trainer.hpp"

namespace msfcn {

double poly_lr(int iter, int max_iter, double base_lr, double power) {
  if (max_iter <= 0) throw_invalid("poly_lr: max_iter must be positive, got " + std::to_string(max_iter));
  if (iter < 0 || iter > max_iter) {
    throw_invalid("poly_lr: iter " + std::to_string(iter) + " outside [0, " + std::to_string(max_iter) + "]");
  }
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / max_iter, power);
}

template <typename T>
OptimizerState<T> OptimizerState<T>::init(const ParamStore<T>& params) {
  OptimizerState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param<T>& p = params.at(i);
    s.velocity.emplace_back(p.trainable() ? p.value.size() : 0, T{0});
  }
  return s;
}

template <typename T>
void nesterov_update(std::span<T> w, std::span<const T> g, std::span<T> v, const StepOptions& opt, bool decayed) {
  if (g.size() != w.size() || v.size() != w.size()) {
    throw_invalid("nesterov_update: parameter, gradient and velocity sizes differ (" + std::to_string(w.size()) +
                  ", " + std::to_string(g.size()) + ", " + std::to_string(v.size()) + ")");
  }
  const double wd = decayed ? opt.weight_decay : 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double step = opt.lr * (static_cast<double>(g[i]) + wd * static_cast<double>(w[i]));
    const double vel = opt.momentum * static_cast<double>(v[i]) - step;
    v[i] = static_cast<T>(vel);
    w[i] = static_cast<T>(static_cast<double>(w[i]) + opt.momentum * vel - step);
  }
}

template <typename T>
void nesterov_step(ParamStore<T>& params, OptimizerState<T>& state, const StepOptions& opt) {
  if (state.velocity.size() != params.size()) {
    throw_invalid("nesterov_step: optimizer state holds " + std::to_string(state.velocity.size()) +
                  " buffers for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<T>& p = params.at(i);
    if (!p.trainable() || !p.value.has_grad()) continue;
    for (T g : std::as_const(p.value).grad()) {
      if (!std::isfinite(g)) {
        throw Error(ErrorKind::kNumeric, "nesterov_step: non-finite gradient in '" + p.name + "' at iter " +
                                             std::to_string(state.iter));
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<T>& p = params.at(i);
    if (!p.trainable()) continue;
    if (!p.value.has_grad()) p.value.grad();
    nesterov_update<T>(p.value.values(), std::as_const(p.value).grad(), state.velocity[i], opt, p.decayed());
  }
  ++state.iter;
}

template <typename T>
double l2_penalty(const ParamStore<T>& params) {
  double sum = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param<T>& p = params.at(i);
    if (!p.decayed()) continue;
    for (T v : p.value.values()) sum += static_cast<double>(v) * static_cast<double>(v);
  }
  return 0.5 * sum;
}

#define MSFCN_INSTANTIATE_OPTIMIZER(T)                                                                   \
  template struct OptimizerState<T>;                                                                    \
  template void nesterov_update<T>(std::span<T>, std::span<const T>, std::span<T>, const StepOptions&, \
                                   bool);                                                               \
  template void nesterov_step<T>(ParamStore<T>&, OptimizerState<T>&, const StepOptions&);               \
  template double l2_penalty<T>(const ParamStore<T>&);

MSFCN_INSTANTIATE_OPTIMIZER(float)
MSFCN_INSTANTIATE_OPTIMIZER(double)

#undef MSFCN_INSTANTIATE_OPTIMIZER

}  // namespace msfcn
