#pragma once

#include <cstdint>
#include <vector>

#include "msfcn/layer_graph.hpp"
#include "msfcn/param_store.hpp"
#include "msfcn/tape.hpp"

namespace msfcn {

/// Deterministic 64-bit FNV-1a; used for per-parameter seeding and data hashes.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// A built MS-FCN: layer graph plus its parameters.
///
/// Each parameter is initialised from an RNG seeded by (seed, parameter name),
/// so variants that share a layer name and shape share initial weights.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  const LayerGraph& graph() const noexcept { return graph_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  /// Records every layer on `tape`; element i is the output of graph node i.
  std::vector<Var> forward_all(Tape<T>& tape, Var input, Mode mode, std::uint64_t dropout_seed);
  /// Logits (N, classes, input_size, input_size).
  Var forward(Tape<T>& tape, Var input, Mode mode, std::uint64_t dropout_seed);
  /// Eval-mode logits without keeping the tape.
  Tensor<T> infer(const Tensor<T>& input);

 private:
  ModelConfig cfg_;
  LayerGraph graph_;
  ParamStore<T> params_;
};

extern template class Model<float>;
extern template class Model<double>;

/// Per-pixel argmax over channels of (N, K, H, W) logits.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits);

}  // namespace msfcn
