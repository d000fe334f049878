#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "msfcn/tensor.hpp"

namespace msfcn {

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Reverse-mode tape. Values are recorded in execution order, so recording
/// order is a topological order and backward walks it in reverse.
template <typename T>
class Tape {
 public:
  /// Receives the tape and the output node (value plus populated grad).
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  /// Leaf without gradient.
  Var constant(Tensor<T> value);
  /// Leaf owned by the tape whose gradient is tracked.
  Var variable(Tensor<T> value);
  /// Leaf bound to an external tensor; backward writes into its grad slot.
  /// The tensor must outlive the tape.
  Var parameter(Tensor<T>& external);

  Var record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor<T>& value(Var v) const;
  const Tensor<T>& node_tensor(Var v) const { return value(v); }
  bool requires_grad(Var v) const;
  /// Gradient buffer of `v`, zero-allocated on first use. Empty when `v` does
  /// not require a gradient.
  std::span<T> grad_buffer(Var v);
  /// Gradient accumulated so far for `v` (empty if never touched).
  std::span<const T> grad(Var v) const;

  /// Populates gradients of every node reachable from the scalar `loss`.
  /// Bound parameters are zeroed first, so unreachable ones end at zero.
  /// The tape cannot be differentiated again afterwards.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// When enabled, ops with data-dependent branches (ReLU, max pooling) fold
  /// their decisions into a running signature. Two evaluations with equal
  /// signatures lie on the same smooth piece of the loss.
  void track_branches(bool on) noexcept { track_branches_ = on; }
  bool tracks_branches() const noexcept { return track_branches_; }
  void note_branch(std::uint64_t decision) noexcept {
    signature_ = (signature_ ^ decision) * 0x100000001b3ULL;
  }
  std::uint64_t branch_signature() const noexcept { return signature_; }

 private:
  struct Node {
    Tensor<T> owned;
    Tensor<T>* external = nullptr;
    bool requires_grad = false;
    std::vector<Var> inputs;
    BackwardFn backward;
  };

  Tensor<T>& tensor(Var v);
  const Tensor<T>& tensor(Var v) const;
  void check(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool track_branches_ = false;
  std::uint64_t signature_ = 0xcbf29ce484222325ULL;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace msfcn
