#include "msfcn/tensor.hpp"

#include "msfcn/tape.hpp"

namespace msfcn {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kParse: return "parse_error";
    case ErrorKind::kConfig: return "config_error";
    case ErrorKind::kIo: return "io_error";
    case ErrorKind::kNumeric: return "numeric_error";
    case ErrorKind::kState: return "state_error";
  }
  return "error";
}

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
         std::to_string(w);
}

void validate_shape(const Shape& shape) {
  if (shape.n <= 0 || shape.c <= 0 || shape.h <= 0 || shape.w <= 0) {
    throw_invalid("tensor shape must be positive in every dimension, got " + shape.str());
  }
}

template class Tensor<float>;
template class Tensor<double>;

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::check(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw_invalid("variable handle " + std::to_string(v.id) + " is not on this tape");
  }
}

template <typename T>
Tensor<T>& Tape<T>::tensor(Var v) {
  check(v);
  Node& node = nodes_[v.id];
  return node.external ? *node.external : node.owned;
}

template <typename T>
const Tensor<T>& Tape<T>::tensor(Var v) const {
  check(v);
  const Node& node = nodes_[v.id];
  return node.external ? *node.external : node.owned;
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::variable(Tensor<T> value) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::parameter(Tensor<T>& external) {
  Node node;
  node.external = &external;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward) {
  if (consumed_) {
    throw Error(ErrorKind::kState, "cannot record on a tape after backward");
  }
  Node node;
  for (Var in : inputs) {
    check(in);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  node.owned = std::move(value);
  if (node.requires_grad) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return tensor(v);
}

template <typename T>
bool Tape<T>::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

template <typename T>
std::span<T> Tape<T>::grad_buffer(Var v) {
  check(v);
  if (!nodes_[v.id].requires_grad) return {};
  return tensor(v).grad();
}

template <typename T>
std::span<const T> Tape<T>::grad(Var v) const {
  return tensor(v).grad();
}

template <typename T>
void Tape<T>::backward(Var loss) {
  check(loss);
  if (consumed_) throw Error(ErrorKind::kState, "tape already consumed by backward");
  if (tensor(loss).size() != 1) {
    throw_invalid("backward requires a scalar loss, got shape " + tensor(loss).shape().str());
  }
  for (Node& node : nodes_) {
    if (node.external) node.external->zero_grad();
  }
  consumed_ = true;
  grad_buffer(loss)[0] = T{1};
  for (int i = loss.id; i >= 0; --i) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward) continue;
    Tensor<T>& out = node.external ? *node.external : node.owned;
    if (!out.has_grad()) continue;  // not reachable from the loss
    node.backward(*this, out);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace msfcn
