#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msfcn/error.hpp"

namespace msfcn {

/// NCHW extents of a rank-4 tensor.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  constexpr std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const noexcept {
    return static_cast<std::size_t>(h) * w;
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const;
};

enum class Mode { kTrain, kEval };

/// Dense rank-4 array with an optional same-shape gradient slot.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{});
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
  const T& operator()(int n, int c, int h, int w) const noexcept {
    return data_[offset(n, c, h, w)];
  }

  bool has_grad() const noexcept { return !grad_.empty(); }
  /// Allocates a zeroed gradient if absent.
  std::span<T> grad();
  std::span<const T> grad() const noexcept { return grad_; }
  void zero_grad();
  void clear_grad() noexcept { grad_.clear(); grad_.shrink_to_fit(); }

  bool all_finite() const noexcept;

 private:
  std::size_t offset(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape shape_{};
  std::vector<T> data_;
  std::vector<T> grad_;
};

/// Per-pixel class indices, laid out [n][h][w].
struct LabelMap {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t& operator()(int b, int y, int x) noexcept {
    return data[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
  std::uint8_t operator()(int b, int y, int x) const noexcept {
    return data[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
};

void validate_shape(const Shape& shape);

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  validate_shape(shape);
  data_.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
  validate_shape(shape);
  if (data_.size() != shape.numel()) {
    throw_invalid("tensor data length " + std::to_string(data_.size()) +
                  " does not match shape " + shape.str());
  }
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{});
  return grad_;
}

template <typename T>
void Tensor<T>::zero_grad() {
  grad_.assign(data_.size(), T{});
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace msfcn
