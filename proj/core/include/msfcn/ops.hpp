#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>

#include "msfcn/tape.hpp"
#include "msfcn/tensor.hpp"

namespace msfcn {

using Rng = std::mt19937_64;

/// Uniform draw in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

/// Transposed-convolution geometry. Output extent is
/// (in - 1) * stride - 2 * pad + kernel + output_pad.
struct DeconvGeometry {
  int kernel = 2;
  int stride = 2;
  int pad = 0;
  int output_pad = 0;

  /// Default geometry giving an exact `ratio`-fold upscale:
  /// even ratios use kernel 2r / pad r/2, odd ratios kernel 2r+1 / pad ceil(r/2).
  static DeconvGeometry for_ratio(int ratio);

  int output_extent(int in) const noexcept {
    return (in - 1) * stride - 2 * pad + kernel + output_pad;
  }
  /// Throws unless the geometry maps `in` to exactly `ratio * in`.
  void validate_ratio(int in, int ratio) const;
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Running statistics updated by training-mode batch norm.
template <typename T>
struct BatchNormStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
};

namespace ops {

/// Cross-correlation. `w` is [Cout, Cin/groups, k, k]; `b` (optional) is [Cout].
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, std::optional<Var> b, const Conv2dOptions& opt);

/// Transposed convolution (adjoint of conv2d). `w` is [Cin, Cout/groups, k, k].
template <typename T>
Var deconv2d(Tape<T>& tape, Var x, Var w, std::optional<Var> b, const DeconvGeometry& geom,
             int groups);

/// Fixed bilinear upsampling with half-pixel centers (align_corners = false).
template <typename T>
Var bilinear_upsample(Tape<T>& tape, Var x, int ratio);

/// Non-overlapping r x r max pooling; ties route the gradient to the first
/// maximum in row-major order.
template <typename T>
Var maxpool2d(Tape<T>& tape, Var x, int ratio);

template <typename T>
Var batchnorm2d(Tape<T>& tape, Var x, Var scale, Var shift, Mode mode,
                BatchNormStats<T> running, const BatchNormOptions& opt);

template <typename T>
Var relu(Tape<T>& tape, Var x);

/// Stacks along the channel axis in argument order.
template <typename T>
Var concat(Tape<T>& tape, std::span<const Var> xs);

/// Inverted dropout; identity in eval mode or when p == 0.
template <typename T>
Var dropout(Tape<T>& tape, Var x, double p, Mode mode, Rng& rng);

/// Mean over all pixels of -log softmax(logits)[label].
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, const LabelMap& labels);

template <typename T>
Var sum(Tape<T>& tape, Var x);

/// Sum of x * weights; projects a tensor-valued op onto a scalar.
template <typename T>
Var dot(Tape<T>& tape, Var x, const Tensor<T>& weights);

template <typename T>
Var sum_squares(Tape<T>& tape, Var x);

/// Per-pixel softmax over channels (no tape).
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

}  // namespace ops

/// Uniform Glorot initialisation on [-a, a], a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> xavier_init(Shape shape, int fan_in, int fan_out, Rng& rng);

}  // namespace msfcn
