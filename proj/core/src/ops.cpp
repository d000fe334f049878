#include "msfcn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "gemm.hpp"

namespace msfcn {

namespace {

std::string dims(const Shape& s) { return s.str(); }

template <typename T>
void add_into(std::span<T> dst, const T* src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

DeconvGeometry DeconvGeometry::for_ratio(int ratio) {
  if (ratio < 2) throw_invalid("deconv2d: ratio must be >= 2, got " + std::to_string(ratio));
  if (ratio % 2 == 0) return DeconvGeometry{2 * ratio, ratio, ratio / 2, 0};
  return DeconvGeometry{2 * ratio + 1, ratio, (ratio + 1) / 2, 0};
}

void DeconvGeometry::validate_ratio(int in, int ratio) const {
  if (kernel < 1 || stride < 1 || pad < 0 || output_pad < 0 || output_pad >= stride) {
    throw_invalid("deconv2d: invalid geometry kernel=" + std::to_string(kernel) +
                  " stride=" + std::to_string(stride) + " pad=" + std::to_string(pad) +
                  " output_pad=" + std::to_string(output_pad));
  }
  if (output_extent(in) != ratio * in) {
    throw_invalid("deconv2d: geometry kernel=" + std::to_string(kernel) +
                  " stride=" + std::to_string(stride) + " pad=" + std::to_string(pad) +
                  " maps extent " + std::to_string(in) + " to " +
                  std::to_string(output_extent(in)) + ", expected " + std::to_string(ratio * in));
  }
}

namespace ops {

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var w, std::optional<Var> b, const Conv2dOptions& opt) {
  const Shape xs = tape.value(x).shape();
  const Shape ws = tape.value(w).shape();
  const int groups = opt.groups;
  if (groups < 1) throw_invalid("conv2d: groups must be >= 1");
  if (opt.stride < 1 || opt.pad < 0) throw_invalid("conv2d: stride must be >= 1 and pad >= 0");
  if (xs.c % groups != 0) {
    throw_invalid("conv2d: input channels " + std::to_string(xs.c) + " not divisible by groups " +
                  std::to_string(groups));
  }
  if (ws.n % groups != 0) {
    throw_invalid("conv2d: output channels " + std::to_string(ws.n) +
                  " not divisible by groups " + std::to_string(groups));
  }
  if (ws.c != xs.c / groups) {
    throw_invalid("conv2d: weight input-channel dim " + std::to_string(ws.c) +
                  " != input channels / groups " + std::to_string(xs.c / groups));
  }
  if (ws.h != ws.w) throw_invalid("conv2d: kernel must be square, got " + dims(ws));
  const int k = ws.h;
  if (xs.h + 2 * opt.pad < k) {
    throw_invalid("conv2d: kernel " + std::to_string(k) + " exceeds padded height " +
                  std::to_string(xs.h + 2 * opt.pad));
  }
  if (xs.w + 2 * opt.pad < k) {
    throw_invalid("conv2d: kernel " + std::to_string(k) + " exceeds padded width " +
                  std::to_string(xs.w + 2 * opt.pad));
  }
  if (b) {
    const Shape bs = tape.value(*b).shape();
    if (bs.numel() != static_cast<std::size_t>(ws.n)) {
      throw_invalid("conv2d: bias length " + std::to_string(bs.numel()) +
                    " != output channels " + std::to_string(ws.n));
    }
  }

  const int cout = ws.n;
  const int cin_g = xs.c / groups;
  const int cout_g = cout / groups;
  const int ho = (xs.h + 2 * opt.pad - k) / opt.stride + 1;
  const int wo = (xs.w + 2 * opt.pad - k) / opt.stride + 1;
  const int patch = cin_g * k * k;
  const int pixels = ho * wo;
  const bool pointwise = (k == 1 && opt.stride == 1 && opt.pad == 0);

  Tensor<T> out(Shape{xs.n, cout, ho, wo});
  {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& wv = tape.value(w);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(patch) * pixels);
    for (int n = 0; n < xs.n; ++n) {
      for (int g = 0; g < groups; ++g) {
        const T* xg = xv.data() + (static_cast<std::size_t>(n) * xs.c + g * cin_g) * xs.plane();
        const T* cols = xg;
        if (!pointwise) {
          detail::im2col(xg, cin_g, xs.h, xs.w, k, opt.stride, opt.pad, ho, wo, col.data());
          cols = col.data();
        }
        const T* wg = wv.data() + static_cast<std::size_t>(g) * cout_g * patch;
        T* og = out.data() + (static_cast<std::size_t>(n) * cout + g * cout_g) * pixels;
        detail::gemm(false, false, cout_g, pixels, patch, wg, cols, og, false);
      }
    }
    if (b) {
      const Tensor<T>& bv = tape.value(*b);
      for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < cout; ++c) {
          T* o = out.data() + (static_cast<std::size_t>(n) * cout + c) * pixels;
          for (int p = 0; p < pixels; ++p) o[p] += bv[c];
        }
      }
    }
  }

  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  return tape.record(
      std::move(out), std::move(inputs),
      [=](Tape<T>& t, const Tensor<T>& o) {
        const std::span<const T> dout = o.grad();
        const Tensor<T>& xv = t.value(x);
        const Tensor<T>& wv = t.value(w);
        std::span<T> dx = t.grad_buffer(x);
        std::span<T> dw = t.grad_buffer(w);
        std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(patch) * pixels);
        std::vector<T> dcol(static_cast<std::size_t>(patch) * pixels);
        for (int n = 0; n < xs.n; ++n) {
          for (int g = 0; g < groups; ++g) {
            const std::size_t xoff = (static_cast<std::size_t>(n) * xs.c + g * cin_g) * xs.plane();
            const T* dog = dout.data() + (static_cast<std::size_t>(n) * cout + g * cout_g) * pixels;
            const std::size_t woff = static_cast<std::size_t>(g) * cout_g * patch;
            if (!dw.empty()) {
              const T* cols = xv.data() + xoff;
              if (!pointwise) {
                detail::im2col(xv.data() + xoff, cin_g, xs.h, xs.w, k, opt.stride, opt.pad, ho, wo,
                               col.data());
                cols = col.data();
              }
              detail::gemm(false, true, cout_g, patch, pixels, dog, cols, dw.data() + woff, true);
            }
            if (!dx.empty()) {
              if (pointwise) {
                detail::gemm(true, false, patch, pixels, cout_g, wv.data() + woff, dog,
                             dx.data() + xoff, true);
              } else {
                detail::gemm(true, false, patch, pixels, cout_g, wv.data() + woff, dog, dcol.data(),
                             false);
                detail::col2im(dcol.data(), cin_g, xs.h, xs.w, k, opt.stride, opt.pad, ho, wo,
                               dx.data() + xoff);
              }
            }
          }
        }
        if (b) {
          std::span<T> db = t.grad_buffer(*b);
          if (!db.empty()) {
            for (int n = 0; n < xs.n; ++n) {
              for (int c = 0; c < cout; ++c) {
                const T* d = dout.data() + (static_cast<std::size_t>(n) * cout + c) * pixels;
                T acc{};
                for (int p = 0; p < pixels; ++p) acc += d[p];
                db[c] += acc;
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// deconv2d

template <typename T>
Var deconv2d(Tape<T>& tape, Var x, Var w, std::optional<Var> b, const DeconvGeometry& geom,
             int groups) {
  const Shape xs = tape.value(x).shape();
  const Shape ws = tape.value(w).shape();
  if (groups < 1) throw_invalid("deconv2d: groups must be >= 1");
  if (xs.c % groups != 0) {
    throw_invalid("deconv2d: input channels " + std::to_string(xs.c) +
                  " not divisible by groups " + std::to_string(groups));
  }
  if (ws.n != xs.c) {
    throw_invalid("deconv2d: weight input-channel dim " + std::to_string(ws.n) +
                  " != input channels " + std::to_string(xs.c));
  }
  if (ws.h != ws.w || ws.h != geom.kernel) {
    throw_invalid("deconv2d: weight kernel " + dims(ws) + " does not match geometry kernel " +
                  std::to_string(geom.kernel));
  }
  if (geom.stride < 1 || geom.pad < 0 || geom.output_pad < 0 || geom.output_pad >= geom.stride) {
    throw_invalid("deconv2d: invalid stride/pad/output_pad");
  }
  const int k = geom.kernel;
  const int cin_g = xs.c / groups;
  const int cout_g = ws.c;
  const int cout = cout_g * groups;
  const int ho = geom.output_extent(xs.h);
  const int wo = geom.output_extent(xs.w);
  if (ho <= 0 || wo <= 0) throw_invalid("deconv2d: geometry yields empty output");
  if (b) {
    const Shape bs = tape.value(*b).shape();
    if (bs.numel() != static_cast<std::size_t>(cout)) {
      throw_invalid("deconv2d: bias length " + std::to_string(bs.numel()) +
                    " != output channels " + std::to_string(cout));
    }
  }
  const int patch = cout_g * k * k;
  const int pixels = xs.h * xs.w;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;

  Tensor<T> out(Shape{xs.n, cout, ho, wo});
  {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& wv = tape.value(w);
    std::vector<T> col(static_cast<std::size_t>(patch) * pixels);
    for (int n = 0; n < xs.n; ++n) {
      for (int g = 0; g < groups; ++g) {
        const T* xg = xv.data() + (static_cast<std::size_t>(n) * xs.c + g * cin_g) * pixels;
        const T* wg = wv.data() + static_cast<std::size_t>(g) * cin_g * patch;
        detail::gemm(true, false, patch, pixels, cin_g, wg, xg, col.data(), false);
        T* og = out.data() + (static_cast<std::size_t>(n) * cout + g * cout_g) * out_plane;
        detail::col2im(col.data(), cout_g, ho, wo, k, geom.stride, geom.pad, xs.h, xs.w, og);
      }
    }
    if (b) {
      const Tensor<T>& bv = tape.value(*b);
      for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < cout; ++c) {
          T* o = out.data() + (static_cast<std::size_t>(n) * cout + c) * out_plane;
          for (std::size_t p = 0; p < out_plane; ++p) o[p] += bv[c];
        }
      }
    }
  }

  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  return tape.record(
      std::move(out), std::move(inputs),
      [=](Tape<T>& t, const Tensor<T>& o) {
        const std::span<const T> dout = o.grad();
        const Tensor<T>& xv = t.value(x);
        const Tensor<T>& wv = t.value(w);
        std::span<T> dx = t.grad_buffer(x);
        std::span<T> dw = t.grad_buffer(w);
        std::vector<T> dcol(static_cast<std::size_t>(patch) * pixels);
        for (int n = 0; n < xs.n; ++n) {
          for (int g = 0; g < groups; ++g) {
            const T* dog = dout.data() + (static_cast<std::size_t>(n) * cout + g * cout_g) * out_plane;
            detail::im2col(dog, cout_g, ho, wo, k, geom.stride, geom.pad, xs.h, xs.w, dcol.data());
            const std::size_t xoff = (static_cast<std::size_t>(n) * xs.c + g * cin_g) * pixels;
            const std::size_t woff = static_cast<std::size_t>(g) * cin_g * patch;
            if (!dx.empty()) {
              detail::gemm(false, false, cin_g, pixels, patch, wv.data() + woff, dcol.data(),
                           dx.data() + xoff, true);
            }
            if (!dw.empty()) {
              detail::gemm(false, true, cin_g, patch, pixels, xv.data() + xoff, dcol.data(),
                           dw.data() + woff, true);
            }
          }
        }
        if (b) {
          std::span<T> db = t.grad_buffer(*b);
          if (!db.empty()) {
            for (int n = 0; n < xs.n; ++n) {
              for (int c = 0; c < cout; ++c) {
                const T* d = dout.data() + (static_cast<std::size_t>(n) * cout + c) * out_plane;
                T acc{};
                for (std::size_t p = 0; p < out_plane; ++p) acc += d[p];
                db[c] += acc;
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// bilinear_upsample

namespace {

struct AxisTap {
  int i0;
  int i1;
  double w0;
  double w1;
};

std::vector<AxisTap> bilinear_axis(int in, int ratio) {
  std::vector<AxisTap> taps(static_cast<std::size_t>(in) * ratio);
  for (int o = 0; o < in * ratio; ++o) {
    double src = (o + 0.5) / ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double l = src - i0;
    taps[o] = AxisTap{i0, i1, 1.0 - l, l};
  }
  return taps;
}

}  // namespace

template <typename T>
Var bilinear_upsample(Tape<T>& tape, Var x, int ratio) {
  if (ratio < 1) throw_invalid("bilinear_upsample: ratio must be >= 1, got " + std::to_string(ratio));
  const Shape xs = tape.value(x).shape();
  const int ho = xs.h * ratio;
  const int wo = xs.w * ratio;
  const auto ty = bilinear_axis(xs.h, ratio);
  const auto tx = bilinear_axis(xs.w, ratio);
  Tensor<T> out(Shape{xs.n, xs.c, ho, wo});
  const Tensor<T>& xv = tape.value(x);
  const int planes = xs.n * xs.c;
  for (int p = 0; p < planes; ++p) {
    const T* src = xv.data() + static_cast<std::size_t>(p) * xs.plane();
    T* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const AxisTap& a = ty[oy];
      const T* r0 = src + static_cast<std::size_t>(a.i0) * xs.w;
      const T* r1 = src + static_cast<std::size_t>(a.i1) * xs.w;
      for (int ox = 0; ox < wo; ++ox) {
        const AxisTap& bt = tx[ox];
        const double top = bt.w0 * r0[bt.i0] + bt.w1 * r0[bt.i1];
        const double bottom = bt.w0 * r1[bt.i0] + bt.w1 * r1[bt.i1];
        dst[static_cast<std::size_t>(oy) * wo + ox] = static_cast<T>(a.w0 * top + a.w1 * bottom);
      }
    }
  }
  return tape.record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& o) {
    std::span<T> dx = t.grad_buffer(x);
    const std::span<const T> dout = o.grad();
    for (int p = 0; p < planes; ++p) {
      T* dst = dx.data() + static_cast<std::size_t>(p) * xs.plane();
      const T* g = dout.data() + static_cast<std::size_t>(p) * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const AxisTap& a = ty[oy];
        T* r0 = dst + static_cast<std::size_t>(a.i0) * xs.w;
        T* r1 = dst + static_cast<std::size_t>(a.i1) * xs.w;
        for (int ox = 0; ox < wo; ++ox) {
          const AxisTap& bt = tx[ox];
          const double v = g[static_cast<std::size_t>(oy) * wo + ox];
          r0[bt.i0] += static_cast<T>(a.w0 * bt.w0 * v);
          r0[bt.i1] += static_cast<T>(a.w0 * bt.w1 * v);
          r1[bt.i0] += static_cast<T>(a.w1 * bt.w0 * v);
          r1[bt.i1] += static_cast<T>(a.w1 * bt.w1 * v);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// maxpool2d

template <typename T>
Var maxpool2d(Tape<T>& tape, Var x, int ratio) {
  if (ratio < 1) throw_invalid("maxpool2d: ratio must be >= 1, got " + std::to_string(ratio));
  const Shape xs = tape.value(x).shape();
  if (xs.h % ratio != 0) {
    throw_invalid("maxpool2d: height " + std::to_string(xs.h) + " not divisible by ratio " +
                  std::to_string(ratio));
  }
  if (xs.w % ratio != 0) {
    throw_invalid("maxpool2d: width " + std::to_string(xs.w) + " not divisible by ratio " +
                  std::to_string(ratio));
  }
  const int ho = xs.h / ratio;
  const int wo = xs.w / ratio;
  Tensor<T> out(Shape{xs.n, xs.c, ho, wo});
  std::vector<std::uint32_t> argmax(out.size());
  const Tensor<T>& xv = tape.value(x);
  const int planes = xs.n * xs.c;
  std::size_t o = 0;
  for (int p = 0; p < planes; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * xs.plane();
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++o) {
        std::size_t best = base + static_cast<std::size_t>(oy * ratio) * xs.w + ox * ratio;
        T best_v = xv[best];
        for (int dy = 0; dy < ratio; ++dy) {
          const std::size_t row = base + static_cast<std::size_t>(oy * ratio + dy) * xs.w;
          for (int dx = 0; dx < ratio; ++dx) {
            const std::size_t idx = row + ox * ratio + dx;
            if (xv[idx] > best_v) {
              best_v = xv[idx];
              best = idx;
            }
          }
        }
        out[o] = best_v;
        argmax[o] = static_cast<std::uint32_t>(best - base);
        if (tape.tracks_branches()) tape.note_branch(argmax[o]);
      }
    }
  }
  return tape.record(std::move(out), {x},
                     [=, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& ov) {
                       std::span<T> dx = t.grad_buffer(x);
                       const std::span<const T> dout = ov.grad();
                       const std::size_t per_plane = static_cast<std::size_t>(ho) * wo;
                       for (std::size_t i = 0; i < dout.size(); ++i) {
                         const std::size_t base = (i / per_plane) * xs.plane();
                         dx[base + argmax[i]] += dout[i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// batchnorm2d

template <typename T>
Var batchnorm2d(Tape<T>& tape, Var x, Var scale, Var shift, Mode mode, BatchNormStats<T> running,
                const BatchNormOptions& opt) {
  const Shape xs = tape.value(x).shape();
  const Tensor<T>& sv = tape.value(scale);
  const Tensor<T>& hv = tape.value(shift);
  if (sv.size() != static_cast<std::size_t>(xs.c)) {
    throw_invalid("batchnorm2d: scale length " + std::to_string(sv.size()) + " != channels " +
                  std::to_string(xs.c));
  }
  if (hv.size() != static_cast<std::size_t>(xs.c)) {
    throw_invalid("batchnorm2d: shift length " + std::to_string(hv.size()) + " != channels " +
                  std::to_string(xs.c));
  }
  if (!(opt.eps > 0.0)) throw_invalid("batchnorm2d: eps must be > 0");
  for (Tensor<T>* stat : {running.mean, running.var}) {
    if (stat && stat->size() != static_cast<std::size_t>(xs.c)) {
      throw_invalid("batchnorm2d: running statistic length " + std::to_string(stat->size()) +
                    " != channels " + std::to_string(xs.c));
    }
  }
  if (mode == Mode::kEval && (!running.mean || !running.var)) {
    throw_invalid("batchnorm2d: eval mode requires running statistics");
  }

  const Tensor<T>& xv = tape.value(x);
  const std::size_t plane = xs.plane();
  const std::size_t count = static_cast<std::size_t>(xs.n) * plane;
  const int channels = xs.c;
  Tensor<T> out(xs);
  std::vector<double> inv_std(channels);
  // Normalised input for train mode, centred-and-scaled input for eval mode.
  Tensor<T> xhat(xs);

  for (int c = 0; c < channels; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::kTrain) {
      for (int n = 0; n < xs.n; ++n) {
        const T* p = xv.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= static_cast<double>(count);
      for (int n = 0; n < xs.n; ++n) {
        const T* p = xv.data() + (static_cast<std::size_t>(n) * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(count);
      if (running.mean && running.var) {
        const double unbiased = count > 1 ? var * count / (count - 1.0) : var;
        (*running.mean)[c] =
            static_cast<T>((1.0 - opt.momentum) * (*running.mean)[c] + opt.momentum * mean);
        (*running.var)[c] =
            static_cast<T>((1.0 - opt.momentum) * (*running.var)[c] + opt.momentum * unbiased);
      }
    } else {
      mean = (*running.mean)[c];
      var = (*running.var)[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + opt.eps);
    const double g = sv[c];
    const double s = hv[c];
    for (int n = 0; n < xs.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (xv[off + i] - mean) * inv_std[c];
        xhat[off + i] = static_cast<T>(h);
        out[off + i] = static_cast<T>(g * h + s);
      }
    }
  }

  return tape.record(
      std::move(out), {x, scale, shift},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& o) {
        const std::span<const T> dy = o.grad();
        std::span<T> dx = t.grad_buffer(x);
        std::span<T> dscale = t.grad_buffer(scale);
        std::span<T> dshift = t.grad_buffer(shift);
        const Tensor<T>& gamma = t.value(scale);
        for (int c = 0; c < channels; ++c) {
          double sum_dy = 0.0;
          double sum_dy_xhat = 0.0;
          for (int n = 0; n < xs.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += dy[off + i];
              sum_dy_xhat += static_cast<double>(dy[off + i]) * xhat[off + i];
            }
          }
          if (!dscale.empty()) dscale[c] += static_cast<T>(sum_dy_xhat);
          if (!dshift.empty()) dshift[c] += static_cast<T>(sum_dy);
          if (dx.empty()) continue;
          const double g = gamma[c];
          if (mode == Mode::kTrain) {
            const double m = static_cast<double>(count);
            const double k = g * inv_std[c] / m;
            for (int n = 0; n < xs.n; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                dx[off + i] += static_cast<T>(
                    k * (m * dy[off + i] - sum_dy - xhat[off + i] * sum_dy_xhat));
              }
            }
          } else {
            const double k = g * inv_std[c];
            for (int n = 0; n < xs.n; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) dx[off + i] += static_cast<T>(k * dy[off + i]);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// elementwise and structural ops

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{} ? xv[i] : T{};
  if (tape.tracks_branches()) {
    for (std::size_t i = 0; i < xv.size(); ++i) tape.note_branch(xv[i] > T{} ? 1 : 2);
  }
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& o) {
    std::span<T> dx = t.grad_buffer(x);
    const std::span<const T> dy = o.grad();
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (o[i] > T{}) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var concat(Tape<T>& tape, std::span<const Var> xs) {
  if (xs.empty()) throw_invalid("concat: needs at least one input");
  const Shape first = tape.value(xs[0]).shape();
  int channels = 0;
  std::vector<int> offsets;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Shape s = tape.value(xs[i]).shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw_invalid("concat: input " + std::to_string(i) + " has shape " + s.str() +
                    ", incompatible with " + first.str() + " (batch and spatial dims must agree)");
    }
    offsets.push_back(channels);
    channels += s.c;
  }
  const std::size_t plane = first.plane();
  Tensor<T> out(Shape{first.n, channels, first.h, first.w});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor<T>& v = tape.value(xs[i]);
    const int ci = v.shape().c;
    for (int n = 0; n < first.n; ++n) {
      const T* src = v.data() + static_cast<std::size_t>(n) * ci * plane;
      T* dst = out.data() + (static_cast<std::size_t>(n) * channels + offsets[i]) * plane;
      std::copy(src, src + ci * plane, dst);
    }
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  return tape.record(std::move(out), inputs,
                     [=](Tape<T>& t, const Tensor<T>& o) {
                       const std::span<const T> dy = o.grad();
                       for (std::size_t i = 0; i < inputs.size(); ++i) {
                         std::span<T> dx = t.grad_buffer(inputs[i]);
                         if (dx.empty()) continue;
                         const int ci = t.value(inputs[i]).shape().c;
                         for (int n = 0; n < first.n; ++n) {
                           const T* src =
                               dy.data() + (static_cast<std::size_t>(n) * channels + offsets[i]) * plane;
                           add_into(dx.subspan(static_cast<std::size_t>(n) * ci * plane, ci * plane),
                                    src);
                         }
                       }
                     });
}

template <typename T>
Var dropout(Tape<T>& tape, Var x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw_invalid("dropout: p must lie in [0, 1), got " + std::to_string(p));
  const Tensor<T>& xv = tape.value(x);
  if (mode == Mode::kEval || p == 0.0) {
    Tensor<T> out = xv;
    out.clear_grad();
    return tape.record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& o) {
      add_into(t.grad_buffer(x), o.grad().data());
    });
  }
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(xv.size());
  for (auto& m : mask) m = uniform01(rng) >= p ? keep_scale : T{};
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  return tape.record(std::move(out), {x},
                     [x, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& o) {
                       std::span<T> dx = t.grad_buffer(x);
                       const std::span<const T> dy = o.grad();
                       for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
                     });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  Tensor<T> probs(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max<double>(mx, logits[base + c * plane + p]);
      double z = 0.0;
      for (int c = 0; c < s.c; ++c) z += std::exp(logits[base + c * plane + p] - mx);
      for (int c = 0; c < s.c; ++c) {
        probs[base + c * plane + p] = static_cast<T>(std::exp(logits[base + c * plane + p] - mx) / z);
      }
    }
  }
  return probs;
}

template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, const LabelMap& labels) {
  const Tensor<T>& lv = tape.value(logits);
  const Shape s = lv.shape();
  if (s.c < 2) throw_invalid("softmax_cross_entropy: needs at least 2 classes, got " + std::to_string(s.c));
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w ||
      labels.data.size() != static_cast<std::size_t>(s.n) * s.plane()) {
    throw_invalid("softmax_cross_entropy: label map " + std::to_string(labels.n) + "x" +
                  std::to_string(labels.h) + "x" + std::to_string(labels.w) +
                  " does not match logits " + s.str());
  }
  const std::size_t plane = s.plane();
  const std::size_t count = static_cast<std::size_t>(s.n) * plane;
  double loss = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      const int label = labels.data[static_cast<std::size_t>(n) * plane + p];
      if (label >= s.c) {
        throw_invalid("softmax_cross_entropy: label " + std::to_string(label) + " out of range [0," +
                      std::to_string(s.c) + ") at pixel (n=" + std::to_string(n) +
                      ", y=" + std::to_string(p / s.w) + ", x=" + std::to_string(p % s.w) + ")");
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max<double>(mx, lv[base + c * plane + p]);
      double z = 0.0;
      for (int c = 0; c < s.c; ++c) z += std::exp(lv[base + c * plane + p] - mx);
      loss += std::log(z) + mx - lv[base + label * plane + p];
    }
  }
  loss /= static_cast<double>(count);
  Tensor<T> probs = softmax(lv);
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(loss));
  return tape.record(std::move(out), {logits},
                     [=, probs = std::move(probs)](Tape<T>& t, const Tensor<T>& o) {
                       std::span<T> dx = t.grad_buffer(logits);
                       const double scale = o.grad()[0] / static_cast<double>(count);
                       for (int n = 0; n < s.n; ++n) {
                         const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
                         for (std::size_t p = 0; p < plane; ++p) {
                           const int label = labels.data[static_cast<std::size_t>(n) * plane + p];
                           for (int c = 0; c < s.c; ++c) {
                             const std::size_t i = base + c * plane + p;
                             const double target = c == label ? 1.0 : 0.0;
                             dx[i] += static_cast<T>((probs[i] - target) * scale);
                           }
                         }
                       }
                     });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  double acc = 0.0;
  for (T v : xv.values()) acc += v;
  return tape.record(Tensor<T>(Shape{}, static_cast<T>(acc)), {x},
                     [x](Tape<T>& t, const Tensor<T>& o) {
                       const T g = o.grad()[0];
                       for (T& d : t.grad_buffer(x)) d += g;
                     });
}

template <typename T>
Var dot(Tape<T>& tape, Var x, const Tensor<T>& weights) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.shape() != weights.shape()) {
    throw_invalid("dot: weight shape " + weights.shape().str() + " != input " + xv.shape().str());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]) * weights[i];
  return tape.record(Tensor<T>(Shape{}, static_cast<T>(acc)), {x},
                     [x, weights](Tape<T>& t, const Tensor<T>& o) {
                       const T g = o.grad()[0];
                       std::span<T> dx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * weights[i];
                     });
}

template <typename T>
Var sum_squares(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  double acc = 0.0;
  for (T v : xv.values()) acc += static_cast<double>(v) * v;
  return tape.record(Tensor<T>(Shape{}, static_cast<T>(acc)), {x},
                     [x](Tape<T>& t, const Tensor<T>& o) {
                       const T g = o.grad()[0];
                       const Tensor<T>& v = t.value(x);
                       std::span<T> dx = t.grad_buffer(x);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2 * g * v[i];
                     });
}

#define MSFCN_INSTANTIATE_OPS(T)                                                               \
  template Var conv2d<T>(Tape<T>&, Var, Var, std::optional<Var>, const Conv2dOptions&);        \
  template Var deconv2d<T>(Tape<T>&, Var, Var, std::optional<Var>, const DeconvGeometry&, int); \
  template Var bilinear_upsample<T>(Tape<T>&, Var, int);                                       \
  template Var maxpool2d<T>(Tape<T>&, Var, int);                                               \
  template Var batchnorm2d<T>(Tape<T>&, Var, Var, Var, Mode, BatchNormStats<T>,                \
                              const BatchNormOptions&);                                        \
  template Var relu<T>(Tape<T>&, Var);                                                         \
  template Var concat<T>(Tape<T>&, std::span<const Var>);                                      \
  template Var dropout<T>(Tape<T>&, Var, double, Mode, Rng&);                                  \
  template Var softmax_cross_entropy<T>(Tape<T>&, Var, const LabelMap&);                       \
  template Var sum<T>(Tape<T>&, Var);                                                          \
  template Var dot<T>(Tape<T>&, Var, const Tensor<T>&);                                        \
  template Var sum_squares<T>(Tape<T>&, Var);                                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&);

MSFCN_INSTANTIATE_OPS(float)
MSFCN_INSTANTIATE_OPS(double)

#undef MSFCN_INSTANTIATE_OPS

}  // namespace ops

template <typename T>
Tensor<T> xavier_init(Shape shape, int fan_in, int fan_out, Rng& rng) {
  if (fan_in <= 0 || fan_out <= 0) {
    throw_invalid("xavier_init: fan_in and fan_out must be positive");
  }
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor<T> out(shape);
  for (T& v : out.values()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
  return out;
}

template Tensor<float> xavier_init<float>(Shape, int, int, Rng&);
template Tensor<double> xavier_init<double>(Shape, int, int, Rng&);

}  // namespace msfcn
