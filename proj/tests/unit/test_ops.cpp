#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "msfcn/error.hpp"
#include "msfcn/gradcheck.hpp"
#include "msfcn/ops.hpp"

namespace msfcn {
namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

// Direct cross-correlation, one output element at a time.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const std::vector<double>& bias,
                          int stride, int pad, int groups) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  const int k = ws.h;
  const int ho = (xs.h + 2 * pad - k) / stride + 1;
  const int wo = (xs.w + 2 * pad - k) / stride + 1;
  const int cin_g = xs.c / groups;
  const int cout_g = ws.n / groups;
  Tensor<double> y({xs.n, ws.n, ho, wo});
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < ws.n; ++co)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = bias.empty() ? 0.0 : bias[co];
          const int g = co / cout_g;
          for (int ci = 0; ci < cin_g; ++ci)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const int r = i * stride - pad + ki;
                const int c = j * stride - pad + kj;
                if (r < 0 || r >= xs.h || c < 0 || c >= xs.w) continue;
                acc += x(n, g * cin_g + ci, r, c) * w(co, ci, ki, kj);
              }
          y(n, co, i, j) = acc;
        }
  return y;
}

// Transposed convolution by scattering every input pixel through the kernel.
Tensor<double> naive_deconv(const Tensor<double>& x, const Tensor<double>& w, const DeconvGeometry& g,
                            int groups) {
  const Shape xs = x.shape();
  const int cin_g = xs.c / groups;
  const int cout_g = w.shape().c;
  const int ho = g.output_extent(xs.h);
  const int wo = g.output_extent(xs.w);
  Tensor<double> y({xs.n, cout_g * groups, ho, wo});
  for (int n = 0; n < xs.n; ++n)
    for (int ci = 0; ci < xs.c; ++ci) {
      const int grp = ci / cin_g;
      for (int i = 0; i < xs.h; ++i)
        for (int j = 0; j < xs.w; ++j)
          for (int co = 0; co < cout_g; ++co)
            for (int ki = 0; ki < g.kernel; ++ki)
              for (int kj = 0; kj < g.kernel; ++kj) {
                const int r = i * g.stride - g.pad + ki;
                const int c = j * g.stride - g.pad + kj;
                if (r < 0 || r >= ho || c < 0 || c >= wo) continue;
                y(n, grp * cout_g + co, r, c) += x(n, ci, i, j) * w(ci, co, ki, kj);
              }
    }
  return y;
}

// Half-pixel-centre bilinear sample, computed per output pixel.
double bilinear_at(const Tensor<double>& x, int n, int c, double sy, double sx) {
  const Shape s = x.shape();
  sy = std::clamp(sy, 0.0, static_cast<double>(s.h - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(s.w - 1));
  const int y0 = static_cast<int>(std::floor(sy));
  const int x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, s.h - 1);
  const int x1 = std::min(x0 + 1, s.w - 1);
  const double fy = sy - y0;
  const double fx = sx - x0;
  return (1 - fy) * ((1 - fx) * x(n, c, y0, x0) + fx * x(n, c, y0, x1)) +
         fy * ((1 - fx) * x(n, c, y1, x0) + fx * x(n, c, y1, x1));
}

Tensor<double> forward_value(const std::function<Var(Tape<double>&)>& f) {
  Tape<double> tape;
  return tape.value(f(tape));
}

void expect_near_all(const Tensor<double>& a, const Tensor<double>& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "index " << i;
}

TEST(Conv2d, IdentityKernelReturnsInput) {
  Rng rng(1);
  const Tensor<double> x = random_tensor({1, 1, 3, 3}, rng);
  const Tensor<double> y = forward_value([&](Tape<double>& t) {
    return ops::conv2d(t, t.constant(x), t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)), std::nullopt, {1, 0, 1});
  });
  expect_near_all(y, x, 0.0);
}

TEST(Conv2d, SamePaddingKeepsExtent) {
  Tape<float> t;
  const Var y = ops::conv2d(t, t.constant(Tensor<float>({1, 1, 108, 108})),
                            t.constant(Tensor<float>({64, 1, 3, 3})), std::nullopt, {1, 1, 1});
  EXPECT_EQ(t.value(y).shape(), (Shape{1, 64, 108, 108}));
}

TEST(Conv2d, AllOnesSumsToEight) {
  const Tensor<double> y = forward_value([](Tape<double>& t) {
    return ops::conv2d(t, t.constant(Tensor<double>({1, 2, 2, 2}, 1.0)),
                       t.constant(Tensor<double>({1, 2, 2, 2}, 1.0)), t.constant(Tensor<double>({1, 1, 1, 1})),
                       {1, 0, 1});
  });
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 8.0);
}

TEST(Conv2d, MatchesDirectLoopsAcrossStridesPadsGroups) {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int groups = 1 + static_cast<int>(rng() % 3);
    const int cin = groups * (1 + static_cast<int>(rng() % 2));
    const int cout = groups * (1 + static_cast<int>(rng() % 3));
    const int k = 1 + static_cast<int>(rng() % 3);
    const int stride = 1 + static_cast<int>(rng() % 2);
    const int pad = static_cast<int>(rng() % 2);
    const int h = k + static_cast<int>(rng() % 6);
    const Tensor<double> x = random_tensor({2, cin, h, h + 1}, rng);
    const Tensor<double> w = random_tensor({cout, cin / groups, k, k}, rng);
    const Tensor<double> b = random_tensor({cout, 1, 1, 1}, rng);
    const Tensor<double> y = forward_value([&](Tape<double>& t) {
      return ops::conv2d(t, t.constant(x), t.constant(w), t.constant(b), {stride, pad, groups});
    });
    expect_near_all(y, naive_conv(x, w, {b.values().begin(), b.values().end()}, stride, pad, groups), 1e-12);
  }
}

TEST(Conv2d, GroupedEqualsIndependentSlices) {
  Rng rng(11);
  const int groups = 2;
  const Tensor<double> x = random_tensor({1, 4, 6, 6}, rng);
  const Tensor<double> w = random_tensor({6, 2, 3, 3}, rng);
  const Tensor<double> grouped = forward_value([&](Tape<double>& t) {
    return ops::conv2d(t, t.constant(x), t.constant(w), std::nullopt, {1, 1, groups});
  });
  for (int g = 0; g < groups; ++g) {
    Tensor<double> xs({1, 2, 6, 6});
    Tensor<double> ws({3, 2, 3, 3});
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) xs(0, c, i, j) = x(0, g * 2 + c, i, j);
    for (int o = 0; o < 3; ++o)
      for (std::size_t e = 0; e < 18; ++e) ws[o * 18 + e] = w[(g * 3 + o) * 18 + e];
    const Tensor<double> part = forward_value([&](Tape<double>& t) {
      return ops::conv2d(t, t.constant(xs), t.constant(ws), std::nullopt, {1, 1, 1});
    });
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(grouped(0, g * 3 + o, i, j), part(0, o, i, j));
  }
}

TEST(Conv2d, ChannelMismatchNamesDimension) {
  Tape<double> t;
  try {
    ops::conv2d(t, t.constant(Tensor<double>({1, 3, 5, 5})), t.constant(Tensor<double>({2, 2, 3, 3})),
                std::nullopt, {1, 0, 1});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  Tape<double> t;
  EXPECT_THROW(ops::conv2d(t, t.constant(Tensor<double>({1, 1, 2, 2})), t.constant(Tensor<double>({1, 1, 5, 5})),
                           std::nullopt, {1, 1, 1}),
               Error);
}

TEST(Deconv2d, RatioGeometryGivesExactUpscale) {
  for (int r : {2, 3, 6, 9, 12, 18, 36}) {
    const DeconvGeometry g = DeconvGeometry::for_ratio(r);
    for (int in : {1, 3, 6, 9, 18}) EXPECT_EQ(g.output_extent(in), r * in) << "ratio " << r << " in " << in;
  }
}

TEST(Deconv2d, FullScaleShapes) {
  Tape<float> t;
  const Var a = ops::deconv2d(t, t.constant(Tensor<float>({1, 1, 9, 9})),
                              t.constant(Tensor<float>({1, 4, 7, 7})), std::nullopt, DeconvGeometry::for_ratio(3), 1);
  EXPECT_EQ(t.value(a).shape(), (Shape{1, 4, 27, 27}));
  const DeconvGeometry g18 = DeconvGeometry::for_ratio(18);
  const Var b = ops::deconv2d(t, t.constant(Tensor<float>({1, 1, 3, 3})),
                              t.constant(Tensor<float>({1, 2, g18.kernel, g18.kernel})), std::nullopt, g18, 1);
  EXPECT_EQ(t.value(b).shape(), (Shape{1, 2, 54, 54}));
}

TEST(Deconv2d, SinglePixelSpreadsOverKernel) {
  const Tensor<double> y = forward_value([](Tape<double>& t) {
    return ops::deconv2d(t, t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
                         t.constant(Tensor<double>({1, 1, 2, 2}, 1.0)), std::nullopt, DeconvGeometry{2, 2, 0, 0}, 1);
  });
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 1.0);
}

TEST(Deconv2d, MatchesScatterOracle) {
  Rng rng(5);
  for (int r : {2, 3, 6}) {
    for (int groups : {1, 2}) {
      const DeconvGeometry g = DeconvGeometry::for_ratio(r);
      const Tensor<double> x = random_tensor({2, 4, 3, 4}, rng);
      const Tensor<double> w = random_tensor({4, 6 / groups, g.kernel, g.kernel}, rng);
      const Tensor<double> y = forward_value([&](Tape<double>& t) {
        return ops::deconv2d(t, t.constant(x), t.constant(w), std::nullopt, g, groups);
      });
      expect_near_all(y, naive_deconv(x, w, g, groups), 1e-12);
    }
  }
}

TEST(Deconv2d, IsAdjointOfConv) {
  // <deconv(x), y> == <x, conv(y)> for the same weights and geometry.
  Rng rng(9);
  const DeconvGeometry g{4, 2, 1, 0};
  const Tensor<double> x = random_tensor({1, 3, 5, 5}, rng);
  const Tensor<double> w = random_tensor({3, 2, 4, 4}, rng);
  const Tensor<double> up = forward_value([&](Tape<double>& t) {
    return ops::deconv2d(t, t.constant(x), t.constant(w), std::nullopt, g, 1);
  });
  const Tensor<double> y = random_tensor(up.shape(), rng);
  // conv weights are [Cout=3, Cin=2, k, k], i.e. the same array read the other way round.
  const Tensor<double> down = forward_value([&](Tape<double>& t) {
    return ops::conv2d(t, t.constant(y), t.constant(w), std::nullopt, {g.stride, g.pad, 1});
  });
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < up.size(); ++i) lhs += up[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * down[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Deconv2d, RatioWithoutIntegerPaddingThrows) {
  EXPECT_THROW(DeconvGeometry::for_ratio(1), Error);
  EXPECT_THROW((DeconvGeometry{3, 2, 0, 0}.validate_ratio(4, 2)), Error);
}

TEST(Bilinear, ConstantStaysConstant) {
  for (int r : {1, 2, 3, 6}) {
    const Tensor<double> y = forward_value([&](Tape<double>& t) {
      return ops::bilinear_upsample(t, t.constant(Tensor<double>({1, 2, 3, 4}, 0.7)), r);
    });
    EXPECT_EQ(y.shape(), (Shape{1, 2, 3 * r, 4 * r}));
    for (double v : y.values()) EXPECT_NEAR(v, 0.7, 1e-15);
  }
}

TEST(Bilinear, RatioOneIsIdentity) {
  Rng rng(3);
  const Tensor<double> x = random_tensor({1, 2, 4, 5}, rng);
  expect_near_all(forward_value([&](Tape<double>& t) { return ops::bilinear_upsample(t, t.constant(x), 1); }), x,
                  0.0);
}

TEST(Bilinear, MatchesScalarInterpolation) {
  const Tensor<double> x({1, 1, 2, 2}, {0.0, 2.0, 2.0, 4.0});
  const Tensor<double> y = forward_value([&](Tape<double>& t) { return ops::bilinear_upsample(t, t.constant(x), 2); });
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      EXPECT_NEAR(y(0, 0, i, j), bilinear_at(x, 0, 0, (i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5), 1e-15);
    }
  // Corners replicate the edge; the next pixel in is a quarter of the way across.
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 1), 0.5);
  EXPECT_DOUBLE_EQ(y(0, 0, 1, 1), 1.0);
  EXPECT_DOUBLE_EQ(y(0, 0, 3, 3), 4.0);

  Rng rng(4);
  const Tensor<double> z = random_tensor({2, 2, 3, 5}, rng);
  const Tensor<double> u = forward_value([&](Tape<double>& t) { return ops::bilinear_upsample(t, t.constant(z), 3); });
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 15; ++j)
          EXPECT_NEAR(u(n, c, i, j), bilinear_at(z, n, c, (i + 0.5) / 3 - 0.5, (j + 0.5) / 3 - 0.5), 1e-14);
}

TEST(MaxPool, SmallWindow) {
  const Tensor<double> y = forward_value([](Tape<double>& t) {
    return ops::maxpool2d(t, t.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4})), 2);
  });
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 4.0);
}

TEST(MaxPool, SubpathRatios) {
  Tape<float> t;
  const Var x = t.constant(Tensor<float>({1, 1, 108, 108}));
  EXPECT_EQ(t.value(ops::maxpool2d(t, x, 2)).shape(), (Shape{1, 1, 54, 54}));
  EXPECT_EQ(t.value(ops::maxpool2d(t, x, 36)).shape(), (Shape{1, 1, 3, 3}));
}

TEST(MaxPool, EveryOutputIsItsWindowMax) {
  Rng rng(12);
  for (int r : {2, 3, 6}) {
    const Tensor<double> x = random_tensor({2, 3, 2 * r, 3 * r}, rng);
    const Tensor<double> y = forward_value([&](Tape<double>& t) { return ops::maxpool2d(t, t.constant(x), r); });
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 3; ++j) {
            double m = -1e300;
            for (int a = 0; a < r; ++a)
              for (int b = 0; b < r; ++b) m = std::max(m, x(n, c, i * r + a, j * r + b));
            EXPECT_EQ(y(n, c, i, j), m);
          }
  }
}

TEST(MaxPool, TiesRouteGradientToFirstMaximum) {
  Tensor<double> x({1, 1, 2, 2}, 5.0);
  Tape<double> t;
  t.backward(ops::sum(t, ops::maxpool2d(t, t.parameter(x), 2)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 0.0);
  EXPECT_EQ(x.grad()[3], 0.0);
}

TEST(MaxPool, NonDivisibleExtentThrows) {
  Tape<double> t;
  EXPECT_THROW(ops::maxpool2d(t, t.constant(Tensor<double>({1, 1, 5, 4})), 2), Error);
}

struct BnFixture {
  Tensor<double> mean{{1, 2, 1, 1}};
  Tensor<double> var{{1, 2, 1, 1}, 1.0};
  BatchNormStats<double> stats() { return {&mean, &var}; }
};

TEST(BatchNorm, TrainModeNormalisesEachChannel) {
  Rng rng(2);
  const Tensor<double> x = random_tensor({3, 2, 4, 5}, rng, -3.0, 7.0);
  BnFixture bn;
  const Tensor<double> y = forward_value([&](Tape<double>& t) {
    return ops::batchnorm2d(t, t.constant(x), t.constant(Tensor<double>({1, 2, 1, 1}, 1.0)),
                            t.constant(Tensor<double>({1, 2, 1, 1})), Mode::kTrain, bn.stats(), {});
  });
  for (int c = 0; c < 2; ++c) {
    double s = 0, ss = 0;
    int cnt = 0;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j, ++cnt) s += y(n, c, i, j);
    const double mu = s / cnt;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) ss += (y(n, c, i, j) - mu) * (y(n, c, i, j) - mu);
    EXPECT_LT(std::abs(mu), 1e-6);
    EXPECT_NEAR(ss / cnt, 1.0, 1e-5);
  }
}

TEST(BatchNorm, ConstantChannelGivesZeros) {
  BnFixture bn;
  const Tensor<double> y = forward_value([&](Tape<double>& t) {
    return ops::batchnorm2d(t, t.constant(Tensor<double>({2, 2, 3, 3}, 4.2)),
                            t.constant(Tensor<double>({1, 2, 1, 1}, 1.0)), t.constant(Tensor<double>({1, 2, 1, 1})),
                            Mode::kTrain, bn.stats(), {});
  });
  for (double v : y.values()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(BatchNorm, AffineScaleAndShift) {
  Rng rng(8);
  const Tensor<double> x = random_tensor({4, 2, 6, 6}, rng);
  BnFixture bn;
  const Tensor<double> y = forward_value([&](Tape<double>& t) {
    return ops::batchnorm2d(t, t.constant(x), t.constant(Tensor<double>({1, 2, 1, 1}, 2.0)),
                            t.constant(Tensor<double>({1, 2, 1, 1}, 3.0)), Mode::kTrain, bn.stats(), {});
  });
  for (int c = 0; c < 2; ++c) {
    double s = 0, ss = 0;
    const int cnt = 4 * 36;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 36; ++i) s += y(n, c, i / 6, i % 6);
    const double mu = s / cnt;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 36; ++i) ss += std::pow(y(n, c, i / 6, i % 6) - mu, 2);
    EXPECT_NEAR(mu, 3.0, 1e-9);
    EXPECT_NEAR(std::sqrt(ss / cnt), 2.0, 1e-4);
  }
}

TEST(BatchNorm, RunningStatsFollowMomentumAndDriveEvalMode) {
  const Tensor<double> x({2, 1, 1, 2}, {1.0, 3.0, 5.0, 7.0});
  Tensor<double> mean({1, 1, 1, 1});
  Tensor<double> var({1, 1, 1, 1}, 1.0);
  forward_value([&](Tape<double>& t) {
    return ops::batchnorm2d(t, t.constant(x), t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
                            t.constant(Tensor<double>({1, 1, 1, 1})), Mode::kTrain, {&mean, &var}, {});
  });
  // batch mean 4, unbiased variance 20/3
  EXPECT_NEAR(mean[0], 0.1 * 4.0, 1e-12);
  EXPECT_NEAR(var[0], 0.9 * 1.0 + 0.1 * (20.0 / 3.0), 1e-12);
  const Tensor<double> y = forward_value([&](Tape<double>& t) {
    return ops::batchnorm2d(t, t.constant(x), t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
                            t.constant(Tensor<double>({1, 1, 1, 1})), Mode::kEval, {&mean, &var}, {});
  });
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], (x[i] - mean[0]) / std::sqrt(var[0] + 1e-5), 1e-12);
}

TEST(BatchNorm, ChannelMismatchThrows) {
  BnFixture bn;
  Tape<double> t;
  EXPECT_THROW(ops::batchnorm2d(t, t.constant(Tensor<double>({1, 3, 2, 2})),
                                t.constant(Tensor<double>({1, 2, 1, 1})), t.constant(Tensor<double>({1, 2, 1, 1})),
                                Mode::kTrain, bn.stats(), {}),
               Error);
}

TEST(Relu, ClampsNegatives) {
  const Tensor<double> y = forward_value(
      [](Tape<double>& t) { return ops::relu(t, t.constant(Tensor<double>({1, 1, 1, 3}, {-1.0, 0.0, 2.0}))); });
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.0);
}

TEST(Concat, StacksChannelsAndSlicesBack) {
  Rng rng(6);
  const Tensor<double> a = random_tensor({2, 3, 4, 4}, rng);
  const Tensor<double> b = random_tensor({2, 5, 4, 4}, rng);
  const Tensor<double> y = forward_value([&](Tape<double>& t) {
    const Var xs[] = {t.constant(a), t.constant(b)};
    return ops::concat(t, std::span<const Var>(xs));
  });
  ASSERT_EQ(y.shape(), (Shape{2, 8, 4, 4}));
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        for (int c = 0; c < 3; ++c) EXPECT_EQ(y(n, c, i, j), a(n, c, i, j));
        for (int c = 0; c < 5; ++c) EXPECT_EQ(y(n, 3 + c, i, j), b(n, c, i, j));
      }
}

TEST(Concat, SpatialMismatchThrows) {
  Tape<double> t;
  const Var xs[] = {t.constant(Tensor<double>({1, 1, 4, 4})), t.constant(Tensor<double>({1, 1, 4, 5}))};
  EXPECT_THROW(ops::concat(t, std::span<const Var>(xs)), Error);
}

TEST(Dropout, ZeroProbabilityIsIdentity) {
  Rng data(1);
  const Tensor<double> x = random_tensor({1, 2, 5, 5}, data);
  for (Mode m : {Mode::kTrain, Mode::kEval}) {
    Rng rng(3);
    expect_near_all(forward_value([&](Tape<double>& t) { return ops::dropout(t, t.constant(x), 0.0, m, rng); }), x,
                    0.0);
  }
}

TEST(Dropout, EvalModeIsIdentity) {
  Rng data(1), rng(2);
  const Tensor<double> x = random_tensor({1, 2, 5, 5}, data);
  expect_near_all(
      forward_value([&](Tape<double>& t) { return ops::dropout(t, t.constant(x), 0.5, Mode::kEval, rng); }), x, 0.0);
}

TEST(Dropout, InvertedScalingAndRate) {
  Rng rng(4);
  const Tensor<double> y = forward_value([&](Tape<double>& t) {
    return ops::dropout(t, t.constant(Tensor<double>({1, 1, 200, 200}, 1.0)), 0.5, Mode::kTrain, rng);
  });
  std::size_t kept = 0;
  for (double v : y.values()) {
    ASSERT_TRUE(v == 0.0 || v == 2.0) << v;
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / y.size(), 0.5, 0.01);
}

TEST(Dropout, SameSeedSameMask) {
  const Tensor<double> x({1, 1, 16, 16}, 1.0);
  Rng a(77), b(77);
  const Tensor<double> ya =
      forward_value([&](Tape<double>& t) { return ops::dropout(t, t.constant(x), 0.5, Mode::kTrain, a); });
  const Tensor<double> yb =
      forward_value([&](Tape<double>& t) { return ops::dropout(t, t.constant(x), 0.5, Mode::kTrain, b); });
  EXPECT_EQ(ya.values().size(), yb.values().size());
  EXPECT_TRUE(std::equal(ya.values().begin(), ya.values().end(), yb.values().begin()));
}

TEST(Dropout, InvalidProbabilityThrows) {
  Rng rng(1);
  Tape<double> t;
  EXPECT_THROW(ops::dropout(t, t.constant(Tensor<double>({1, 1, 2, 2})), 1.0, Mode::kTrain, rng), Error);
}

LabelMap labels_of(int n, int h, int w, std::vector<std::uint8_t> v) { return LabelMap{n, h, w, std::move(v)}; }

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogK) {
  const Tensor<double> loss = forward_value([](Tape<double>& t) {
    return ops::softmax_cross_entropy(t, t.constant(Tensor<double>({1, 3, 2, 2}, 0.3)),
                                      labels_of(1, 2, 2, {0, 1, 2, 1}));
  });
  EXPECT_NEAR(loss[0], std::log(3.0), 1e-15);
}

TEST(SoftmaxCrossEntropy, ConfidentCorrectLogitIsNearZero) {
  const Tensor<double> loss = forward_value([](Tape<double>& t) {
    return ops::softmax_cross_entropy(t, t.constant(Tensor<double>({1, 2, 1, 1}, {50.0, 0.0})),
                                      labels_of(1, 1, 1, {0}));
  });
  EXPECT_LT(loss[0], 1e-6);
}

TEST(SoftmaxCrossEntropy, TwoClassScalar) {
  const Tensor<double> loss = forward_value([](Tape<double>& t) {
    return ops::softmax_cross_entropy(t, t.constant(Tensor<double>({1, 2, 1, 1}, {1.0, 0.0})),
                                      labels_of(1, 1, 1, {0}));
  });
  EXPECT_NEAR(loss[0], -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-15);
  EXPECT_NEAR(loss[0], 0.3133, 1e-4);
}

TEST(SoftmaxCrossEntropy, GradientIsSoftmaxMinusOneHotOverPixels) {
  Rng rng(13);
  Tensor<double> logits = random_tensor({2, 3, 2, 2}, rng, -2.0, 2.0);
  LabelMap labels = labels_of(2, 2, 2, {0, 1, 2, 0, 2, 2, 1, 0});
  Tape<double> t;
  t.backward(ops::softmax_cross_entropy(t, t.parameter(logits), labels));
  const Tensor<double> p = ops::softmax(logits);
  for (int n = 0; n < 2; ++n)
    for (int k = 0; k < 3; ++k)
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
          const double onehot = labels(n, i, j) == k ? 1.0 : 0.0;
          const std::size_t idx = ((static_cast<std::size_t>(n) * 3 + k) * 2 + i) * 2 + j;
          EXPECT_NEAR(logits.grad()[idx], (p(n, k, i, j) - onehot) / 8.0, 1e-15);
        }
}

TEST(SoftmaxCrossEntropy, LabelOutOfRangeNamesPixel) {
  Tape<double> t;
  try {
    ops::softmax_cross_entropy(t, t.constant(Tensor<double>({1, 2, 2, 2})), labels_of(1, 2, 2, {0, 1, 0, 5}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
    EXPECT_NE(std::string(e.what()).find("n=0, y=1, x=1"), std::string::npos) << e.what();
  }
}

TEST(Softmax, SumsToOnePerPixel) {
  Rng rng(21);
  const Tensor<double> logits = random_tensor({2, 5, 3, 3}, rng, -20.0, 20.0);
  const Tensor<double> p = ops::softmax(logits);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 5; ++k) s += p(n, k, i, j);
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
}

TEST(Backward, SumGivesOnes) {
  Rng rng(1);
  Tensor<double> x = random_tensor({2, 3, 4, 5}, rng);
  Tape<double> t;
  t.backward(ops::sum(t, t.parameter(x)));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ReluOfNegativesGivesZeros) {
  Tensor<double> x({1, 1, 3, 3}, -0.5);
  Tape<double> t;
  t.backward(ops::sum(t, ops::relu(t, t.parameter(x))));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, FanOutAccumulates) {
  Tensor<double> x({1, 1, 1, 3}, {1.0, 2.0, 3.0});
  Tape<double> t;
  const Var v = t.parameter(x);
  const Var both[] = {v, v};
  t.backward(ops::sum_squares(t, ops::concat(t, std::span<const Var>(both))));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 4.0 * x[i]);
}

TEST(Backward, UnreachableParameterEndsAtZero) {
  Tensor<double> used({1, 1, 1, 2}, 1.0);
  Tensor<double> unused({1, 1, 1, 2}, 1.0);
  unused.grad()[0] = 42.0;
  Tape<double> t;
  t.parameter(unused);
  t.backward(ops::sum(t, t.parameter(used)));
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossThrows) {
  Tape<double> t;
  const Var x = t.variable(Tensor<double>({1, 1, 2, 2}));
  EXPECT_THROW(t.backward(x), Error);
}

TEST(Backward, TapeIsConsumed) {
  Tape<double> t;
  const Var loss = ops::sum(t, t.variable(Tensor<double>({1, 1, 2, 2})));
  t.backward(loss);
  EXPECT_TRUE(t.consumed());
  EXPECT_THROW(t.backward(loss), Error);
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  Rng rng(31);
  Tensor<double> x = random_tensor({2, 2, 6, 6}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  Tensor<double> scale = random_tensor({1, 3, 1, 1}, rng, 0.5, 1.5);
  Tensor<double> shift = random_tensor({1, 3, 1, 1}, rng);
  Tensor<double> proj = random_tensor({2, 3, 3, 3}, rng);
  Tensor<double> mean({1, 3, 1, 1}), var({1, 3, 1, 1}, 1.0);
  const LossFn f = [&](Tape<double>& t) {
    const Var c = ops::conv2d(t, t.parameter(x), t.parameter(w), std::nullopt, {1, 1, 1});
    const Var b = ops::batchnorm2d(t, c, t.parameter(scale), t.parameter(shift), Mode::kTrain, {&mean, &var}, {});
    return ops::dot(t, ops::maxpool2d(t, ops::relu(t, b), 2), proj);
  };
  const GradCheckTarget targets[] = {{"x", &x}, {"w", &w}, {"scale", &scale}, {"shift", &shift}};
  const GradCheckResult r = grad_check(f, targets, {});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_target << "[" << r.worst_index << "]";
  EXPECT_GE(r.coordinates, 100u);
}

TEST(GradCheck, SumOfSquaresIsExact) {
  Rng rng(41);
  Tensor<double> x = random_tensor({1, 1, 4, 4}, rng);
  const LossFn f = [&](Tape<double>& t) { return ops::sum_squares(t, t.parameter(x)); };
  const GradCheckTarget targets[] = {{"x", &x}};
  const GradCheckResult r = grad_check(f, targets, {});
  EXPECT_EQ(r.coordinates, 16u);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, QuadraticErrorIsRoundoffOnly) {
  // Central differences are exact for quadratics; what remains is the
  // cancellation error of f(x + eps) - f(x - eps), about ulp(f) / eps.
  Rng rng(42);
  Tensor<double> x = random_tensor({2, 3, 5, 5}, rng);
  const LossFn f = [&](Tape<double>& t) { return ops::sum_squares(t, t.parameter(x)); };
  const GradCheckTarget targets[] = {{"x", &x}};
  const GradCheckResult r = grad_check(f, targets, {});
  EXPECT_LT(std::abs(r.worst_analytic - r.worst_numeric), 1e-9);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A backward rule that doubles the true gradient must be reported.
  Tensor<double> x({1, 1, 2, 2}, {0.5, -1.0, 2.0, 1.5});
  const LossFn f = [&](Tape<double>& t) {
    const Var p = t.parameter(x);
    const Tensor<double>& v = t.value(p);
    double s = 0;
    for (double e : v.values()) s += e * e;
    const Var y = t.record(Tensor<double>({1, 1, 1, 1}, s), {p}, [p](Tape<double>& tp, const Tensor<double>& out) {
      const double g = out.grad()[0];
      auto gx = tp.grad_buffer(p);
      const Tensor<double>& xv = tp.value(p);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 4.0 * xv[i] * g;
    });
    return y;
  };
  const GradCheckTarget targets[] = {{"x", &x}};
  EXPECT_GT(grad_check(f, targets, {}).max_rel_error, 0.3);
}

TEST(GradCheck, NonFiniteLossNamesCoordinate) {
  Tensor<double> x({1, 1, 1, 2}, {1.0, 1e-12});
  const LossFn f = [&](Tape<double>& t) {
    const Var p = t.parameter(x);
    const Tensor<double>& v = t.value(p);
    const double s = std::log(v[1]);
    return t.record(Tensor<double>({1, 1, 1, 1}, s), {p}, [p](Tape<double>& tp, const Tensor<double>& out) {
      tp.grad_buffer(p)[1] += out.grad()[0] / tp.value(p)[1];
    });
  };
  const GradCheckTarget targets[] = {{"x", &x}};
  GradCheckOptions opt;
  opt.coordinates = 2;
  try {
    grad_check(f, targets, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
    EXPECT_NE(std::string(e.what()).find("x[1]"), std::string::npos) << e.what();
  }
}

TEST(Xavier, BoundAndSupport) {
  Rng rng(5);
  const Tensor<double> w = xavier_init<double>({3, 1, 1, 1}, 3, 3, rng);
  for (double v : w.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Xavier, VarianceMatchesUniform) {
  Rng rng(6);
  const int fan_in = 10, fan_out = 20;
  const Tensor<double> w = xavier_init<double>({1, 1, 1, 100000}, fan_in, fan_out, rng);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  double s = 0, ss = 0;
  for (double v : w.values()) {
    ASSERT_LE(std::abs(v), a);
    s += v;
  }
  const double mu = s / w.size();
  for (double v : w.values()) ss += (v - mu) * (v - mu);
  const double var = ss / (w.size() - 1);
  EXPECT_NEAR(var / (a * a / 3.0), 1.0, 0.05);
}

TEST(Xavier, DeterministicPerSeed) {
  Rng a(99), b(99);
  const Tensor<float> x = xavier_init<float>({4, 3, 3, 3}, 27, 36, a);
  const Tensor<float> y = xavier_init<float>({4, 3, 3, 3}, 27, 36, b);
  EXPECT_TRUE(std::equal(x.values().begin(), x.values().end(), y.values().begin()));
}

TEST(TensorShape, DataLengthMatchesShape) {
  const Tensor<float> t({2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  EXPECT_THROW(Tensor<float>({2, 3, 4, 5}, std::vector<float>(119)), Error);
  EXPECT_THROW(Tensor<float>({0, 1, 1, 1}), Error);
}

}  // namespace
}  // namespace msfcn
