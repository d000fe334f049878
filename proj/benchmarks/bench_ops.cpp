#include <benchmark/benchmark.h>

#include "msfcn/ops.hpp"

namespace {

using namespace msfcn;

Tensor<float> random_tensor(Shape shape, Rng& rng) {
  Tensor<float> t(shape);
  for (auto& v : t.values()) v = static_cast<float>(uniform01(rng) * 2.0 - 1.0);
  return t;
}

// Args: channels, spatial extent.
void BM_Conv3x3Forward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int hw = static_cast<int>(state.range(1));
  Rng rng(1);
  Tensor<float> x = random_tensor({1, c, hw, hw}, rng);
  Tensor<float> w = random_tensor({c, c, 3, 3}, rng);
  for (auto _ : state) {
    Tape<float> tape;
    const Var y = ops::conv2d(tape, tape.constant(x), tape.constant(w), std::nullopt, {1, 1, 1});
    benchmark::DoNotOptimize(tape.value(y).data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * c * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv3x3Forward)->Args({64, 108})->Args({128, 54})->Args({256, 9})->Unit(benchmark::kMillisecond);

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int hw = static_cast<int>(state.range(1));
  Rng rng(2);
  Tensor<float> x = random_tensor({1, c, hw, hw}, rng);
  Tensor<float> w = random_tensor({c, c, 3, 3}, rng);
  for (auto _ : state) {
    Tape<float> tape;
    const Var y = ops::conv2d(tape, tape.variable(x), tape.parameter(w), std::nullopt, {1, 1, 1});
    tape.backward(ops::sum(tape, y));
    benchmark::DoNotOptimize(w.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 6LL * c * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv3x3ForwardBackward)->Args({64, 108})->Args({128, 54})->Unit(benchmark::kMillisecond);

// Args: ratio, groups. 32 channels on a 54 / ratio input, as in the pooling subpaths.
void BM_DeconvUpsample(benchmark::State& state) {
  const int ratio = static_cast<int>(state.range(0));
  const int groups = static_cast<int>(state.range(1));
  const int c = 32;
  const int hw = 54 / ratio;
  const DeconvGeometry g = DeconvGeometry::for_ratio(ratio);
  Rng rng(3);
  Tensor<float> x = random_tensor({1, c, hw, hw}, rng);
  Tensor<float> w = random_tensor({c, c / groups, g.kernel, g.kernel}, rng);
  for (auto _ : state) {
    Tape<float> tape;
    const Var y = ops::deconv2d(tape, tape.variable(x), tape.parameter(w), std::nullopt, g, groups);
    tape.backward(ops::sum(tape, y));
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_DeconvUpsample)
    ->Args({3, 1})
    ->Args({3, 32})
    ->Args({9, 1})
    ->Args({9, 32})
    ->Args({18, 1})
    ->Args({18, 32})
    ->Unit(benchmark::kMicrosecond);

void BM_MaxPool(benchmark::State& state) {
  const int ratio = static_cast<int>(state.range(0));
  Rng rng(4);
  Tensor<float> x = random_tensor({1, 64, 108, 108}, rng);
  for (auto _ : state) {
    Tape<float> tape;
    const Var y = ops::maxpool2d(tape, tape.constant(x), ratio);
    benchmark::DoNotOptimize(tape.value(y).data());
  }
}
BENCHMARK(BM_MaxPool)->Arg(2)->Arg(6)->Arg(18)->Arg(36)->Unit(benchmark::kMicrosecond);

}  // namespace
