#include <benchmark/benchmark.h>

#include "msfcn/model.hpp"
#include "msfcn/ops.hpp"
#include "msfcn/trainer.hpp"

namespace {

using namespace msfcn;

ModelConfig preset(int which) { return which == 0 ? toy_model_config() : ModelConfig{}; }

Tensor<float> random_batch(const ModelConfig& cfg, int batch, Rng& rng) {
  Tensor<float> x({batch, cfg.in_channels, cfg.input_size, cfg.input_size});
  for (auto& v : x.values()) v = static_cast<float>(uniform01(rng));
  return x;
}

// Args: preset (0 toy, 1 default), batch.
void BM_ModelInference(benchmark::State& state) {
  const ModelConfig cfg = preset(static_cast<int>(state.range(0)));
  const int batch = static_cast<int>(state.range(1));
  Model<float> model(cfg, 1);
  Rng rng(1);
  const Tensor<float> x = random_batch(cfg, batch, rng);
  for (auto _ : state) {
    const Tensor<float> logits = model.infer(x);
    benchmark::DoNotOptimize(logits.data());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_ModelInference)->Args({0, 1})->Args({1, 1})->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const ModelConfig cfg = preset(static_cast<int>(state.range(0)));
  const int batch = static_cast<int>(state.range(1));
  Model<float> model(cfg, 1);
  auto opt_state = OptimizerState<float>::init(model.params());
  Rng rng(2);
  const Tensor<float> x = random_batch(cfg, batch, rng);
  LabelMap labels{batch, cfg.input_size, cfg.input_size, {}};
  labels.data.resize(static_cast<std::size_t>(batch) * cfg.input_size * cfg.input_size);
  for (auto& l : labels.data) l = static_cast<std::uint8_t>(rng() % cfg.classes);
  std::uint64_t iter = 0;
  for (auto _ : state) {
    Tape<float> tape;
    const Var logits = model.forward(tape, tape.constant(x), Mode::kTrain, ++iter);
    const Var loss = ops::softmax_cross_entropy(tape, logits, labels);
    tape.backward(loss);
    nesterov_step(model.params(), opt_state, StepOptions{1e-3, 0.9, 5e-4});
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_TrainStep)->Args({0, 4})->Args({1, 1})->Args({1, 4})->Unit(benchmark::kMillisecond);

}  // namespace
