// Convolution and full-generator throughput at the desk profile.

#include <benchmark/benchmark.h>

#include "mprvit/model.hpp"
#include "mprvit/nn_ops.hpp"
#include "mprvit/train.hpp"

using namespace mprvit;

static void Conv2dForward(benchmark::State& state) {
  const auto ch = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  Rng rng(3);
  auto x = Tensor::uniform({8, ch, hw, hw}, -1.0f, 1.0f, rng);
  auto w = Tensor::uniform({ch, ch, 3, 3}, -0.2f, 0.2f, rng);
  auto b = Tensor::zeros({ch});
  TapePause<float> pause;
  for (auto _ : state) {
    auto y = conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * 9 * ch * ch * hw * hw * 8);
}
BENCHMARK(Conv2dForward)->Args({16, 64})->Args({64, 16})->Args({64, 30});

static void GeneratorForward(benchmark::State& state) {
  Generator model(ModelConfig::desk(), 1);
  Rng rng(5);
  auto x = Tensor::uniform({1, 2, 64, 64}, -1.0f, 1.0f, rng);
  TapePause<float> pause;
  for (auto _ : state) {
    auto y = model.forward(x);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(GeneratorForward)->Unit(benchmark::kMillisecond);

static void GeneratorTrainStep(benchmark::State& state) {
  Generator model(ModelConfig::desk(), 1);
  model.params().set_requires_grad(true);
  Rng rng(7);
  auto x = Tensor::uniform({8, 2, 64, 64}, -1.0f, 1.0f, rng);
  auto target = Tensor::uniform({8, 1, 64, 64}, -0.5f, 0.5f, rng);
  OptimizerState opt;
  TrainConfig cfg;
  for (auto _ : state) {
    for (auto& [name, t] : model.params()) t.drop_grad();
    backward(l1_loss(model.forward(x), target));
    adamw_step(model.params(), opt, cfg);
  }
}
BENCHMARK(GeneratorTrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
