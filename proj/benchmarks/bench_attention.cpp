// Tiled vs full-matrix attention across sequence lengths and tile sizes.

#include <benchmark/benchmark.h>

#include "mprvit/attention.hpp"
#include "mprvit/rng.hpp"

using namespace mprvit;

namespace {

struct Qkv {
  Tensor q, k, v;
};

Qkv make_qkv(std::size_t t, std::size_t d) {
  Rng rng(17);
  return {Tensor::uniform({t, d}, -1.0f, 1.0f, rng), Tensor::uniform({t, d}, -1.0f, 1.0f, rng),
          Tensor::uniform({t, d}, -1.0f, 1.0f, rng)};
}

}  // namespace

static void NaiveAttention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  auto qkv = make_qkv(t, 64);
  TapePause<float> pause;
  for (auto _ : state) {
    auto out = naive_attention(qkv.q, qkv.k, qkv.v);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(NaiveAttention)->RangeMultiplier(2)->Range(32, 256)->Complexity();

static void FlashAttention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  auto qkv = make_qkv(t, 64);
  AttentionConfig cfg;
  cfg.tile_q = static_cast<int>(state.range(1));
  cfg.tile_k = static_cast<int>(state.range(1));
  TapePause<float> pause;
  for (auto _ : state) {
    auto out = flash_attention(qkv.q, qkv.k, qkv.v, cfg);
    benchmark::DoNotOptimize(out.data().data());
  }
}
BENCHMARK(FlashAttention)
    ->ArgsProduct({benchmark::CreateRange(32, 256, 2), {8, 32, 64}});

static void MultiHeadAttention(benchmark::State& state) {
  const std::size_t t = 64, dim = 96;
  Rng rng(23);
  auto x = Tensor::uniform({t, dim}, -1.0f, 1.0f, rng);
  MhaWeights w;
  w.wq = Tensor::uniform({dim, dim}, -0.2f, 0.2f, rng);
  w.wk = Tensor::uniform({dim, dim}, -0.2f, 0.2f, rng);
  w.wv = Tensor::uniform({dim, dim}, -0.2f, 0.2f, rng);
  w.wo = Tensor::uniform({dim, dim}, -0.2f, 0.2f, rng);
  w.bq = Tensor::zeros({dim});
  w.bk = Tensor::zeros({dim});
  w.bv = Tensor::zeros({dim});
  w.bo = Tensor::zeros({dim});
  AttentionConfig cfg{4, 24, 32, 32};
  TapePause<float> pause;
  for (auto _ : state) {
    auto out = multi_head_attention(x, w, cfg);
    benchmark::DoNotOptimize(out.data().data());
  }
}
BENCHMARK(MultiHeadAttention);

BENCHMARK_MAIN();
