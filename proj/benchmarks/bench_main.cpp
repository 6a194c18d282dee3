#include <benchmark/benchmark.h>

#include <random>

#include "h2dilr/codebook.hpp"
#include "h2dilr/pipeline.hpp"

namespace h2dilr {
namespace {

Tensor random(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// args: tokens, codes, dim
void BM_NearestCodes(benchmark::State& state) {
  std::size_t L = state.range(0), K = state.range(1), D = state.range(2);
  std::mt19937_64 rng(1);
  Codebook cb = Codebook::uniform("bench", K, D, UpdateMode::ema, rng);
  Tensor z = random({L, D}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(nearest_codes(z, cb));
  state.SetItemsProcessed(state.iterations() * L);
}
BENCHMARK(BM_NearestCodes)->Args({512, 128, 64})->Args({2048, 256, 256});

// args: batch, channels, length
void BM_Conv1dForwardBackward(benchmark::State& state) {
  std::size_t B = state.range(0), C = state.range(1), T = state.range(2);
  Tensor x = random({B, C, T}, 3), w = random({2 * C, C, 4}, 4), b = random({2 * C}, 5);
  for (auto _ : state) {
    Graph g;
    Var xv = g.input(x), wv = g.input(w), bv = g.input(b);
    Var y = ops::conv1d(xv, wv, bv, Conv1dOptions{.stride = 2, .pad_left = 1, .pad_right = 1});
    g.backward(ops::sum(y));
    benchmark::DoNotOptimize(g.grad(wv));
  }
}
BENCHMARK(BM_Conv1dForwardBackward)->Args({32, 16, 256})->Args({32, 64, 128})->Unit(benchmark::kMillisecond);

// One stage-1 optimizer step at desk scale, args: nu in percent.
void BM_Stage1Step(benchmark::State& state) {
  Stage1Config cfg;
  cfg.T = 256;
  cfg.encoder.stem_channels = 16;
  cfg.encoder.block_channels = {32, 64, 128};
  cfg.encoder.latent_dim = 64;
  cfg.h2d.code_dim = 64;
  cfg.h2d.K_private = 32;
  cfg.h2d.nu = state.range(0) / 100.0;
  Stage1Model model(cfg, {19}, 7);
  AdamW opt;
  Tensor x = random({32, 256, 19}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(model.train_step(x, 0, opt, 1e-4));
}
BENCHMARK(BM_Stage1Step)->Arg(0)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace h2dilr

BENCHMARK_MAIN();
