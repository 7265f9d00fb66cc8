#include <benchmark/benchmark.h>

#include "fedleak/attack.hpp"
#include "fedleak/data.hpp"
#include "fedleak/fedsim.hpp"
#include "fedleak/metrics.hpp"
#include "fedleak/prng.hpp"
#include "fedleak/secagg.hpp"

using namespace fedleak;

namespace {

AttackModule bench_module(std::size_t channels, std::size_t side,
                          std::size_t bins) {
  AttackModuleConfig cfg;
  cfg.in_channels = channels;
  cfg.height = cfg.width = side;
  cfg.kernels = channels * 8;
  cfg.num_bins = bins;
  cfg.identity_set = 2;
  cfg.bias_mean = channels == 1 ? 0.5 : 1.5;
  cfg.bias_sd = channels == 1 ? 0.25 : 0.5;
  return build_attack_module(cfg);
}

ImageBatch bench_batch(std::size_t n, std::size_t channels, std::size_t side) {
  ImageBatch b;
  b.client_id = 0;
  const BrightnessProfile p{channels == 1 ? 0.5 : 1.5, 0.2};
  for (std::size_t i = 0; i < n; ++i) {
    b.images.push_back(synth_image(p, channels, side, side, 1000 + i));
    b.labels.push_back(int(i % 10));
  }
  return b;
}

void BM_ClientStepCifarLike(benchmark::State& state) {
  const AttackModule m = bench_module(3, 32, 256);
  const ImageBatch batch = bench_batch(std::size_t(state.range(0)), 3, 32);
  for (auto _ : state) {
    benchmark::DoNotOptimize(client_step(m, batch));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ClientStepCifarLike)->Arg(8)->Arg(64);

void BM_ClientStepMnistLike(benchmark::State& state) {
  const AttackModule m = bench_module(1, 28, 256);
  const ImageBatch batch = bench_batch(std::size_t(state.range(0)), 1, 28);
  for (auto _ : state) {
    benchmark::DoNotOptimize(client_step(m, batch));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ClientStepMnistLike)->Arg(64);

void BM_ReconstructGroup(benchmark::State& state) {
  const AttackModule m = bench_module(3, 32, 256);
  const ImageBatch batch = bench_batch(64, 3, 32);
  const GradientUpdate u = client_step(m, batch);
  ReconstructOptions opt;
  for (auto _ : state) {
    benchmark::DoNotOptimize(reconstruct_group(0, 2, {0}, u.grads.fc1_w,
                                               m.bin_cutoffs, 3, 32, 32, opt,
                                               nullptr));
  }
}
BENCHMARK(BM_ReconstructGroup);

void BM_MaskAndAggregate(benchmark::State& state) {
  const std::size_t n = std::size_t(state.range(0)), len = 1 << 16;
  const FixedPointCodec codec;
  Prng rng(3);
  std::vector<std::vector<std::uint64_t>> encoded(n);
  for (auto& e : encoded) {
    std::vector<double> v(len);
    for (double& x : v) x = rng.next_uniform(-1, 1);
    e = encode(v, codec);
  }
  const auto seeds = PairwiseSeeds::derive(n, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(aggregate(mask_updates(encoded, seeds)));
  }
  state.SetBytesProcessed(state.iterations() * int64_t(n) * int64_t(len) * 8);
}
BENCHMARK(BM_MaskAndAggregate)->Arg(4)->Arg(16);

void BM_Ssim32(benchmark::State& state) {
  const Tensor a = synth_image({1.5, 0.3}, 3, 32, 32, 5);
  const Tensor b = synth_image({1.5, 0.3}, 3, 32, 32, 6);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ssim(a, b));
  }
}
BENCHMARK(BM_Ssim32);

}  // namespace

BENCHMARK_MAIN();
