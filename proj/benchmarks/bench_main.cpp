#include <benchmark/benchmark.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dtsst/dataio.hpp"
#include "dtsst/model.hpp"
#include "dtsst/ops.hpp"
#include "dtsst/signal.hpp"
#include "dtsst/train.hpp"

using namespace dtsst;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Branch I temporal convolution at full size: [N, 1, 22, 1000] * [40, 1, 1, 30].
void BM_TemporalConv(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({n, 1, 22, 1000}, 1);
  const Tensor k = random_tensor({40, 1, 1, 30}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_TemporalConv)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_DepthwiseConv(benchmark::State& state) {
  const Tensor x = random_tensor({8, 40, 22, 971}, 3);
  const Tensor k = random_tensor({40, 1, 22, 1}, 4);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, {}, {}, 40));
}
BENCHMARK(BM_DepthwiseConv)->Unit(benchmark::kMillisecond);

void BM_MorletTfr(benchmark::State& state) {
  const auto channels = static_cast<std::size_t>(state.range(0));
  const double fs = 250.0;
  EegTrial trial;
  trial.data = random_tensor({channels, 1000}, 5);
  trial.fs = fs;
  const auto plan = signal::make_morlet_plan(signal::frequency_grid(1.0, 40.0, 1.0), fs);
  for (auto _ : state) benchmark::DoNotOptimize(signal::morlet_tfr(trial, plan));
}
BENCHMARK(BM_MorletTfr)->Arg(3)->Arg(22)->Unit(benchmark::kMillisecond);

void BM_ForwardEval(benchmark::State& state, const char* preset, std::size_t batch) {
  const ModelConfig cfg = dataio::preset(preset).model;
  DualTsst model(cfg, 0);
  const Tensor eeg = random_tensor({batch, cfg.channels, cfg.samples}, 6);
  const Tensor tfr = random_tensor({batch, cfg.channels, cfg.freqs, cfg.samples}, 7);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(eeg, tfr, false));
}
BENCHMARK_CAPTURE(BM_ForwardEval, mini, "mini", 32)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_ForwardEval, bci2b, "bci2b", 1)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_ForwardEval, bci2a, "bci2a", 1)->Unit(benchmark::kMillisecond)->Iterations(2);

// One optimizer step on the mini preset: forward, backward and Adam.
void BM_MiniTrainStep(benchmark::State& state) {
  const ModelConfig cfg = dataio::preset("mini").model;
  DualTsst model(cfg, 0);
  const std::size_t n = 32;
  const Tensor eeg = random_tensor({n, cfg.channels, cfg.samples}, 8);
  const Tensor tfr = random_tensor({n, cfg.channels, cfg.freqs, cfg.samples}, 9);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 2);
  train::TrainConfig tc;
  train::Adam adam(tc);
  for (auto _ : state) {
    model.zero_grad();
    const Tensor loss = train::cross_entropy(model.forward(eeg, tfr, true), labels);
    backward(loss);
    adam.step(model.parameters(), tc.lr_max);
  }
}
BENCHMARK(BM_MiniTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
