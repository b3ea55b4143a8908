// Microbenchmarks of the hot kernels and of whole-network passes.
//
//   ./paed_benchmarks --benchmark_filter=Conv2d

#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "paed/evaluation.hpp"
#include "paed/features.hpp"
#include "paed/model.hpp"
#include "paed/ops.hpp"
#include "paed/rng.hpp"
#include "paed/training.hpp"

using namespace paed;

namespace {

template <typename T>
NdBuffer<T> random_buffer(Rng& rng, Shape shape) {
  NdBuffer<T> b(std::move(shape));
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<T>(rng.uniform(-1.0, 1.0));
  return b;
}

/// 3x3 SAME convolution of a [B, 128, F, C] map to C output channels.
template <typename T>
void BM_Conv2d(benchmark::State& state) {
  const auto f = static_cast<std::size_t>(state.range(0));
  const auto c = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  const auto x = random_buffer<T>(rng, {1, 128, f, c});
  const auto k = random_buffer<T>(rng, {3, 3, c, c});
  const auto b = random_buffer<T>(rng, {c});
  for (auto _ : state) {
    Tape<T> tape;
    auto y = ops::conv2d(tape.constant(x), tape.constant(k), tape.constant(b));
    benchmark::DoNotOptimize(y.value().ptr());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(128 * f * c * c * 9));
}
BENCHMARK_TEMPLATE(BM_Conv2d, float)->Args({64, 1})->Args({32, 64})->Args({8, 128})->Unit(benchmark::kMillisecond);
BENCHMARK_TEMPLATE(BM_Conv2d, double)->Args({32, 64})->Unit(benchmark::kMillisecond);

/// Forward and backward of one conv2d, as in a training step.
void BM_Conv2dBackward(benchmark::State& state) {
  Rng rng(2);
  ParamStore<float> params;
  params.add("k", random_buffer<float>(rng, {3, 3, 64, 64}));
  params.add("b", random_buffer<float>(rng, {64}));
  const auto x = random_buffer<float>(rng, {1, 128, 32, 64});
  for (auto _ : state) {
    Tape<float> tape;
    auto y = ops::conv2d(tape.constant(x), tape.parameter(params.get("k")), tape.parameter(params.get("b")));
    tape.backward(ops::sum(y));
    benchmark::DoNotOptimize(params.get("k").grad.ptr());
  }
}
BENCHMARK(BM_Conv2dBackward)->Unit(benchmark::kMillisecond);

/// Bidirectional GRU over 128 frames of D features with H hidden units.
void BM_GruBidirectional(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto h = static_cast<std::size_t>(state.range(1));
  Rng rng(3);
  const auto x = random_buffer<float>(rng, {128, d});
  const auto w = random_buffer<float>(rng, {d, 3 * h});
  const auto u = random_buffer<float>(rng, {h, 3 * h});
  const auto b = random_buffer<float>(rng, {3 * h});
  for (auto _ : state) {
    Tape<float> tape;
    const ops::GruWeights<float> gw{tape.constant(w), tape.constant(u), tape.constant(b)};
    auto y = ops::gru_bidirectional(tape.constant(x), gw, gw);
    benchmark::DoNotOptimize(y.value().ptr());
  }
}
BENCHMARK(BM_GruBidirectional)->Args({128, 32})->Args({512, 256})->Unit(benchmark::kMillisecond);

/// Log-mel spectrogram of a 30 s recording at 44.1 kHz.
void BM_LogMel30s(benchmark::State& state) {
  Rng rng(4);
  std::vector<double> samples(44100 * 30);
  for (auto& s : samples) s = 0.1 * rng.uniform(-1.0, 1.0);
  const FeatureConfig cfg;
  for (auto _ : state) {
    auto spec = log_mel(samples, 44100, cfg);
    benchmark::DoNotOptimize(spec.values.ptr());
  }
}
BENCHMARK(BM_LogMel30s)->Unit(benchmark::kMillisecond);

ModelConfig bench_model(bool full) {
  ModelConfig c;
  c.dropout = 0.0;
  if (!full) {
    c.filters = {8, 8, 16, 16, 32};
    c.gru_hidden = 16;
    c.fc_units = 32;
  }
  return c;
}

/// Inference on one 128x64 segment; range(0) selects the full-size network,
/// range(1) the number of tasks (0 = multi-label baseline).
void BM_ModelForward(benchmark::State& state) {
  ModelConfig cfg = bench_model(state.range(0) != 0);
  const auto tasks = static_cast<std::size_t>(state.range(1));
  if (tasks == 0) cfg.kind = ModelKind::baseline;
  Model<float> model(cfg, CategorySet::tut_synthetic_2016(), TaskDecomposition::equal_split(16, tasks ? tasks : 1), 5);
  Rng rng(6);
  {
    Tape<float> warm(Mode::train, 0);
    model.forward(warm, random_buffer<float>(rng, {2, 128, 64}));
  }
  const auto x = random_buffer<float>(rng, {128, 64});
  for (auto _ : state) {
    Tape<float> tape;
    auto r = model.forward(tape, x);
    benchmark::DoNotOptimize(r.outputs.front().value().ptr());
  }
}
BENCHMARK(BM_ModelForward)
    ->ArgNames({"full", "tasks"})
    ->Args({0, 0})
    ->Args({0, 2})
    ->Args({0, 8})
    ->Args({1, 0})
    ->Args({1, 2})
    ->Unit(benchmark::kMillisecond);

/// One optimizer step (forward, backward, Adam) on a batch of 8 segments of
/// the scaled-down 2-task network.
void BM_TrainStep(benchmark::State& state) {
  const ModelConfig cfg = bench_model(false);
  const auto d = TaskDecomposition::equal_split(16, 2);
  Model<float> model(cfg, CategorySet::tut_synthetic_2016(), d, 7);
  Rng rng(8);
  const auto x = random_buffer<float>(rng, {8, 128, 64});
  ClassIndexMatrix targets({8 * 128, 2});
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<std::int64_t>(rng.below(256));
  AdamState<float> adam;
  std::uint64_t step = 0;
  for (auto _ : state) {
    model.params().zero_grad();
    Tape<float> tape(Mode::train, step++);
    auto loss = multitask_loss(model.forward(tape, x).outputs, targets);
    tape.backward(loss);
    adam_step(model.params(), adam, 1e-4);
    benchmark::DoNotOptimize(loss.value().ptr());
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

/// Frame scoring of a 30 s recording (1500 frames, 16 categories).
void BM_FramePrf(benchmark::State& state) {
  Rng rng(9);
  FrameLabelMatrix pred({1500, 16}), truth({1500, 16});
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred[i] = rng.uniform() < 0.2 ? 1 : 0;
    truth[i] = rng.uniform() < 0.2 ? 1 : 0;
  }
  for (auto _ : state) {
    auto r = frame_prf(pred, truth);
    benchmark::DoNotOptimize(r.pooled.tp);
  }
}
BENCHMARK(BM_FramePrf);

}  // namespace

BENCHMARK_MAIN();
