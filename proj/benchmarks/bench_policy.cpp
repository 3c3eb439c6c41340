#include <benchmark/benchmark.h>

#include <vector>

#include "cmadp/analysis.hpp"
#include "cmadp/trainer.hpp"

using namespace cmadp;

namespace {

struct Fixture {
  Dataset ds;
  Policy policy;
  FrameTable table;

  Fixture()
      : ds([] {
          GenConfig g;
          g.count = 2;
          g.val_count = 1;
          return generate_dataset(g);
        }()),
        policy(ModelConfig{}, fit_normalizer(ds), 0),
        table(ds, policy.encoders, policy.normalizer(), policy.config().unet.horizon) {}

  std::vector<FrameRef> refs(int batch) const {
    std::vector<FrameRef> r;
    for (int b = 0; b < batch; ++b) r.push_back({0, (37 * b) % table.length(0)});
    return r;
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_Observe(benchmark::State& state) {
  Fixture& f = fixture();
  const EncoderInput<float> in = f.table.input(f.refs(static_cast<int>(state.range(0))));
  for (auto _ : state) benchmark::DoNotOptimize(f.policy.observe(in).cond.data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Observe)->Arg(1)->Arg(32);

void BM_PredictNoise(benchmark::State& state) {
  Fixture& f = fixture();
  const int B = static_cast<int>(state.range(0));
  const auto refs = f.refs(B);
  const MatF cond = f.policy.observe(f.table.input(refs)).cond;
  const MatF xk = f.table.targets(refs);
  const std::vector<int> steps(static_cast<std::size_t>(B), 50);
  for (auto _ : state) benchmark::DoNotOptimize(f.policy.predict_noise(xk, steps, cond).data());
  state.SetItemsProcessed(state.iterations() * B);
}
BENCHMARK(BM_PredictNoise)->Arg(1)->Arg(32);

void BM_SampleChunk(benchmark::State& state) {
  Fixture& f = fixture();
  const EncoderInput<float> in = f.table.input(f.refs(1));
  std::mt19937_64 rng(0);
  for (auto _ : state) benchmark::DoNotOptimize(f.policy.sample_chunk(in, rng).data());
}
BENCHMARK(BM_SampleChunk)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  Fixture& f = fixture();
  const int B = static_cast<int>(state.range(0));
  const auto refs = f.refs(B);
  const EncoderInput<float> in = f.table.input(refs);
  const MatF x0 = f.table.targets(refs);
  const auto params = f.policy.trainable_params();
  Adam opt(1e-4);
  std::mt19937_64 rng(0);
  for (auto _ : state) {
    const NoiseDraw draw = draw_noise(B, f.policy.config().unet.horizon, kActionDim, f.policy.config().diffusion_steps, rng);
    nn::zero_grads(params);
    benchmark::DoNotOptimize(f.policy.loss(in, x0, draw, true));
    clip_grad_norm(params, 1.0);
    opt.step(params);
  }
  state.SetItemsProcessed(state.iterations() * B);
}
BENCHMARK(BM_TrainStep)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_ExtractFeatures(benchmark::State& state) {
  Fixture& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(extract_features(f.policy, f.table, 0).size());
}
BENCHMARK(BM_ExtractFeatures)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
