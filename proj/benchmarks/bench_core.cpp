#include <benchmark/benchmark.h>

#include <random>

#include "ndlab/diversity.hpp"
#include "ndlab/model.hpp"
#include "ndlab/theory.hpp"

using namespace ndlab;

namespace {

Tensor gaussian(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n;
  Tensor t(shape);
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = n(rng);
  return t;
}

diversity::FeatureBatch streams(std::size_t P, std::size_t rows, std::size_t d) {
  diversity::FeatureBatch b;
  for (std::size_t i = 0; i < P; ++i) b.streams.push_back(gaussian({rows, d}, i + 1));
  return b;
}

void BM_SpectralNorm(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const Tensor m = gaussian({d, d}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(diversity::spectral_norm(m).value);
}
BENCHMARK(BM_SpectralNorm)->Arg(16)->Arg(64)->Arg(128);

void BM_DSpecFullWhitening(benchmark::State& state) {
  const auto P = static_cast<std::size_t>(state.range(0));
  const auto raw = streams(P, 1024, 32);
  for (auto _ : state) {
    const auto w = diversity::whiten(raw, diversity::WhiteningMode::kFull);
    benchmark::DoNotOptimize(diversity::d_spec(w));
  }
}
BENCHMARK(BM_DSpecFullWhitening)->Arg(2)->Arg(4)->Arg(8);

void BM_BtLossFull(benchmark::State& state) {
  const auto P = static_cast<std::size_t>(state.range(0));
  const auto raw = streams(P, 512, 32);
  for (auto _ : state) benchmark::DoNotOptimize(diversity::bt_loss_full(raw));
}
BENCHMARK(BM_BtLossFull)->Arg(4)->Arg(8);

void BM_BtLossRandK(benchmark::State& state) {
  const auto raw = streams(8, 512, 32);
  diversity::RandKConfig cfg;
  cfg.K = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  for (auto _ : state) benchmark::DoNotOptimize(diversity::bt_loss_randk(raw, cfg, rng));
}
BENCHMARK(BM_BtLossRandK)->Arg(1)->Arg(4);

void BM_LmForward(benchmark::State& state) {
  model::BackboneConfig b;
  b.layers = 2;
  b.d = 32;
  b.heads = 2;
  b.ff = 64;
  b.max_seq = 64;
  model::AdapterConfig a;
  a.P = static_cast<std::size_t>(state.range(0));
  a.rank = 4;
  a.n_prefix = 8;
  a.design_layer = 1;
  const model::NdModel m = model::build_model(b, a);
  Tensor tokens({4, 32});
  for (std::size_t k = 0; k < tokens.size(); ++k) tokens[k] = static_cast<double>(k % 200);
  for (auto _ : state) benchmark::DoNotOptimize(model::lm_forward(m, tokens).logits.size());
}
BENCHMARK(BM_LmForward)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_McHallucinationRate(benchmark::State& state) {
  theory::McConfig mc;
  mc.n_samples = 100'000;
  mc.seed = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(theory::mc_hallucination_rate(1.0, 1.0, 0.3, 8, mc).rate);
  }
}
BENCHMARK(BM_McHallucinationRate)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
