#include <benchmark/benchmark.h>

#include "duhiv/data.hpp"
#include "duhiv/latent.hpp"
#include "duhiv/model.hpp"
#include "duhiv/ops.hpp"
#include "duhiv/random.hpp"

using namespace duhiv;

namespace {

const Dataset& dataset() {
  static const Dataset data = [] {
    SyntheticSpec spec;
    spec.seed = 3;
    return generate_synthetic(spec, 64);
  }();
  return data;
}

Tensor batch(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return image_batch(dataset(), idx);
}

void BM_DuhivInfer(benchmark::State& state) {
  const auto model = build_duhiv(DuhivConfig{});
  const auto x = batch(static_cast<std::size_t>(state.range(0)));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model->infer(x));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * state.range(0)));
}
BENCHMARK(BM_DuhivInfer)->Arg(1)->Arg(32);

// Forward and backward of one training batch.
void BM_ElboStep(benchmark::State& state) {
  const auto model = state.range(0) == 0 ? build_duhiv(DuhivConfig{}) : build_mlp_hvae(DuhivConfig{});
  const auto x = batch(32);
  Rng rng(4);
  for (auto _ : state) {
    model->zero_grad();
    backward(ops::mul_scalar(elbo_terms(*model, x, 1, 1.0, rng).elbo, -1.0));
  }
  state.SetLabel(model->kind());
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 32));
}
BENCHMARK(BM_ElboStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Reconstruct(benchmark::State& state) {
  const auto model = build_duhiv(DuhivConfig{});
  const auto r = extract(*model, dataset().samples[0].pgpm);
  for (auto _ : state) benchmark::DoNotOptimize(reconstruct(*model, r));
}
BENCHMARK(BM_Reconstruct);

}  // namespace
