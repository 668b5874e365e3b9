#include <benchmark/benchmark.h>

#include <cmath>

#include "duhiv/annotation.hpp"
#include "duhiv/latent.hpp"
#include "duhiv/random.hpp"

using namespace duhiv;

namespace {

std::vector<Representation> random_reprs(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Representation> rs(n);
  for (auto& r : rs) {
    for (std::size_t d = 0; d < dim; ++d) {
      r.mu.push_back(rng.normal());
      r.sigma.push_back(std::exp(rng.uniform(-1.0, 0.0)));
    }
  }
  return rs;
}

void BM_PairwiseW2(benchmark::State& state) {
  const auto rs = random_reprs(static_cast<std::size_t>(state.range(0)), 16, 1);
  for (auto _ : state) benchmark::DoNotOptimize(pairwise_w2_matrix(rs));
}
BENCHMARK(BM_PairwiseW2)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_Tsne(benchmark::State& state) {
  const auto d = pairwise_w2_matrix(random_reprs(static_cast<std::size_t>(state.range(0)), 16, 2));
  TsneOptions opt;
  opt.iterations = 250;
  for (auto _ : state) benchmark::DoNotOptimize(tsne_project(d, opt));
}
BENCHMARK(BM_Tsne)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_KMeans(benchmark::State& state) {
  std::vector<std::vector<double>> xs;
  for (const auto& r : random_reprs(static_cast<std::size_t>(state.range(0)), 16, 3)) xs.push_back(r.mu);
  for (auto _ : state) benchmark::DoNotOptimize(kmeans(xs, 6, 1));
}
BENCHMARK(BM_KMeans)->Arg(2048)->Unit(benchmark::kMillisecond);

void BM_AveragePrecision(benchmark::State& state) {
  Rng rng(5);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<double> scores(n);
  std::vector<std::uint8_t> truth(n);
  for (std::size_t i = 0; i < n; ++i) scores[i] = rng.uniform(), truth[i] = rng.uniform() < 0.4;
  truth[0] = 1;
  for (auto _ : state) benchmark::DoNotOptimize(average_precision(scores, truth));
}
BENCHMARK(BM_AveragePrecision)->Arg(2048);

}  // namespace
