#include <benchmark/benchmark.h>

#include "duhiv/ops.hpp"
#include "duhiv/random.hpp"

using namespace duhiv;

namespace {

Tensor random(Shape shape, Rng& rng, bool grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), grad);
}

// args: batch, channels, spatial size
void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(1);
  const auto b = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1)),
             s = static_cast<std::size_t>(state.range(2));
  const auto x = random({b, c, s, s}, rng), k = random({c, c, 3, 3}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, k, 1, 1));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * b));
}
BENCHMARK(BM_Conv2dForward)->Args({32, 8, 16})->Args({32, 16, 8})->Args({1, 8, 32});

void BM_Conv2dBackward(benchmark::State& state) {
  Rng rng(2);
  const auto b = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1)),
             s = static_cast<std::size_t>(state.range(2));
  const auto x = random({b, c, s, s}, rng, true), k = random({c, c, 3, 3}, rng, true);
  for (auto _ : state) backward(ops::sum(ops::relu(ops::conv2d(x, k, 1, 1))));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * b));
}
BENCHMARK(BM_Conv2dBackward)->Args({32, 8, 16})->Args({32, 16, 8});

}  // namespace

BENCHMARK_MAIN();
