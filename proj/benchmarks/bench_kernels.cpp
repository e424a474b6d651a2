#include <benchmark/benchmark.h>

#include "bamboo/matrix.hpp"
#include "bamboo/random.hpp"

namespace {

using bamboo::Matrix;

template <typename T>
void BM_Matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  bamboo::Rng rng(1);
  const auto a = bamboo::gaussian<T>(m, k, 1.0, rng);
  const auto b = bamboo::gaussian<T>(k, n, 1.0, rng);
  for (auto _ : state) {
    auto c = bamboo::matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.counters["flops"] = benchmark::Counter(2.0 * static_cast<double>(m * k * n),
                                               benchmark::Counter::kIsIterationInvariantRate);
}

template <typename T>
void BM_MatmulTn(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  bamboo::Rng rng(2);
  const auto a = bamboo::gaussian<T>(k, m, 1.0, rng);
  const auto b = bamboo::gaussian<T>(k, n, 1.0, rng);
  Matrix<T> c(m, n);
  for (auto _ : state) {
    bamboo::gemm_tn_accumulate(a, b, c);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.counters["flops"] = benchmark::Counter(2.0 * static_cast<double>(m * k * n),
                                               benchmark::Counter::kIsIterationInvariantRate);
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({32, 64, 64})->Args({32, 64, 256})->Args({32, 256, 64})->Args({32, 16, 32})
      ->Args({32, 32, 16})->Args({128, 128, 128});
}

}  // namespace

BENCHMARK_TEMPLATE(BM_Matmul, float)->Apply(shapes);
BENCHMARK_TEMPLATE(BM_Matmul, double)->Apply(shapes);
BENCHMARK_TEMPLATE(BM_MatmulTn, float)->Apply(shapes);
