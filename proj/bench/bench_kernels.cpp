// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "onerec/kernels.hpp"

namespace {

using namespace onerec;

std::vector<float> random_vector(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> z(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = z(rng);
  return v;
}

// Args: rows, in, out.
template <bool Parallel>
void BM_Linear(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), in = static_cast<int>(state.range(1)),
            out = static_cast<int>(state.range(2));
  const auto x = random_vector(static_cast<std::size_t>(rows) * in, 1);
  const auto w = random_vector(static_cast<std::size_t>(out) * in, 2);
  const auto b = random_vector(out, 3);
  std::vector<float> y(static_cast<std::size_t>(rows) * out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::linear(x.data(), rows, in, w.data(), b.data(), out, y.data());
    } else {
      kernels::ref::linear(x.data(), rows, in, w.data(), b.data(), out, y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * in * out);
}

template <bool Parallel>
void BM_LinearBackwardInput(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), in = static_cast<int>(state.range(1)),
            out = static_cast<int>(state.range(2));
  const auto dy = random_vector(static_cast<std::size_t>(rows) * out, 1);
  const auto w = random_vector(static_cast<std::size_t>(out) * in, 2);
  std::vector<float> dx(static_cast<std::size_t>(rows) * in);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::linear_backward_input(dy.data(), rows, out, w.data(), in, dx.data());
    } else {
      kernels::ref::linear_backward_input(dy.data(), rows, out, w.data(), in, dx.data());
    }
    benchmark::DoNotOptimize(dx.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * in * out);
}

template <bool Parallel>
void BM_LinearBackwardWeight(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), in = static_cast<int>(state.range(1)),
            out = static_cast<int>(state.range(2));
  const auto dy = random_vector(static_cast<std::size_t>(rows) * out, 1);
  const auto x = random_vector(static_cast<std::size_t>(rows) * in, 2);
  std::vector<float> dw(static_cast<std::size_t>(out) * in), db(out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::linear_backward_weight(dy.data(), x.data(), rows, in, out, dw.data(), db.data());
    } else {
      kernels::ref::linear_backward_weight(dy.data(), x.data(), rows, in, out, dw.data(), db.data());
    }
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * in * out);
}

// Args: points, centroids, dims.
template <bool Parallel>
void BM_NearestCentroid(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0)), k = static_cast<int>(state.range(1)),
            d = static_cast<int>(state.range(2));
  const auto p = random_vector(static_cast<std::size_t>(n) * d, 1);
  const auto c = random_vector(static_cast<std::size_t>(k) * d, 2);
  std::vector<int> assign(n);
  std::vector<double> dist(n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::nearest_centroid(p.data(), n, c.data(), k, d, assign.data(), dist.data());
    } else {
      kernels::ref::nearest_centroid(p.data(), n, c.data(), k, d, assign.data(), dist.data());
    }
    benchmark::DoNotOptimize(assign.data());
  }
  state.SetItemsProcessed(state.iterations() * n * k * d);
}

void linear_shapes(benchmark::internal::Benchmark* b) {
  b->Args({96, 32, 96})->Args({256, 48, 192})->Args({512, 128, 512});
}
void centroid_shapes(benchmark::internal::Benchmark* b) { b->Args({256, 16, 32})->Args({4096, 64, 32}); }

BENCHMARK(BM_Linear<false>)->Apply(linear_shapes);
BENCHMARK(BM_Linear<true>)->Apply(linear_shapes);
BENCHMARK(BM_LinearBackwardInput<false>)->Apply(linear_shapes);
BENCHMARK(BM_LinearBackwardInput<true>)->Apply(linear_shapes);
BENCHMARK(BM_LinearBackwardWeight<false>)->Apply(linear_shapes);
BENCHMARK(BM_LinearBackwardWeight<true>)->Apply(linear_shapes);
BENCHMARK(BM_NearestCentroid<false>)->Apply(centroid_shapes);
BENCHMARK(BM_NearestCentroid<true>)->Apply(centroid_shapes);

}  // namespace

BENCHMARK_MAIN();
