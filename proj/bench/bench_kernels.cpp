// Serial reference kernels against their OpenMP counterparts. Set
// OMP_NUM_THREADS to compare thread counts.
#include <benchmark/benchmark.h>

#include <vector>

#include "stage/kernels.hpp"
#include "stage/rng.hpp"

namespace {

using namespace stage;

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(normal01(rng) * 0.1);
  return v;
}

// Shapes of one transformer block at desk scale: rows = sequence length.
constexpr std::size_t kIn = 128;
constexpr std::size_t kOut = 512;

template <bool Parallel>
void bm_linear(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto x = random_vector(rows * kIn, 1);
  const auto w = random_vector(kOut * kIn, 2);
  const auto b = random_vector(kOut, 3);
  std::vector<float> y(rows * kOut);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::parallel::linear(x.data(), rows, kIn, w.data(), b.data(), kOut, y.data());
    else kernels::serial::linear(x.data(), rows, kIn, w.data(), b.data(), kOut, y.data());
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * rows));
}

template <bool Parallel>
void bm_linear_backward(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto x = random_vector(rows * kIn, 1);
  const auto dy = random_vector(rows * kOut, 2);
  const auto w = random_vector(kOut * kIn, 3);
  std::vector<float> dx(rows * kIn), dw(kOut * kIn), db(kOut);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::parallel::linear_backward(x.data(), dy.data(), w.data(), rows, kIn, kOut, dx.data(), dw.data(), db.data());
    } else {
      kernels::serial::linear_backward(x.data(), dy.data(), w.data(), rows, kIn, kOut, dx.data(), dw.data(), db.data());
    }
    benchmark::DoNotOptimize(dw.data());
  }
}

constexpr std::size_t kD = 128;
constexpr std::size_t kHeads = 4;

template <bool Parallel>
void bm_attention(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto qkv = random_vector(rows * 3 * kD, 4);
  std::vector<float> probs(kHeads * rows * rows), out(rows * kD);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::parallel::causal_attention(qkv.data(), rows, kD, kHeads, probs.data(), out.data());
    else kernels::serial::causal_attention(qkv.data(), rows, kD, kHeads, probs.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void bm_attention_backward(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto qkv = random_vector(rows * 3 * kD, 4);
  const auto dout = random_vector(rows * kD, 5);
  std::vector<float> probs(kHeads * rows * rows), out(rows * kD);
  kernels::serial::causal_attention(qkv.data(), rows, kD, kHeads, probs.data(), out.data());
  std::vector<float> dqkv(rows * 3 * kD), scratch(kHeads * rows);
  for (auto _ : state) {
    std::fill(dqkv.begin(), dqkv.end(), 0.0f);
    if constexpr (Parallel) {
      kernels::parallel::causal_attention_backward(qkv.data(), probs.data(), dout.data(), rows, kD, kHeads,
                                                   dqkv.data(), scratch.data());
    } else {
      kernels::serial::causal_attention_backward(qkv.data(), probs.data(), dout.data(), rows, kD, kHeads,
                                                 dqkv.data(), scratch.data());
    }
    benchmark::DoNotOptimize(dqkv.data());
  }
}

template <bool Parallel>
void bm_assign(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  constexpr std::size_t dim = 64, count = 256;
  Rng rng(6);
  std::vector<double> points(n * dim), centroids(count * dim), dist(n);
  for (auto& v : points) v = normal01(rng);
  for (auto& v : centroids) v = normal01(rng);
  std::vector<std::int32_t> labels(n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::parallel::assign_nearest(points.data(), n, dim, centroids.data(), count, labels.data(), dist.data());
    } else {
      kernels::serial::assign_nearest(points.data(), n, dim, centroids.data(), count, labels.data(), dist.data());
    }
    benchmark::DoNotOptimize(labels.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}

}  // namespace

BENCHMARK(bm_linear<false>)->Arg(256)->Arg(1024);
BENCHMARK(bm_linear<true>)->Arg(256)->Arg(1024);
BENCHMARK(bm_linear_backward<false>)->Arg(256)->Arg(1024);
BENCHMARK(bm_linear_backward<true>)->Arg(256)->Arg(1024);
BENCHMARK(bm_attention<false>)->Arg(256)->Arg(1024);
BENCHMARK(bm_attention<true>)->Arg(256)->Arg(1024);
BENCHMARK(bm_attention_backward<false>)->Arg(256)->Arg(1024);
BENCHMARK(bm_attention_backward<true>)->Arg(256)->Arg(1024);
BENCHMARK(bm_assign<false>)->Arg(4096)->Arg(32768);
BENCHMARK(bm_assign<true>)->Arg(4096)->Arg(32768);

BENCHMARK_MAIN();
