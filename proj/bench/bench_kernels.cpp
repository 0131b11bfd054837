// Serial reference vs OpenMP kernels. Run with OMP_NUM_THREADS to vary the
// thread count; the parallel path is bit-identical to the serial one.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "retro/kernels.hpp"

namespace k = retro::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.f);
    if constexpr (Parallel) k::parallel::gemm(n, n, n, a.data(), b.data(), c.data());
    else k::serial::gemm(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

template <bool Parallel>
void BM_gemm_nt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 3), b = random_vec(n * n, 4);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.f);
    if constexpr (Parallel) k::parallel::gemm_nt(n, n, n, a.data(), b.data(), c.data());
    else k::serial::gemm_nt(n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

// Desk retrieval shape: d = 128 against tens of thousands of stored pairs.
template <bool Parallel>
void BM_sq_distances(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 128;
  const auto db = random_vec(rows * d, 5), q = random_vec(d, 6);
  std::vector<float> out(rows);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::sq_distances(rows, d, q.data(), db.data(), out.data());
    else k::serial::sq_distances(rows, d, q.data(), db.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * rows);
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_gemm<true>)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_gemm_nt<false>)->Arg(64)->Arg(256);
BENCHMARK(BM_gemm_nt<true>)->Arg(64)->Arg(256);
BENCHMARK(BM_sq_distances<false>)->Arg(4096)->Arg(32768);
BENCHMARK(BM_sq_distances<true>)->Arg(4096)->Arg(32768);

BENCHMARK_MAIN();
