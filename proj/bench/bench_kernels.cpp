#include <benchmark/benchmark.h>

#include <vector>

#include "unidiff/kernels.hpp"
#include "unidiff/rng.hpp"

namespace k = unidiff::kernels;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  unidiff::Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

using Matmul = void (*)(const double*, const double*, double*, std::size_t, std::size_t,
                        std::size_t, bool);

// Batch x hidden layer shapes of the denoiser trunk: n rows, k inputs, m outputs.
template <Matmul F>
void BM_matmul_nt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t kdim = 768, m = 256;
  const auto a = filled(n * kdim, 1), b = filled(m * kdim, 2);
  std::vector<double> c(n * m);
  for (auto _ : state) {
    F(a.data(), b.data(), c.data(), n, kdim, m, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * kdim * m));
}

template <Matmul F>
void BM_matmul_tn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t mdim = 256, kdim = 768;
  const auto a = filled(n * mdim, 3), b = filled(n * kdim, 4);
  std::vector<double> c(mdim * kdim);
  for (auto _ : state) {
    F(a.data(), b.data(), c.data(), n, mdim, kdim, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * kdim * mdim));
}

using Dist = void (*)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);

// Feature-space distances of the precision/recall estimator.
template <Dist F>
void BM_pairwise(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 64;
  const auto a = filled(n * d, 5), b = filled(n * d, 6);
  std::vector<double> out(n * n);
  for (auto _ : state) {
    F(a.data(), b.data(), out.data(), n, n, d);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * d));
}

}  // namespace

BENCHMARK(BM_matmul_nt<k::serial::matmul_nt>)->Name("matmul_nt/serial")->Arg(32)->Arg(256);
BENCHMARK(BM_matmul_nt<k::omp::matmul_nt>)->Name("matmul_nt/omp")->Arg(32)->Arg(256);
BENCHMARK(BM_matmul_tn<k::serial::matmul_tn>)->Name("matmul_tn/serial")->Arg(32)->Arg(256);
BENCHMARK(BM_matmul_tn<k::omp::matmul_tn>)->Name("matmul_tn/omp")->Arg(32)->Arg(256);
BENCHMARK(BM_pairwise<k::serial::pairwise_sq_dist>)->Name("pairwise_sq_dist/serial")->Arg(500)->Arg(2000);
BENCHMARK(BM_pairwise<k::omp::pairwise_sq_dist>)->Name("pairwise_sq_dist/omp")->Arg(500)->Arg(2000);
BENCHMARK_MAIN();
