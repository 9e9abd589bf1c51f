#include <omp.h>

#include <cstdlib>
#include <string>

#include "unidiff/kernels.hpp"

namespace unidiff::kernels {

namespace {

int& configured_workers() {
  static int workers = [] {
    if (const char* env = std::getenv("UNIDIFF_WORKERS")) {
      const int n = std::atoi(env);
      if (n > 0) return n;
    }
    return omp_get_max_threads();
  }();
  return workers;
}

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelThreshold = 1 << 15;

}  // namespace

int worker_count() { return configured_workers(); }
void set_worker_count(int n) { configured_workers() = n > 0 ? n : 1; }

namespace omp {

void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate) {
  const long long rows = static_cast<long long>(n);
  const bool par = n * k * m >= kParallelThreshold && n > 1;
#pragma omp parallel for schedule(static) num_threads(worker_count()) if (par)
  for (long long ii = 0; ii < rows; ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const double* ai = a + i * k;
    double* ci = c + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

void matmul_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate) {
  const long long rows = static_cast<long long>(n);
  const bool par = n * k * m >= kParallelThreshold && n > 1;
#pragma omp parallel for schedule(static) num_threads(worker_count()) if (par)
  for (long long ii = 0; ii < rows; ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    double* ci = c + i * m;
    if (!accumulate) {
      for (std::size_t j = 0; j < m; ++j) ci[j] = 0.0;
    }
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * m;
#pragma omp simd
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
               std::size_t k, bool accumulate) {
  const long long rows = static_cast<long long>(m);
  const bool par = n * k * m >= kParallelThreshold && m > 1;
#pragma omp parallel for schedule(static) num_threads(worker_count()) if (par)
  for (long long jj = 0; jj < rows; ++jj) {
    const std::size_t j = static_cast<std::size_t>(jj);
    double* cj = c + j * k;
    if (!accumulate) {
      for (std::size_t q = 0; q < k; ++q) cj[q] = 0.0;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double aij = a[i * m + j];
      const double* bi = b + i * k;
#pragma omp simd
      for (std::size_t q = 0; q < k; ++q) cj[q] += aij * bi[q];
    }
  }
}

void pairwise_sq_dist(const double* a, const double* b, double* out, std::size_t n,
                      std::size_t m, std::size_t d) {
  const long long rows = static_cast<long long>(n);
  const bool par = n * m * d >= kParallelThreshold && n > 1;
#pragma omp parallel for schedule(static) num_threads(worker_count()) if (par)
  for (long long ii = 0; ii < rows; ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const double* ai = a + i * d;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * d;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (std::size_t p = 0; p < d; ++p) {
        const double diff = ai[p] - bj[p];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  }
}

}  // namespace omp
}  // namespace unidiff::kernels
