#pragma once

#include <cstddef>

// Dense row-major kernels used by the autodiff graph and the metrics code.
//
// Two implementations share every signature: `serial` is a plain loop nest kept
// as the reference for tests and benchmarks, `omp` is the OpenMP version the
// library dispatches to. The omp kernels assign each output element to exactly
// one thread with a fixed reduction order, so results are reproducible for a
// given build regardless of thread count.
namespace unidiff::kernels {

namespace serial {
// C[n x m] (+)= A[n x k] * B[m x k]^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate);
// C[n x m] (+)= A[n x k] * B[k x m]
void matmul_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate);
// C[m x k] (+)= A[n x m]^T * B[n x k]
void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
               std::size_t k, bool accumulate);
// D[n x m] = squared euclidean distance between rows of A[n x d] and B[m x d]
void pairwise_sq_dist(const double* a, const double* b, double* out, std::size_t n,
                      std::size_t m, std::size_t d);
}  // namespace serial

namespace omp {
void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate);
void matmul_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate);
void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
               std::size_t k, bool accumulate);
void pairwise_sq_dist(const double* a, const double* b, double* out, std::size_t n,
                      std::size_t m, std::size_t d);
}  // namespace omp

using omp::matmul_nn;
using omp::matmul_nt;
using omp::matmul_tn;
using omp::pairwise_sq_dist;

// Worker count for parallel regions; reads UNIDIFF_WORKERS once if set.
int worker_count();
void set_worker_count(int n);

}  // namespace unidiff::kernels
