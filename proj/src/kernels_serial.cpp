#include "unidiff/kernels.hpp"

namespace unidiff::kernels::serial {

void matmul_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * m + j] = accumulate ? c[i * m + j] + s : s;
    }
  }
}

void matmul_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * m + j];
      c[i * m + j] = accumulate ? c[i * m + j] + s : s;
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t m,
               std::size_t k, bool accumulate) {
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t q = 0; q < k; ++q) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += a[i * m + j] * b[i * k + q];
      c[j * k + q] = accumulate ? c[j * k + q] + s : s;
    }
  }
}

void pairwise_sq_dist(const double* a, const double* b, double* out, std::size_t n,
                      std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        const double diff = a[i * d + p] - b[j * d + p];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  }
}

}  // namespace unidiff::kernels::serial
