#pragma once

#include <cblas.h>

#include <cstddef>

#include "unetvl/tensor.hpp"

namespace uvl::detail {

/// Row-major C = alpha * op(A) * op(B) + beta * C. Counts 2*m*n*k flops.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
                 std::size_t ldc) {
  if (m == 0 || n == 0) return;
  // one BLAS thread keeps the reduction order fixed across runs
  static const bool pinned = (openblas_set_num_threads(1), true);
  (void)pinned;
  add_flops(2ULL * m * n * k);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
              static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

}  // namespace uvl::detail
