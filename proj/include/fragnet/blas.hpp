#pragma once

#include <cblas.h>

#include <cstdlib>
#include <mutex>

extern "C" void openblas_set_num_threads(int);

namespace fragnet {
namespace blas {

// OpenBLAS picks a slow generic kernel when the CPU model string is unknown
// (common inside VMs). If the user did not pin a core type, select one from
// the instruction sets the CPU actually reports. Threading stays at 1: outer
// loops parallelize over independent work items instead, which keeps results
// independent of the BLAS build.
inline void init_once() {
  static std::once_flag flag;
  std::call_once(flag, [] {
#if defined(__x86_64__) || defined(__i386__)
    if (std::getenv("OPENBLAS_CORETYPE") == nullptr) {
      __builtin_cpu_init();
      if (__builtin_cpu_supports("avx512f")) {
        ::setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
      } else if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
        ::setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
      }
    }
#endif
    openblas_set_num_threads(1);
  });
}

// Row-major C[M,N] = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  init_once();
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  init_once();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// y[N] = op(A[M,N]) vector product, row-major. Used where per-row results must
// not depend on how rows are batched.
inline void gemv(bool trans, int m, int n, float alpha, const float* a, int lda, const float* x,
                 float beta, float* y) {
  init_once();
  cblas_sgemv(CblasRowMajor, trans ? CblasTrans : CblasNoTrans, m, n, alpha, a, lda, x, 1, beta,
              y, 1);
}

inline void gemv(bool trans, int m, int n, double alpha, const double* a, int lda, const double* x,
                 double beta, double* y) {
  init_once();
  cblas_dgemv(CblasRowMajor, trans ? CblasTrans : CblasNoTrans, m, n, alpha, a, lda, x, 1, beta,
              y, 1);
}

}  // namespace blas
}  // namespace fragnet
