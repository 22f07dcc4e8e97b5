#include "psumml/kernels.hpp"

#include <cstdlib>

#ifdef PSUMML_HAVE_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace psumml::kernels {

Backend& default_backend() {
  static Backend be = blas_available() ? Backend::Blas : Backend::OpenMP;
  return be;
}

bool blas_available() {
#ifdef PSUMML_HAVE_OPENBLAS
  return true;
#else
  return false;
#endif
}

void set_num_threads(int n) {
  if (n <= 0) return;
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
#ifdef PSUMML_HAVE_OPENBLAS
  openblas_set_num_threads(n);
#endif
}

namespace detail {

#ifdef PSUMML_HAVE_OPENBLAS

void cblas_gemm_nn(const float* a, const float* b, float* c, int m, int n, int k, bool acc) {
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f, a, k, b, n,
              acc ? 1.0f : 0.0f, c, n);
}
void cblas_gemm_nn(const double* a, const double* b, double* c, int m, int n, int k, bool acc) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a, k, b, n,
              acc ? 1.0 : 0.0, c, n);
}
void cblas_gemm_tn(const float* a, const float* b, float* c, int m, int n, int k, bool acc) {
  // c[m,n] = sum_k a[k,m] * b[k,n]
  cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0f, a, m, b, n,
              acc ? 1.0f : 0.0f, c, n);
}
void cblas_gemm_tn(const double* a, const double* b, double* c, int m, int n, int k, bool acc) {
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0, a, m, b, n,
              acc ? 1.0 : 0.0, c, n);
}
void cblas_gemm_nt(const float* a, const float* b, float* c, int m, int n, int k, bool acc) {
  // c[m,n] = sum_k a[m,k] * b[n,k]
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0f, a, k, b, k,
              acc ? 1.0f : 0.0f, c, n);
}
void cblas_gemm_nt(const double* a, const double* b, double* c, int m, int n, int k, bool acc) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0, a, k, b, k,
              acc ? 1.0 : 0.0, c, n);
}

#else

namespace {
[[noreturn]] void no_blas() { std::abort(); }
}  // namespace

void cblas_gemm_nn(const float*, const float*, float*, int, int, int, bool) { no_blas(); }
void cblas_gemm_nn(const double*, const double*, double*, int, int, int, bool) { no_blas(); }
void cblas_gemm_tn(const float*, const float*, float*, int, int, int, bool) { no_blas(); }
void cblas_gemm_tn(const double*, const double*, double*, int, int, int, bool) { no_blas(); }
void cblas_gemm_nt(const float*, const float*, float*, int, int, int, bool) { no_blas(); }
void cblas_gemm_nt(const double*, const double*, double*, int, int, int, bool) { no_blas(); }

#endif

}  // namespace detail

}  // namespace psumml::kernels
