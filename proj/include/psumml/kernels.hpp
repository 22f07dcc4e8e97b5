#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "psumml/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Data-parallel kernels behind the model. Every kernel comes in a serial
// reference flavor and an OpenMP flavor with the exact same per-element
// accumulation order, so the two produce bit-identical results and runs are
// reproducible for any thread count. The Blas backend routes the three gemm
// shapes through OpenBLAS; it is the fast path for training and is held to a
// relative tolerance rather than bit equality.
namespace psumml::kernels {

enum class Backend { Serial, OpenMP, Blas };

Backend& default_backend();
bool blas_available();

// Caps OpenMP and OpenBLAS worker counts together.
void set_num_threads(int n);

namespace detail {
void cblas_gemm_nn(const float* a, const float* b, float* c, int m, int n, int k, bool acc);
void cblas_gemm_nn(const double* a, const double* b, double* c, int m, int n, int k, bool acc);
void cblas_gemm_tn(const float* a, const float* b, float* c, int m, int n, int k, bool acc);
void cblas_gemm_tn(const double* a, const double* b, double* c, int m, int n, int k, bool acc);
void cblas_gemm_nt(const float* a, const float* b, float* c, int m, int n, int k, bool acc);
void cblas_gemm_nt(const double* a, const double* b, double* c, int m, int n, int k, bool acc);
}  // namespace detail

// ---------------------------------------------------------------------------
// gemm
// ---------------------------------------------------------------------------

// C[M,N] (+)= A[M,K] * B[K,N], row-major. Each C element is one ascending-k
// accumulation chain; rows are blocked by 4 to reuse B.
template <class T>
inline void gemm_nn_rows(const T* a, const T* b, T* c, int m_lo, int m_hi, int n, int k,
                         bool acc) {
  int m = m_lo;
  for (; m + 4 <= m_hi; m += 4) {
    T* c0 = c + static_cast<std::size_t>(m) * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    if (!acc) {
      std::fill(c0, c0 + n, T(0));
      std::fill(c1, c1 + n, T(0));
      std::fill(c2, c2 + n, T(0));
      std::fill(c3, c3 + n, T(0));
    }
    const T* a0 = a + static_cast<std::size_t>(m) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T w0 = a0[kk];
      const T w1 = a0[k + kk];
      const T w2 = a0[2 * k + kk];
      const T w3 = a0[3 * k + kk];
      const T* br = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) {
        c0[j] += w0 * br[j];
        c1[j] += w1 * br[j];
        c2[j] += w2 * br[j];
        c3[j] += w3 * br[j];
      }
    }
  }
  for (; m < m_hi; ++m) {
    T* cr = c + static_cast<std::size_t>(m) * n;
    if (!acc) std::fill(cr, cr + n, T(0));
    const T* ar = a + static_cast<std::size_t>(m) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T w = ar[kk];
      const T* br = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) cr[j] += w * br[j];
    }
  }
}

template <class T>
void gemm_nn(const T* a, const T* b, T* c, int m, int n, int k, bool acc, Backend be) {
  if (be == Backend::Blas && blas_available()) {
    detail::cblas_gemm_nn(a, b, c, m, n, k, acc);
    return;
  }
  if (be == Backend::OpenMP) {
#ifdef _OPENMP
#pragma omp parallel
    {
      int nt = omp_get_num_threads();
      int tid = omp_get_thread_num();
      // Split on row-block boundaries so each element keeps its serial chain.
      int blocks = (m + 3) / 4;
      int lo = static_cast<int>(static_cast<long long>(blocks) * tid / nt) * 4;
      int hi = std::min(m, static_cast<int>(static_cast<long long>(blocks) * (tid + 1) / nt) * 4);
      if (lo < hi) gemm_nn_rows(a, b, c, lo, hi, n, k, acc);
    }
    return;
#endif
  }
  gemm_nn_rows(a, b, c, 0, m, n, k, acc);
}

// C[M,N] (+)= A^T * B where A is stored [K_dim=rows of A, M]; here a is
// [l, m] and C[i,j] = sum_l a[l,i] * b[l,j]. Used for dCol = W^T * dY with
// a = W [Co, K], b = dY [Co, P], giving C [K, P].
template <class T>
inline void gemm_tn_rows(const T* a, const T* b, T* c, int i_lo, int i_hi, int n, int l, int m,
                         bool acc) {
  for (int i = i_lo; i < i_hi; ++i) {
    T* cr = c + static_cast<std::size_t>(i) * n;
    if (!acc) std::fill(cr, cr + n, T(0));
    for (int ll = 0; ll < l; ++ll) {
      const T w = a[static_cast<std::size_t>(ll) * m + i];
      const T* br = b + static_cast<std::size_t>(ll) * n;
      for (int j = 0; j < n; ++j) cr[j] += w * br[j];
    }
  }
}

template <class T>
void gemm_tn(const T* a, const T* b, T* c, int m, int n, int l, bool acc, Backend be) {
  // c[m, n] = sum_l a[l, m_idx] * b[l, n_idx]
  if (be == Backend::Blas && blas_available()) {
    detail::cblas_gemm_tn(a, b, c, m, n, l, acc);
    return;
  }
  if (be == Backend::OpenMP) {
#ifdef _OPENMP
#pragma omp parallel
    {
      int nt = omp_get_num_threads();
      int tid = omp_get_thread_num();
      int lo = static_cast<int>(static_cast<long long>(m) * tid / nt);
      int hi = static_cast<int>(static_cast<long long>(m) * (tid + 1) / nt);
      if (lo < hi) gemm_tn_rows(a, b, c, lo, hi, n, l, m, acc);
    }
    return;
#endif
  }
  gemm_tn_rows(a, b, c, 0, m, n, l, m, acc);
}

// C[M,N] (+)= A * B^T with a [M, L], b [N, L]; C[i,j] = dot(a row i, b row j).
// Used for dW = dY * Col^T. Scalar dot keeps the ascending-l chain.
template <class T>
inline void gemm_nt_rows(const T* a, const T* b, T* c, int i_lo, int i_hi, int n, int l,
                         bool acc) {
  for (int i = i_lo; i < i_hi; ++i) {
    const T* ar = a + static_cast<std::size_t>(i) * l;
    T* cr = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* br = b + static_cast<std::size_t>(j) * l;
      T dot = T(0);
      for (int ll = 0; ll < l; ++ll) dot += ar[ll] * br[ll];
      cr[j] = acc ? cr[j] + dot : dot;
    }
  }
}

template <class T>
void gemm_nt(const T* a, const T* b, T* c, int m, int n, int l, bool acc, Backend be) {
  if (be == Backend::Blas && blas_available()) {
    detail::cblas_gemm_nt(a, b, c, m, n, l, acc);
    return;
  }
  if (be == Backend::OpenMP) {
#ifdef _OPENMP
#pragma omp parallel
    {
      int nt = omp_get_num_threads();
      int tid = omp_get_thread_num();
      int lo = static_cast<int>(static_cast<long long>(m) * tid / nt);
      int hi = static_cast<int>(static_cast<long long>(m) * (tid + 1) / nt);
      if (lo < hi) gemm_nt_rows(a, b, c, lo, hi, n, l, acc);
    }
    return;
#endif
  }
  gemm_nt_rows(a, b, c, 0, m, n, l, acc);
}

// ---------------------------------------------------------------------------
// im2col / col2im (square kernel, symmetric padding)
// ---------------------------------------------------------------------------

inline int conv_out_size(int in, int k, int pad, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

// col is [cin*k*k, ho*wo] for one image; row index = (ci*k + kh)*k + kw.
template <class T>
void im2col(const T* x, int cin, int h, int w, int k, int pad, int stride, T* col) {
  const int ho = conv_out_size(h, k, pad, stride);
  const int wo = conv_out_size(w, k, pad, stride);
  for (int ci = 0; ci < cin; ++ci) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* row = col + (static_cast<std::size_t>(ci) * k * k + kh * k + kw) *
                           (static_cast<std::size_t>(ho) * wo);
        const T* xp = x + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          const int y = oy * stride - pad + kh;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (y < 0 || y >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            const int xx = ox * stride - pad + kw;
            dst[ox] = (xx < 0 || xx >= w) ? T(0) : xp[static_cast<std::size_t>(y) * w + xx];
          }
        }
      }
    }
  }
}

// Gather form: dx[ci,y,x] = sum over (kh,kw) of dcol entries that map there.
// Ascending (kh,kw); each dcol entry is itself a finished partial sum.
template <class T>
void col2im_add(const T* dcol, int cin, int h, int w, int k, int pad, int stride, T* dx) {
  const int ho = conv_out_size(h, k, pad, stride);
  const int wo = conv_out_size(w, k, pad, stride);
  for (int ci = 0; ci < cin; ++ci) {
    T* dxp = dx + static_cast<std::size_t>(ci) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        T acc = dxp[static_cast<std::size_t>(y) * w + x];
        for (int kh = 0; kh < k; ++kh) {
          const int ty = y + pad - kh;
          if (ty < 0 || ty % stride != 0) continue;
          const int oy = ty / stride;
          if (oy >= ho) continue;
          for (int kw = 0; kw < k; ++kw) {
            const int tx = x + pad - kw;
            if (tx < 0 || tx % stride != 0) continue;
            const int ox = tx / stride;
            if (ox >= wo) continue;
            acc += dcol[(static_cast<std::size_t>(ci) * k * k + kh * k + kw) *
                            (static_cast<std::size_t>(ho) * wo) +
                        static_cast<std::size_t>(oy) * wo + ox];
          }
        }
        dxp[static_cast<std::size_t>(y) * w + x] = acc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

// Scratch shared by conv calls so the col buffers are allocated once.
template <class T>
struct Workspace {
  std::vector<T> col;
  std::vector<T> dcol;
  T* ensure_col(std::size_t n) {
    if (col.size() < n) col.resize(n);
    return col.data();
  }
  T* ensure_dcol(std::size_t n) {
    if (dcol.size() < n) dcol.resize(n);
    return dcol.data();
  }
};

// y = conv(x, w) + b. x [N,Ci,H,W], w [Co,Ci,k,k], y [N,Co,Ho,Wo].
// Serial backend is a direct naive convolution; OpenMP/Blas use im2col+gemm.
// The (ci,kh,kw) accumulation order matches across all three.
template <class T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const std::vector<T>& bias,
                    int stride, int pad, Tensor<T>& y, Workspace<T>& ws, Backend be) {
  const int k = w.h;
  const int ho = conv_out_size(x.h, k, pad, stride);
  const int wo = conv_out_size(x.w, k, pad, stride);
  y = Tensor<T>(x.n, w.n, ho, wo);

  if (be == Backend::Serial) {
    for (int i = 0; i < x.n; ++i) {
      for (int co = 0; co < w.n; ++co) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            T acc = T(0);
            for (int ci = 0; ci < x.c; ++ci) {
              for (int kh = 0; kh < k; ++kh) {
                const int yy = oy * stride - pad + kh;
                if (yy < 0 || yy >= x.h) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int xx = ox * stride - pad + kw;
                  if (xx < 0 || xx >= x.w) continue;
                  acc += x.at(i, ci, yy, xx) * w.at(co, ci, kh, kw);
                }
              }
            }
            y.at(i, co, oy, ox) = bias.empty() ? acc : acc + bias[co];
          }
        }
      }
    }
    return;
  }

  const std::size_t kdim = static_cast<std::size_t>(x.c) * k * k;
  const std::size_t p = static_cast<std::size_t>(ho) * wo;
  T* col = ws.ensure_col(kdim * p * x.n);

  if (be == Backend::Blas && blas_available()) {
    for (int i = 0; i < x.n; ++i) {
      T* ci = col + kdim * p * i;
      im2col(x.plane(i, 0), x.c, x.h, x.w, k, pad, stride, ci);
      gemm_nn(w.data(), ci, y.plane(i, 0), w.n, static_cast<int>(p), static_cast<int>(kdim),
              false, be);
    }
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < x.n; ++i) {
      T* ci = col + kdim * p * i;
      im2col(x.plane(i, 0), x.c, x.h, x.w, k, pad, stride, ci);
      gemm_nn_rows(w.data(), ci, y.plane(i, 0), 0, w.n, static_cast<int>(p),
                   static_cast<int>(kdim), false);
    }
  }

  if (!bias.empty()) {
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int i = 0; i < x.n; ++i) {
      for (int co = 0; co < w.n; ++co) {
        T* yp = y.plane(i, co);
        const T b = bias[co];
        for (std::size_t q = 0; q < p; ++q) yp[q] += b;
      }
    }
  }
}

// Backward pass. dw/db accumulate (+=) when given; dx is overwritten.
// Weight gradients are accumulated image by image (each image contributes a
// finished partial sum), matching the per-image gemm of the fast path.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                     int pad, Tensor<T>* dx, Tensor<T>* dw, std::vector<T>* db,
                     Workspace<T>& ws, Backend be) {
  const int k = w.h;
  const int ho = dy.h;
  const int wo = dy.w;
  const std::size_t p = static_cast<std::size_t>(ho) * wo;
  const std::size_t kdim = static_cast<std::size_t>(x.c) * k * k;

  if (dx) *dx = Tensor<T>(x.n, x.c, x.h, x.w);

  if (be == Backend::Serial) {
    if (dx) {
      for (int i = 0; i < x.n; ++i) {
        for (int ci = 0; ci < x.c; ++ci) {
          for (int y = 0; y < x.h; ++y) {
            for (int xx = 0; xx < x.w; ++xx) {
              T acc = T(0);
              for (int kh = 0; kh < k; ++kh) {
                const int ty = y + pad - kh;
                if (ty < 0 || ty % stride != 0 || ty / stride >= ho) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int tx = xx + pad - kw;
                  if (tx < 0 || tx % stride != 0 || tx / stride >= wo) continue;
                  T part = T(0);
                  for (int co = 0; co < w.n; ++co)
                    part += w.at(co, ci, kh, kw) * dy.at(i, co, ty / stride, tx / stride);
                  acc += part;
                }
              }
              dx->at(i, ci, y, xx) = acc;
            }
          }
        }
      }
    }
    if (dw) {
      for (int co = 0; co < w.n; ++co) {
        for (int ci = 0; ci < x.c; ++ci) {
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              T acc = dw->at(co, ci, kh, kw);
              for (int i = 0; i < x.n; ++i) {
                T part = T(0);
                for (int oy = 0; oy < ho; ++oy) {
                  const int yy = oy * stride - pad + kh;
                  if (yy < 0 || yy >= x.h) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int xx = ox * stride - pad + kw;
                    if (xx < 0 || xx >= x.w) continue;
                    part += dy.at(i, co, oy, ox) * x.at(i, ci, yy, xx);
                  }
                }
                acc += part;
              }
              dw->at(co, ci, kh, kw) = acc;
            }
          }
        }
      }
    }
    if (db) {
      for (int co = 0; co < w.n; ++co) {
        T acc = (*db)[co];
        for (int i = 0; i < x.n; ++i) {
          T part = T(0);
          const T* dyp = dy.plane(i, co);
          for (std::size_t q = 0; q < p; ++q) part += dyp[q];
          acc += part;
        }
        (*db)[co] = acc;
      }
    }
    return;
  }

  // im2col-based path. Column buffers are rebuilt here; cheaper than caching
  // them across forward/backward at batch sizes this project uses.
  T* col = (dw != nullptr) ? ws.ensure_col(kdim * p * x.n) : nullptr;
  T* dcol = (dx != nullptr) ? ws.ensure_dcol(kdim * p * x.n) : nullptr;

  if (be == Backend::Blas && blas_available()) {
    for (int i = 0; i < x.n; ++i) {
      if (dw) im2col(x.plane(i, 0), x.c, x.h, x.w, k, pad, stride, col + kdim * p * i);
      if (dx)
        gemm_tn(w.data(), dy.plane(i, 0), dcol + kdim * p * i, static_cast<int>(kdim),
                static_cast<int>(p), w.n, false, be);
      if (dw)
        gemm_nt(dy.plane(i, 0), col + kdim * p * i, dw->data(), w.n, static_cast<int>(kdim),
                static_cast<int>(p), true, be);
    }
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < x.n; ++i) {
      if (dw) im2col(x.plane(i, 0), x.c, x.h, x.w, k, pad, stride, col + kdim * p * i);
      if (dx)
        gemm_tn_rows(w.data(), dy.plane(i, 0), dcol + kdim * p * i, 0, static_cast<int>(kdim),
                     static_cast<int>(p), w.n, static_cast<int>(kdim), false);
    }
    if (dw) {
      // Images stay serial so dw accumulation order is fixed; rows parallel.
      for (int i = 0; i < x.n; ++i) {
        const T* dyp = dy.plane(i, 0);
        const T* ci = col + kdim * p * i;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int co = 0; co < w.n; ++co)
          gemm_nt_rows(dyp, ci, dw->data(), co, co + 1, static_cast<int>(kdim),
                       static_cast<int>(p), true);
      }
    }
  }

  if (dx) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < x.n; ++i)
      col2im_add(dcol + kdim * p * i, x.c, x.h, x.w, k, pad, stride, dx->plane(i, 0));
  }

  if (db) {
    for (int co = 0; co < w.n; ++co) {
      T acc = (*db)[co];
      for (int i = 0; i < x.n; ++i) {
        T part = T(0);
        const T* dyp = dy.plane(i, co);
        for (std::size_t q = 0; q < p; ++q) part += dyp[q];
        acc += part;
      }
      (*db)[co] = acc;
    }
  }
}

// ---------------------------------------------------------------------------
// batch norm (per channel over N*H*W)
// ---------------------------------------------------------------------------

template <class T>
struct BnCache {
  bool train = false;
  std::vector<T> mean, invstd;
};

template <class T>
void bn_forward(const Tensor<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                std::vector<T>& run_mean, std::vector<T>& run_var, T momentum, T eps,
                bool train, Tensor<T>& y, BnCache<T>& cache, Backend be) {
  y = Tensor<T>(x.n, x.c, x.h, x.w);
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  const T count = static_cast<T>(x.n * plane);
  cache.train = train;
  cache.mean.assign(x.c, T(0));
  cache.invstd.assign(x.c, T(0));

  auto channel = [&](int j) {
    T mean, invstd;
    if (train) {
      T s = T(0);
      for (int i = 0; i < x.n; ++i) {
        const T* xp = x.plane(i, j);
        for (std::size_t q = 0; q < plane; ++q) s += xp[q];
      }
      mean = s / count;
      T v = T(0);
      for (int i = 0; i < x.n; ++i) {
        const T* xp = x.plane(i, j);
        for (std::size_t q = 0; q < plane; ++q) {
          const T d = xp[q] - mean;
          v += d * d;
        }
      }
      const T var = v / count;  // biased, also what the running buffer stores
      invstd = T(1) / std::sqrt(var + eps);
      run_mean[j] = (T(1) - momentum) * run_mean[j] + momentum * mean;
      run_var[j] = (T(1) - momentum) * run_var[j] + momentum * var;
    } else {
      mean = run_mean[j];
      invstd = T(1) / std::sqrt(run_var[j] + eps);
    }
    cache.mean[j] = mean;
    cache.invstd[j] = invstd;
    const T g = gamma[j], bta = beta[j];
    for (int i = 0; i < x.n; ++i) {
      const T* xp = x.plane(i, j);
      T* yp = y.plane(i, j);
      for (std::size_t q = 0; q < plane; ++q) yp[q] = g * (xp[q] - mean) * invstd + bta;
    }
  };

  if (be == Backend::Serial) {
    for (int j = 0; j < x.c; ++j) channel(j);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int j = 0; j < x.c; ++j) channel(j);
  }
}

// Train-mode backward through the batch statistics.
template <class T>
void bn_backward(const Tensor<T>& x, const Tensor<T>& dy, const std::vector<T>& gamma,
                 const BnCache<T>& cache, Tensor<T>& dx, std::vector<T>& dgamma,
                 std::vector<T>& dbeta, Backend be) {
  assert(cache.train);
  dx = Tensor<T>(x.n, x.c, x.h, x.w);
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  const T count = static_cast<T>(x.n * plane);

  auto channel = [&](int j) {
    const T mean = cache.mean[j];
    const T invstd = cache.invstd[j];
    const T g = gamma[j];
    T sum_dy = T(0), sum_dy_xhat = T(0);
    for (int i = 0; i < x.n; ++i) {
      const T* xp = x.plane(i, j);
      const T* dyp = dy.plane(i, j);
      for (std::size_t q = 0; q < plane; ++q) {
        sum_dy += dyp[q];
        sum_dy_xhat += dyp[q] * (xp[q] - mean) * invstd;
      }
    }
    dgamma[j] += sum_dy_xhat;
    dbeta[j] += sum_dy;
    const T inv_count = T(1) / count;
    for (int i = 0; i < x.n; ++i) {
      const T* xp = x.plane(i, j);
      const T* dyp = dy.plane(i, j);
      T* dxp = dx.plane(i, j);
      for (std::size_t q = 0; q < plane; ++q) {
        const T xhat = (xp[q] - mean) * invstd;
        dxp[q] = g * invstd * (dyp[q] - inv_count * sum_dy - xhat * inv_count * sum_dy_xhat);
      }
    }
  };

  if (be == Backend::Serial) {
    for (int j = 0; j < x.c; ++j) channel(j);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int j = 0; j < x.c; ++j) channel(j);
  }
}

// ---------------------------------------------------------------------------
// activations, pooling, resampling, concat
// ---------------------------------------------------------------------------

template <class T>
void leaky_relu_forward(const Tensor<T>& x, T slope, Tensor<T>& y, Backend be) {
  y = Tensor<T>(x.n, x.c, x.h, x.w);
  const std::int64_t total = static_cast<std::int64_t>(x.size());
  if (be == Backend::Serial) {
    for (std::int64_t q = 0; q < total; ++q) y.v[q] = x.v[q] > T(0) ? x.v[q] : slope * x.v[q];
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t q = 0; q < total; ++q) y.v[q] = x.v[q] > T(0) ? x.v[q] : slope * x.v[q];
  }
}

template <class T>
void leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& dy, T slope, Tensor<T>& dx,
                         Backend be) {
  dx = Tensor<T>(x.n, x.c, x.h, x.w);
  const std::int64_t total = static_cast<std::int64_t>(x.size());
  if (be == Backend::Serial) {
    for (std::int64_t q = 0; q < total; ++q) dx.v[q] = x.v[q] > T(0) ? dy.v[q] : slope * dy.v[q];
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t q = 0; q < total; ++q) dx.v[q] = x.v[q] > T(0) ? dy.v[q] : slope * dy.v[q];
  }
}

// 2x2 max pooling, stride 2. Ties keep the first maximum in scan order.
template <class T>
void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<std::int32_t>& argmax,
                      Backend be) {
  assert(x.h % 2 == 0 && x.w % 2 == 0);
  const int ho = x.h / 2, wo = x.w / 2;
  y = Tensor<T>(x.n, x.c, ho, wo);
  argmax.assign(y.size(), 0);

  auto plane_op = [&](std::int64_t pl) {
    const int i = static_cast<int>(pl / x.c);
    const int j = static_cast<int>(pl % x.c);
    const T* xp = x.plane(i, j);
    T* yp = y.plane(i, j);
    std::int32_t* ap = argmax.data() + (static_cast<std::size_t>(i) * x.c + j) *
                                           (static_cast<std::size_t>(ho) * wo);
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        T best = xp[static_cast<std::size_t>(2 * oy) * x.w + 2 * ox];
        std::int32_t bi = 2 * oy * x.w + 2 * ox;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dxx = 0; dxx < 2; ++dxx) {
            const std::int32_t q = (2 * oy + dy) * x.w + 2 * ox + dxx;
            if (xp[q] > best) {
              best = xp[q];
              bi = q;
            }
          }
        }
        yp[static_cast<std::size_t>(oy) * wo + ox] = best;
        ap[static_cast<std::size_t>(oy) * wo + ox] = bi;
      }
    }
  };

  const std::int64_t planes = static_cast<std::int64_t>(x.n) * x.c;
  if (be == Backend::Serial) {
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  }
}

template <class T>
void maxpool2_backward(const Tensor<T>& dy, const std::vector<std::int32_t>& argmax, int h,
                       int w, Tensor<T>& dx, Backend be) {
  dx = Tensor<T>(dy.n, dy.c, h, w);
  const std::int64_t planes = static_cast<std::int64_t>(dy.n) * dy.c;
  auto plane_op = [&](std::int64_t pl) {
    const int i = static_cast<int>(pl / dy.c);
    const int j = static_cast<int>(pl % dy.c);
    const T* dyp = dy.plane(i, j);
    T* dxp = dx.plane(i, j);
    const std::int32_t* ap = argmax.data() + (static_cast<std::size_t>(i) * dy.c + j) *
                                                 (static_cast<std::size_t>(dy.h) * dy.w);
    const std::size_t cells = static_cast<std::size_t>(dy.h) * dy.w;
    for (std::size_t q = 0; q < cells; ++q) dxp[ap[q]] += dyp[q];
  };
  if (be == Backend::Serial) {
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  }
}

template <class T>
void upsample2_forward(const Tensor<T>& x, Tensor<T>& y, Backend be) {
  y = Tensor<T>(x.n, x.c, x.h * 2, x.w * 2);
  const std::int64_t planes = static_cast<std::int64_t>(x.n) * x.c;
  auto plane_op = [&](std::int64_t pl) {
    const int i = static_cast<int>(pl / x.c);
    const int j = static_cast<int>(pl % x.c);
    const T* xp = x.plane(i, j);
    T* yp = y.plane(i, j);
    for (int yy = 0; yy < y.h; ++yy) {
      const T* row = xp + static_cast<std::size_t>(yy / 2) * x.w;
      T* out = yp + static_cast<std::size_t>(yy) * y.w;
      for (int xx = 0; xx < y.w; ++xx) out[xx] = row[xx / 2];
    }
  };
  if (be == Backend::Serial) {
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  }
}

template <class T>
void upsample2_backward(const Tensor<T>& dy, Tensor<T>& dx, Backend be) {
  assert(dy.h % 2 == 0 && dy.w % 2 == 0);
  dx = Tensor<T>(dy.n, dy.c, dy.h / 2, dy.w / 2);
  const std::int64_t planes = static_cast<std::int64_t>(dy.n) * dy.c;
  auto plane_op = [&](std::int64_t pl) {
    const int i = static_cast<int>(pl / dy.c);
    const int j = static_cast<int>(pl % dy.c);
    const T* dyp = dy.plane(i, j);
    T* dxp = dx.plane(i, j);
    for (int yy = 0; yy < dx.h; ++yy) {
      for (int xx = 0; xx < dx.w; ++xx) {
        const T* r0 = dyp + static_cast<std::size_t>(2 * yy) * dy.w + 2 * xx;
        const T* r1 = dyp + static_cast<std::size_t>(2 * yy + 1) * dy.w + 2 * xx;
        dxp[static_cast<std::size_t>(yy) * dx.w + xx] = ((r0[0] + r0[1]) + r1[0]) + r1[1];
      }
    }
  };
  if (be == Backend::Serial) {
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  }
}

// Nearest-neighbor upsample by an arbitrary integer factor (discriminator
// output head).
template <class T>
void upsample_n_forward(const Tensor<T>& x, int factor, Tensor<T>& y, Backend be) {
  if (factor == 1) {
    y = x;
    return;
  }
  y = Tensor<T>(x.n, x.c, x.h * factor, x.w * factor);
  const std::int64_t planes = static_cast<std::int64_t>(x.n) * x.c;
  auto plane_op = [&](std::int64_t pl) {
    const int i = static_cast<int>(pl / x.c);
    const int j = static_cast<int>(pl % x.c);
    const T* xp = x.plane(i, j);
    T* yp = y.plane(i, j);
    for (int yy = 0; yy < y.h; ++yy) {
      const T* row = xp + static_cast<std::size_t>(yy / factor) * x.w;
      T* out = yp + static_cast<std::size_t>(yy) * y.w;
      for (int xx = 0; xx < y.w; ++xx) out[xx] = row[xx / factor];
    }
  };
  if (be == Backend::Serial) {
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  }
}

template <class T>
void upsample_n_backward(const Tensor<T>& dy, int factor, Tensor<T>& dx, Backend be) {
  if (factor == 1) {
    dx = dy;
    return;
  }
  dx = Tensor<T>(dy.n, dy.c, dy.h / factor, dy.w / factor);
  const std::int64_t planes = static_cast<std::int64_t>(dy.n) * dy.c;
  auto plane_op = [&](std::int64_t pl) {
    const int i = static_cast<int>(pl / dy.c);
    const int j = static_cast<int>(pl % dy.c);
    const T* dyp = dy.plane(i, j);
    T* dxp = dx.plane(i, j);
    for (int yy = 0; yy < dx.h; ++yy) {
      for (int xx = 0; xx < dx.w; ++xx) {
        T acc = T(0);
        for (int fy = 0; fy < factor; ++fy) {
          const T* row = dyp + static_cast<std::size_t>(yy * factor + fy) * dy.w + xx * factor;
          for (int fx = 0; fx < factor; ++fx) acc += row[fx];
        }
        dxp[static_cast<std::size_t>(yy) * dx.w + xx] = acc;
      }
    }
  };
  if (be == Backend::Serial) {
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t pl = 0; pl < planes; ++pl) plane_op(pl);
  }
}

template <class T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
  assert(a.n == b.n && a.h == b.h && a.w == b.w);
  y = Tensor<T>(a.n, a.c + b.c, a.h, a.w);
  const std::size_t plane = static_cast<std::size_t>(a.h) * a.w;
  for (int i = 0; i < a.n; ++i) {
    std::copy(a.plane(i, 0), a.plane(i, 0) + static_cast<std::size_t>(a.c) * plane,
              y.plane(i, 0));
    std::copy(b.plane(i, 0), b.plane(i, 0) + static_cast<std::size_t>(b.c) * plane,
              y.plane(i, a.c));
  }
}

template <class T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>& da, Tensor<T>& db) {
  const int cb = dy.c - ca;
  da = Tensor<T>(dy.n, ca, dy.h, dy.w);
  db = Tensor<T>(dy.n, cb, dy.h, dy.w);
  const std::size_t plane = static_cast<std::size_t>(dy.h) * dy.w;
  for (int i = 0; i < dy.n; ++i) {
    std::copy(dy.plane(i, 0), dy.plane(i, 0) + static_cast<std::size_t>(ca) * plane,
              da.plane(i, 0));
    std::copy(dy.plane(i, ca), dy.plane(i, ca) + static_cast<std::size_t>(cb) * plane,
              db.plane(i, 0));
  }
}

// ---------------------------------------------------------------------------
// per-pixel softmax over channels
// ---------------------------------------------------------------------------

template <class T>
void softmax_channels(const Tensor<T>& x, Tensor<T>& y, Backend be) {
  y = Tensor<T>(x.n, x.c, x.h, x.w);
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  const std::int64_t pixels = static_cast<std::int64_t>(x.n) * plane;
  auto pixel_op = [&](std::int64_t q) {
    const int i = static_cast<int>(q / plane);
    const std::size_t off = static_cast<std::size_t>(q % plane);
    const T* base = x.data() + static_cast<std::size_t>(i) * x.c * plane + off;
    T* out = y.data() + static_cast<std::size_t>(i) * x.c * plane + off;
    T m = base[0];
    for (int j = 1; j < x.c; ++j) m = std::max(m, base[j * plane]);
    T s = T(0);
    for (int j = 0; j < x.c; ++j) {
      const T e = std::exp(base[j * plane] - m);
      out[j * plane] = e;
      s += e;
    }
    const T inv = T(1) / s;
    for (int j = 0; j < x.c; ++j) out[j * plane] *= inv;
  };
  if (be == Backend::Serial) {
    for (std::int64_t q = 0; q < pixels; ++q) pixel_op(q);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t q = 0; q < pixels; ++q) pixel_op(q);
  }
}

// dlogits from dprobs: dl_j = p_j * (dp_j - sum_k dp_k p_k).
template <class T>
void softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs, Tensor<T>& dlogits,
                      Backend be) {
  dlogits = Tensor<T>(probs.n, probs.c, probs.h, probs.w);
  const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
  const std::int64_t pixels = static_cast<std::int64_t>(probs.n) * plane;
  auto pixel_op = [&](std::int64_t q) {
    const int i = static_cast<int>(q / plane);
    const std::size_t off = static_cast<std::size_t>(q % plane);
    const T* p = probs.data() + static_cast<std::size_t>(i) * probs.c * plane + off;
    const T* dp = dprobs.data() + static_cast<std::size_t>(i) * probs.c * plane + off;
    T* dl = dlogits.data() + static_cast<std::size_t>(i) * probs.c * plane + off;
    T dot = T(0);
    for (int j = 0; j < probs.c; ++j) dot += dp[j * plane] * p[j * plane];
    for (int j = 0; j < probs.c; ++j) dl[j * plane] = p[j * plane] * (dp[j * plane] - dot);
  };
  if (be == Backend::Serial) {
    for (std::int64_t q = 0; q < pixels; ++q) pixel_op(q);
  } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t q = 0; q < pixels; ++q) pixel_op(q);
  }
}

}  // namespace psumml::kernels
