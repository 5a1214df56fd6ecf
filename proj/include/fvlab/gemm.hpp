// Row-major sgemm plus im2col/col2im, the compute core behind conv2d.
//
// When FVLAB_USE_OPENBLAS is defined the product is delegated to OpenBLAS,
// pinned to a single BLAS thread: parallelism happens one level up (across
// images in a batch), which keeps every reduction order fixed and results
// independent of the thread count. The fallback kernel is a plain ikj loop.
#pragma once

#include <cstdint>

#ifdef FVLAB_USE_OPENBLAS
#if __has_include(<cblas-openblas.h>)
#include <cblas-openblas.h>
#else
#include <cblas.h>
#endif
#include <mutex>
#endif

namespace fvlab {

#ifdef FVLAB_USE_OPENBLAS
inline void blas_single_thread_once() {
  static std::once_flag flag;
  std::call_once(flag, [] { openblas_set_num_threads(1); });
}
#endif

// C[M,N] = A[M,K] * op(B), optionally accumulating into C.
// trans_b selects op(B) = B^T with B stored [N,K]; otherwise B is [K,N].
inline void sgemm(int m, int n, int k, const float* a, const float* b, float* c,
                  bool trans_b = false, bool accumulate = false) {
#ifdef FVLAB_USE_OPENBLAS
  blas_single_thread_once();
  cblas_sgemm(CblasRowMajor, CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0f,
              a, k, b, trans_b ? k : n, accumulate ? 1.0f : 0.0f, c, n);
#else
  if (!accumulate)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * n; ++i) c[i] = 0.0f;
  if (!trans_b) {
    for (int i = 0; i < m; ++i) {
      const float* arow = a + static_cast<std::int64_t>(i) * k;
      float* crow = c + static_cast<std::int64_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        const float av = arow[kk];
        const float* brow = b + static_cast<std::int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      const float* arow = a + static_cast<std::int64_t>(i) * k;
      float* crow = c + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const float* brow = b + static_cast<std::int64_t>(j) * k;
        float acc = 0.0f;
        for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] += acc;
      }
    }
  }
#endif
}

// col is [C*kh*kw, Ho*Wo]; rows ordered (c, ki, kj), matching the flattening
// of a [Cout, C, kh, kw] kernel. Zero padding.
inline void im2col(const float* x, int c, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, float* col) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::int64_t row = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        float* out = col + row * ho * wo;
        const float* src = x + ch * plane;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            for (int oj = 0; oj < wo; ++oj) *out++ = 0.0f;
            continue;
          }
          const float* srow = src + static_cast<std::int64_t>(ii) * w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            *out++ = (jj < 0 || jj >= w) ? 0.0f : srow[jj];
          }
        }
      }
    }
  }
}

// Scatter-add of a column matrix back onto the (zero-initialised or
// accumulating) image gradient. Inverse layout of im2col.
inline void col2im(const float* col, int c, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, float* dx) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::int64_t row = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const float* src = col + row * ho * wo;
        float* dst = dx + ch * plane;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            src += wo;
            continue;
          }
          float* drow = dst + static_cast<std::int64_t>(ii) * w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) drow[jj] += src[oj];
          }
          src += wo;
        }
      }
    }
  }
}

}  // namespace fvlab
