// AVX2/FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma; callers must check kern::active_isa() before entering.
//
// Pointwise kernels deliberately use separate mul/add (no FMA) so their
// results are bit-identical to the scalar reference path. The GEMM
// microkernels use FMA and re-associate reductions; those are compared
// against the scalar path with a tolerance.

#include "vivi/kernels.hpp"

#if VIVI_X86_64

#include <immintrin.h>

namespace vivi::kern::avx2 {

namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  lo = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, lo);
  lo = _mm_add_ss(lo, sh);
  return _mm_cvtss_f32(lo);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  lo = _mm_add_sd(lo, sh);
  return _mm_cvtsd_f64(lo);
}

}  // namespace

void add(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void add(const double* a, const double* b, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void sub(const double* a, const double* b, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const float* a, const float* b, float* out, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void mul(const double* a, const double* b, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void axpy(float alpha, const float* x, float* y, size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 t = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), t));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy(double alpha, const double* x, double* y, size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d t = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), t));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale(float alpha, float* x, size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(x + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

void scale(double alpha, double* x, size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

void relu(const float* x, float* out, size_t n) {
  const __m256 z = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_max_ps(z, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) out[i] = x[i] > 0.f ? x[i] : 0.f;
}

void relu(const double* x, double* out, size_t n) {
  const __m256d z = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_max_pd(z, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_grad(const float* x, const float* gy, float* gx, size_t n) {
  const __m256 z = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), z, _CMP_GT_OQ);
    __m256 g = _mm256_and_ps(mask, _mm256_loadu_ps(gy + i));
    _mm256_storeu_ps(gx + i, _mm256_add_ps(_mm256_loadu_ps(gx + i), g));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.f) gx[i] += gy[i];
  }
}

void relu_grad(const double* x, const double* gy, double* gx, size_t n) {
  const __m256d z = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), z, _CMP_GT_OQ);
    __m256d g = _mm256_and_pd(mask, _mm256_loadu_pd(gy + i));
    _mm256_storeu_pd(gx + i, _mm256_add_pd(_mm256_loadu_pd(gx + i), g));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) gx[i] += gy[i];
  }
}

float reduce_sum(const float* x, size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(x + i));
    acc1 = _mm256_add_ps(acc1, _mm256_loadu_ps(x + i + 8));
  }
  for (; i + 8 <= n; i += 8) acc0 = _mm256_add_ps(acc0, _mm256_loadu_ps(x + i));
  float total = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) total += x[i];
  return total;
}

double reduce_sum(const double* x, size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
  double total = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) total += x[i];
  return total;
}

float reduce_max(const float* x, size_t n) {
  size_t i = 0;
  float m = x[0];
  if (n >= 8) {
    __m256 vm = _mm256_loadu_ps(x);
    for (i = 8; i + 8 <= n; i += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(x + i));
    __m128 lo = _mm_max_ps(_mm256_castps256_ps128(vm), _mm256_extractf128_ps(vm, 1));
    lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_max_ss(lo, _mm_movehdup_ps(lo));
    m = _mm_cvtss_f32(lo);
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

double reduce_max(const double* x, size_t n) {
  size_t i = 0;
  double m = x[0];
  if (n >= 4) {
    __m256d vm = _mm256_loadu_pd(x);
    for (i = 4; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(x + i));
    __m128d lo = _mm_max_pd(_mm256_castpd256_pd128(vm), _mm256_extractf128_pd(vm, 1));
    lo = _mm_max_sd(lo, _mm_unpackhi_pd(lo, lo));
    m = _mm_cvtsd_f64(lo);
  }
  for (; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

// x - x is 0 for finite values and NaN for Inf/NaN inputs.
bool has_nonfinite(const float* x, size_t n) {
  const __m256 z = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256 d = _mm256_sub_ps(v, v);
    if (_mm256_movemask_ps(_mm256_cmp_ps(d, z, _CMP_NEQ_UQ))) return true;
  }
  for (; i < n; ++i) {
    if (!std::isfinite(x[i])) return true;
  }
  return false;
}

bool has_nonfinite(const double* x, size_t n) {
  const __m256d z = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d v = _mm256_loadu_pd(x + i);
    __m256d d = _mm256_sub_pd(v, v);
    if (_mm256_movemask_pd(_mm256_cmp_pd(d, z, _CMP_NEQ_UQ))) return true;
  }
  for (; i < n; ++i) {
    if (!std::isfinite(x[i])) return true;
  }
  return false;
}

void add_bias(float* x, const float* bias, size_t rows, size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    float* row = x + r * cols;
    size_t c = 0;
    for (; c + 8 <= cols; c += 8)
      _mm256_storeu_ps(row + c, _mm256_add_ps(_mm256_loadu_ps(row + c), _mm256_loadu_ps(bias + c)));
    for (; c < cols; ++c) row[c] += bias[c];
  }
}

void add_bias(double* x, const double* bias, size_t rows, size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    double* row = x + r * cols;
    size_t c = 0;
    for (; c + 4 <= cols; c += 4)
      _mm256_storeu_pd(row + c, _mm256_add_pd(_mm256_loadu_pd(row + c), _mm256_loadu_pd(bias + c)));
    for (; c < cols; ++c) row[c] += bias[c];
  }
}

void sgd_update(float* param, float* buf, const float* grad, float momentum, float wd,
                float lr, size_t n) {
  const __m256 vm = _mm256_set1_ps(momentum);
  const __m256 vw = _mm256_set1_ps(wd);
  const __m256 vl = _mm256_set1_ps(lr);
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 p = _mm256_loadu_ps(param + i);
    __m256 b = _mm256_loadu_ps(buf + i);
    __m256 g = _mm256_loadu_ps(grad + i);
    b = _mm256_add_ps(_mm256_add_ps(_mm256_mul_ps(vm, b), g), _mm256_mul_ps(vw, p));
    p = _mm256_sub_ps(p, _mm256_mul_ps(vl, b));
    _mm256_storeu_ps(buf + i, b);
    _mm256_storeu_ps(param + i, p);
  }
  for (; i < n; ++i) {
    buf[i] = momentum * buf[i] + grad[i] + wd * param[i];
    param[i] -= lr * buf[i];
  }
}

void sgd_update(double* param, double* buf, const double* grad, double momentum, double wd,
                double lr, size_t n) {
  const __m256d vm = _mm256_set1_pd(momentum);
  const __m256d vw = _mm256_set1_pd(wd);
  const __m256d vl = _mm256_set1_pd(lr);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d p = _mm256_loadu_pd(param + i);
    __m256d b = _mm256_loadu_pd(buf + i);
    __m256d g = _mm256_loadu_pd(grad + i);
    b = _mm256_add_pd(_mm256_add_pd(_mm256_mul_pd(vm, b), g), _mm256_mul_pd(vw, p));
    p = _mm256_sub_pd(p, _mm256_mul_pd(vl, b));
    _mm256_storeu_pd(buf + i, b);
    _mm256_storeu_pd(param + i, p);
  }
  for (; i < n; ++i) {
    buf[i] = momentum * buf[i] + grad[i] + wd * param[i];
    param[i] -= lr * buf[i];
  }
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

namespace {

// Edge fallback shared by the blocked kernels.
template <typename T>
inline void gemm_nn_edge(size_t m0, size_t m1, size_t n0, size_t n1, size_t N, size_t K,
                         const T* A, const T* B, T* C, bool accumulate) {
  for (size_t m = m0; m < m1; ++m) {
    for (size_t n = n0; n < n1; ++n) {
      T acc = T(0);
      const T* arow = A + m * K;
      for (size_t k = 0; k < K; ++k) acc += arow[k] * B[k * N + n];
      T* c = C + m * N + n;
      *c = accumulate ? *c + acc : acc;
    }
  }
}

}  // namespace

void gemm_nn(size_t M, size_t N, size_t K, const float* A, const float* B, float* C,
             bool accumulate) {
  constexpr size_t MB = 4, NB = 16;
  size_t m0 = 0;
  for (; m0 + MB <= M; m0 += MB) {
    size_t n0 = 0;
    for (; n0 + NB <= N; n0 += NB) {
      __m256 acc[MB][2];
      for (size_t i = 0; i < MB; ++i) {
        if (accumulate) {
          acc[i][0] = _mm256_loadu_ps(C + (m0 + i) * N + n0);
          acc[i][1] = _mm256_loadu_ps(C + (m0 + i) * N + n0 + 8);
        } else {
          acc[i][0] = _mm256_setzero_ps();
          acc[i][1] = _mm256_setzero_ps();
        }
      }
      for (size_t k = 0; k < K; ++k) {
        const __m256 b0 = _mm256_loadu_ps(B + k * N + n0);
        const __m256 b1 = _mm256_loadu_ps(B + k * N + n0 + 8);
        for (size_t i = 0; i < MB; ++i) {
          const __m256 a = _mm256_set1_ps(A[(m0 + i) * K + k]);
          acc[i][0] = _mm256_fmadd_ps(a, b0, acc[i][0]);
          acc[i][1] = _mm256_fmadd_ps(a, b1, acc[i][1]);
        }
      }
      for (size_t i = 0; i < MB; ++i) {
        _mm256_storeu_ps(C + (m0 + i) * N + n0, acc[i][0]);
        _mm256_storeu_ps(C + (m0 + i) * N + n0 + 8, acc[i][1]);
      }
    }
    if (n0 < N) gemm_nn_edge(m0, m0 + MB, n0, N, N, K, A, B, C, accumulate);
  }
  if (m0 < M) gemm_nn_edge(m0, M, 0, N, N, K, A, B, C, accumulate);
}

void gemm_nn(size_t M, size_t N, size_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  constexpr size_t MB = 4, NB = 8;
  size_t m0 = 0;
  for (; m0 + MB <= M; m0 += MB) {
    size_t n0 = 0;
    for (; n0 + NB <= N; n0 += NB) {
      __m256d acc[MB][2];
      for (size_t i = 0; i < MB; ++i) {
        if (accumulate) {
          acc[i][0] = _mm256_loadu_pd(C + (m0 + i) * N + n0);
          acc[i][1] = _mm256_loadu_pd(C + (m0 + i) * N + n0 + 4);
        } else {
          acc[i][0] = _mm256_setzero_pd();
          acc[i][1] = _mm256_setzero_pd();
        }
      }
      for (size_t k = 0; k < K; ++k) {
        const __m256d b0 = _mm256_loadu_pd(B + k * N + n0);
        const __m256d b1 = _mm256_loadu_pd(B + k * N + n0 + 4);
        for (size_t i = 0; i < MB; ++i) {
          const __m256d a = _mm256_set1_pd(A[(m0 + i) * K + k]);
          acc[i][0] = _mm256_fmadd_pd(a, b0, acc[i][0]);
          acc[i][1] = _mm256_fmadd_pd(a, b1, acc[i][1]);
        }
      }
      for (size_t i = 0; i < MB; ++i) {
        _mm256_storeu_pd(C + (m0 + i) * N + n0, acc[i][0]);
        _mm256_storeu_pd(C + (m0 + i) * N + n0 + 4, acc[i][1]);
      }
    }
    if (n0 < N) gemm_nn_edge(m0, m0 + MB, n0, N, N, K, A, B, C, accumulate);
  }
  if (m0 < M) gemm_nn_edge(m0, M, 0, N, N, K, A, B, C, accumulate);
}

void gemm_nt(size_t M, size_t N, size_t K, const float* A, const float* B, float* C,
             bool accumulate) {
  constexpr size_t NB = 4;
  for (size_t m = 0; m < M; ++m) {
    const float* arow = A + m * K;
    size_t n0 = 0;
    for (; n0 + NB <= N; n0 += NB) {
      __m256 acc[NB] = {_mm256_setzero_ps(), _mm256_setzero_ps(), _mm256_setzero_ps(),
                        _mm256_setzero_ps()};
      size_t k = 0;
      for (; k + 8 <= K; k += 8) {
        const __m256 a = _mm256_loadu_ps(arow + k);
        for (size_t i = 0; i < NB; ++i)
          acc[i] = _mm256_fmadd_ps(a, _mm256_loadu_ps(B + (n0 + i) * K + k), acc[i]);
      }
      for (size_t i = 0; i < NB; ++i) {
        float dot = hsum(acc[i]);
        for (size_t kk = k; kk < K; ++kk) dot += arow[kk] * B[(n0 + i) * K + kk];
        float* c = C + m * N + n0 + i;
        *c = accumulate ? *c + dot : dot;
      }
    }
    for (; n0 < N; ++n0) {
      __m256 acc = _mm256_setzero_ps();
      size_t k = 0;
      for (; k + 8 <= K; k += 8)
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + k), _mm256_loadu_ps(B + n0 * K + k), acc);
      float dot = hsum(acc);
      for (; k < K; ++k) dot += arow[k] * B[n0 * K + k];
      float* c = C + m * N + n0;
      *c = accumulate ? *c + dot : dot;
    }
  }
}

void gemm_nt(size_t M, size_t N, size_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  constexpr size_t NB = 4;
  for (size_t m = 0; m < M; ++m) {
    const double* arow = A + m * K;
    size_t n0 = 0;
    for (; n0 + NB <= N; n0 += NB) {
      __m256d acc[NB] = {_mm256_setzero_pd(), _mm256_setzero_pd(), _mm256_setzero_pd(),
                         _mm256_setzero_pd()};
      size_t k = 0;
      for (; k + 4 <= K; k += 4) {
        const __m256d a = _mm256_loadu_pd(arow + k);
        for (size_t i = 0; i < NB; ++i)
          acc[i] = _mm256_fmadd_pd(a, _mm256_loadu_pd(B + (n0 + i) * K + k), acc[i]);
      }
      for (size_t i = 0; i < NB; ++i) {
        double dot = hsum(acc[i]);
        for (size_t kk = k; kk < K; ++kk) dot += arow[kk] * B[(n0 + i) * K + kk];
        double* c = C + m * N + n0 + i;
        *c = accumulate ? *c + dot : dot;
      }
    }
    for (; n0 < N; ++n0) {
      __m256d acc = _mm256_setzero_pd();
      size_t k = 0;
      for (; k + 4 <= K; k += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + k), _mm256_loadu_pd(B + n0 * K + k), acc);
      double dot = hsum(acc);
      for (; k < K; ++k) dot += arow[k] * B[n0 * K + k];
      double* c = C + m * N + n0;
      *c = accumulate ? *c + dot : dot;
    }
  }
}

void gemm_tn(size_t M, size_t N, size_t K, const float* A, const float* B, float* C,
             bool accumulate) {
  if (!accumulate) {
    for (size_t i = 0; i < M * N; ++i) C[i] = 0.f;
  }
  for (size_t k = 0; k < K; ++k) {
    const float* arow = A + k * M;
    const float* brow = B + k * N;
    for (size_t m = 0; m < M; ++m) {
      const __m256 a = _mm256_set1_ps(arow[m]);
      float* crow = C + m * N;
      size_t n = 0;
      for (; n + 8 <= N; n += 8)
        _mm256_storeu_ps(crow + n,
                         _mm256_fmadd_ps(a, _mm256_loadu_ps(brow + n), _mm256_loadu_ps(crow + n)));
      for (; n < N; ++n) crow[n] += arow[m] * brow[n];
    }
  }
}

void gemm_tn(size_t M, size_t N, size_t K, const double* A, const double* B, double* C,
             bool accumulate) {
  if (!accumulate) {
    for (size_t i = 0; i < M * N; ++i) C[i] = 0.0;
  }
  for (size_t k = 0; k < K; ++k) {
    const double* arow = A + k * M;
    const double* brow = B + k * N;
    for (size_t m = 0; m < M; ++m) {
      const __m256d a = _mm256_set1_pd(arow[m]);
      double* crow = C + m * N;
      size_t n = 0;
      for (; n + 4 <= N; n += 4)
        _mm256_storeu_pd(crow + n,
                         _mm256_fmadd_pd(a, _mm256_loadu_pd(brow + n), _mm256_loadu_pd(crow + n)));
      for (; n < N; ++n) crow[n] += arow[m] * brow[n];
    }
  }
}

}  // namespace vivi::kern::avx2

#endif  // VIVI_X86_64
