#pragma once

#include <cmath>
#include <cstddef>

// Dense numeric inner loops used by the autodiff graph and optimizer.
// Scalar reference kernels live in vivi::kern::scalar and are the
// semantic ground truth; AVX2 variants (x86-64 only) are selected at
// runtime when the CPU supports them. Equivalence of the two paths is
// covered by tests/test_kernels.cpp.

#if defined(__x86_64__) || defined(_M_X64)
#define VIVI_X86_64 1
#else
#define VIVI_X86_64 0
#endif

namespace vivi::kern {

enum class Isa { scalar, avx2 };

Isa detect_best_isa();
Isa active_isa();
void force_isa(Isa isa);
const char* isa_name(Isa isa);

// ---------------------------------------------------------------------------
// Scalar reference kernels.
// ---------------------------------------------------------------------------
namespace scalar {

template <typename T>
inline void add(const T* a, const T* b, T* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
inline void sub(const T* a, const T* b, T* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
inline void mul(const T* a, const T* b, T* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

// y += alpha * x
template <typename T>
inline void axpy(T alpha, const T* x, T* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
inline void scale(T alpha, T* x, size_t n) {
  for (size_t i = 0; i < n; ++i) x[i] *= alpha;
}

template <typename T>
inline void relu(const T* x, T* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

// gx += gy where x > 0
template <typename T>
inline void relu_grad(const T* x, const T* gy, T* gx, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    if (x[i] > T(0)) gx[i] += gy[i];
  }
}

template <typename T>
inline T reduce_sum(const T* x, size_t n) {
  T acc = T(0);
  for (size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
inline T reduce_max(const T* x, size_t n) {
  T m = x[0];
  for (size_t i = 1; i < n; ++i) m = x[i] > m ? x[i] : m;
  return m;
}

template <typename T>
inline bool has_nonfinite(const T* x, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    if (!std::isfinite(x[i])) return true;
  }
  return false;
}

// x[r][c] += bias[c]
template <typename T>
inline void add_bias(T* x, const T* bias, size_t rows, size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    T* row = x + r * cols;
    for (size_t c = 0; c < cols; ++c) row[c] += bias[c];
  }
}

// buf = momentum*buf + grad + wd*param; param -= lr*buf
template <typename T>
inline void sgd_update(T* param, T* buf, const T* grad, T momentum, T wd, T lr, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    buf[i] = momentum * buf[i] + grad[i] + wd * param[i];
    param[i] -= lr * buf[i];
  }
}

// C (MxN) = [+=] A (MxK) * B (KxN), all row-major contiguous.
template <typename T>
inline void gemm_nn(size_t M, size_t N, size_t K, const T* A, const T* B, T* C,
                    bool accumulate) {
  for (size_t m = 0; m < M; ++m) {
    T* crow = C + m * N;
    if (!accumulate) {
      for (size_t nn = 0; nn < N; ++nn) crow[nn] = T(0);
    }
    const T* arow = A + m * K;
    for (size_t k = 0; k < K; ++k) {
      const T a = arow[k];
      const T* brow = B + k * N;
      for (size_t nn = 0; nn < N; ++nn) crow[nn] += a * brow[nn];
    }
  }
}

// C (MxN) = [+=] A (MxK) * B^T with B stored (NxK).
template <typename T>
inline void gemm_nt(size_t M, size_t N, size_t K, const T* A, const T* B, T* C,
                    bool accumulate) {
  for (size_t m = 0; m < M; ++m) {
    const T* arow = A + m * K;
    T* crow = C + m * N;
    for (size_t nn = 0; nn < N; ++nn) {
      const T* brow = B + nn * K;
      T acc = T(0);
      for (size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[nn] = accumulate ? crow[nn] + acc : acc;
    }
  }
}

// C (MxN) = [+=] A^T * B with A stored (KxM), B stored (KxN).
template <typename T>
inline void gemm_tn(size_t M, size_t N, size_t K, const T* A, const T* B, T* C,
                    bool accumulate) {
  if (!accumulate) {
    for (size_t i = 0; i < M * N; ++i) C[i] = T(0);
  }
  for (size_t k = 0; k < K; ++k) {
    const T* arow = A + k * M;
    const T* brow = B + k * N;
    for (size_t m = 0; m < M; ++m) {
      const T a = arow[m];
      T* crow = C + m * N;
      for (size_t nn = 0; nn < N; ++nn) crow[nn] += a * brow[nn];
    }
  }
}

}  // namespace scalar

// ---------------------------------------------------------------------------
// AVX2 kernels (kernels_avx2.cpp, compiled with -mavx2 -mfma).
// ---------------------------------------------------------------------------
#if VIVI_X86_64
namespace avx2 {

void add(const float* a, const float* b, float* out, size_t n);
void add(const double* a, const double* b, double* out, size_t n);
void sub(const float* a, const float* b, float* out, size_t n);
void sub(const double* a, const double* b, double* out, size_t n);
void mul(const float* a, const float* b, float* out, size_t n);
void mul(const double* a, const double* b, double* out, size_t n);
void axpy(float alpha, const float* x, float* y, size_t n);
void axpy(double alpha, const double* x, double* y, size_t n);
void scale(float alpha, float* x, size_t n);
void scale(double alpha, double* x, size_t n);
void relu(const float* x, float* out, size_t n);
void relu(const double* x, double* out, size_t n);
void relu_grad(const float* x, const float* gy, float* gx, size_t n);
void relu_grad(const double* x, const double* gy, double* gx, size_t n);
float reduce_sum(const float* x, size_t n);
double reduce_sum(const double* x, size_t n);
float reduce_max(const float* x, size_t n);
double reduce_max(const double* x, size_t n);
bool has_nonfinite(const float* x, size_t n);
bool has_nonfinite(const double* x, size_t n);
void add_bias(float* x, const float* bias, size_t rows, size_t cols);
void add_bias(double* x, const double* bias, size_t rows, size_t cols);
void sgd_update(float* param, float* buf, const float* grad, float momentum, float wd,
                float lr, size_t n);
void sgd_update(double* param, double* buf, const double* grad, double momentum,
                double wd, double lr, size_t n);
void gemm_nn(size_t M, size_t N, size_t K, const float* A, const float* B, float* C,
             bool accumulate);
void gemm_nn(size_t M, size_t N, size_t K, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_nt(size_t M, size_t N, size_t K, const float* A, const float* B, float* C,
             bool accumulate);
void gemm_nt(size_t M, size_t N, size_t K, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_tn(size_t M, size_t N, size_t K, const float* A, const float* B, float* C,
             bool accumulate);
void gemm_tn(size_t M, size_t N, size_t K, const double* A, const double* B, double* C,
             bool accumulate);

}  // namespace avx2
#endif  // VIVI_X86_64

// ---------------------------------------------------------------------------
// Dispatched entry points. Defined in kernels.cpp for float and double.
// ---------------------------------------------------------------------------
template <typename T>
void add(const T* a, const T* b, T* out, size_t n);
template <typename T>
void sub(const T* a, const T* b, T* out, size_t n);
template <typename T>
void mul(const T* a, const T* b, T* out, size_t n);
template <typename T>
void axpy(T alpha, const T* x, T* y, size_t n);
template <typename T>
void scale(T alpha, T* x, size_t n);
template <typename T>
void relu(const T* x, T* out, size_t n);
template <typename T>
void relu_grad(const T* x, const T* gy, T* gx, size_t n);
template <typename T>
T reduce_sum(const T* x, size_t n);
template <typename T>
T reduce_max(const T* x, size_t n);
template <typename T>
bool has_nonfinite(const T* x, size_t n);
template <typename T>
void add_bias(T* x, const T* bias, size_t rows, size_t cols);
template <typename T>
void sgd_update(T* param, T* buf, const T* grad, T momentum, T wd, T lr, size_t n);
template <typename T>
void gemm_nn(size_t M, size_t N, size_t K, const T* A, const T* B, T* C,
             bool accumulate = false);
template <typename T>
void gemm_nt(size_t M, size_t N, size_t K, const T* A, const T* B, T* C,
             bool accumulate = false);
template <typename T>
void gemm_tn(size_t M, size_t N, size_t K, const T* A, const T* B, T* C,
             bool accumulate = false);

}  // namespace vivi::kern
