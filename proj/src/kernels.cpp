#include "vivi/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

namespace vivi::kern {

namespace {

Isa initial_isa() {
  if (const char* env = std::getenv("VIVI_ISA")) {
    if (std::strcmp(env, "scalar") == 0) return Isa::scalar;
    if (std::strcmp(env, "avx2") == 0 && detect_best_isa() == Isa::avx2) return Isa::avx2;
  }
  return detect_best_isa();
}

std::atomic<Isa>& isa_state() {
  static std::atomic<Isa> state{initial_isa()};
  return state;
}

}  // namespace

Isa detect_best_isa() {
#if VIVI_X86_64
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Isa::avx2;
#endif
  return Isa::scalar;
}

Isa active_isa() { return isa_state().load(std::memory_order_relaxed); }

void force_isa(Isa isa) {
  if (isa == Isa::avx2 && detect_best_isa() != Isa::avx2) isa = Isa::scalar;
  isa_state().store(isa, std::memory_order_relaxed);
}

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

#if VIVI_X86_64
#define VIVI_DISPATCH(call_scalar, call_avx2) \
  if (active_isa() == Isa::avx2) {            \
    return call_avx2;                         \
  }                                           \
  return call_scalar;
#else
#define VIVI_DISPATCH(call_scalar, call_avx2) return call_scalar;
#endif

template <typename T>
void add(const T* a, const T* b, T* out, size_t n) {
  VIVI_DISPATCH(scalar::add(a, b, out, n), avx2::add(a, b, out, n));
}

template <typename T>
void sub(const T* a, const T* b, T* out, size_t n) {
  VIVI_DISPATCH(scalar::sub(a, b, out, n), avx2::sub(a, b, out, n));
}

template <typename T>
void mul(const T* a, const T* b, T* out, size_t n) {
  VIVI_DISPATCH(scalar::mul(a, b, out, n), avx2::mul(a, b, out, n));
}

template <typename T>
void axpy(T alpha, const T* x, T* y, size_t n) {
  VIVI_DISPATCH(scalar::axpy(alpha, x, y, n), avx2::axpy(alpha, x, y, n));
}

template <typename T>
void scale(T alpha, T* x, size_t n) {
  VIVI_DISPATCH(scalar::scale(alpha, x, n), avx2::scale(alpha, x, n));
}

template <typename T>
void relu(const T* x, T* out, size_t n) {
  VIVI_DISPATCH(scalar::relu(x, out, n), avx2::relu(x, out, n));
}

template <typename T>
void relu_grad(const T* x, const T* gy, T* gx, size_t n) {
  VIVI_DISPATCH(scalar::relu_grad(x, gy, gx, n), avx2::relu_grad(x, gy, gx, n));
}

template <typename T>
T reduce_sum(const T* x, size_t n) {
  VIVI_DISPATCH(scalar::reduce_sum(x, n), avx2::reduce_sum(x, n));
}

template <typename T>
T reduce_max(const T* x, size_t n) {
  VIVI_DISPATCH(scalar::reduce_max(x, n), avx2::reduce_max(x, n));
}

template <typename T>
bool has_nonfinite(const T* x, size_t n) {
  VIVI_DISPATCH(scalar::has_nonfinite(x, n), avx2::has_nonfinite(x, n));
}

template <typename T>
void add_bias(T* x, const T* bias, size_t rows, size_t cols) {
  VIVI_DISPATCH(scalar::add_bias(x, bias, rows, cols), avx2::add_bias(x, bias, rows, cols));
}

template <typename T>
void sgd_update(T* param, T* buf, const T* grad, T momentum, T wd, T lr, size_t n) {
  VIVI_DISPATCH(scalar::sgd_update(param, buf, grad, momentum, wd, lr, n),
                avx2::sgd_update(param, buf, grad, momentum, wd, lr, n));
}

template <typename T>
void gemm_nn(size_t M, size_t N, size_t K, const T* A, const T* B, T* C, bool accumulate) {
  VIVI_DISPATCH(scalar::gemm_nn(M, N, K, A, B, C, accumulate),
                avx2::gemm_nn(M, N, K, A, B, C, accumulate));
}

template <typename T>
void gemm_nt(size_t M, size_t N, size_t K, const T* A, const T* B, T* C, bool accumulate) {
  VIVI_DISPATCH(scalar::gemm_nt(M, N, K, A, B, C, accumulate),
                avx2::gemm_nt(M, N, K, A, B, C, accumulate));
}

template <typename T>
void gemm_tn(size_t M, size_t N, size_t K, const T* A, const T* B, T* C, bool accumulate) {
  VIVI_DISPATCH(scalar::gemm_tn(M, N, K, A, B, C, accumulate),
                avx2::gemm_tn(M, N, K, A, B, C, accumulate));
}

#undef VIVI_DISPATCH

#define VIVI_INSTANTIATE(T)                                                              \
  template void add<T>(const T*, const T*, T*, size_t);                                  \
  template void sub<T>(const T*, const T*, T*, size_t);                                  \
  template void mul<T>(const T*, const T*, T*, size_t);                                  \
  template void axpy<T>(T, const T*, T*, size_t);                                        \
  template void scale<T>(T, T*, size_t);                                                 \
  template void relu<T>(const T*, T*, size_t);                                           \
  template void relu_grad<T>(const T*, const T*, T*, size_t);                            \
  template T reduce_sum<T>(const T*, size_t);                                            \
  template T reduce_max<T>(const T*, size_t);                                            \
  template bool has_nonfinite<T>(const T*, size_t);                                      \
  template void add_bias<T>(T*, const T*, size_t, size_t);                               \
  template void sgd_update<T>(T*, T*, const T*, T, T, T, size_t);                        \
  template void gemm_nn<T>(size_t, size_t, size_t, const T*, const T*, T*, bool);        \
  template void gemm_nt<T>(size_t, size_t, size_t, const T*, const T*, T*, bool);        \
  template void gemm_tn<T>(size_t, size_t, size_t, const T*, const T*, T*, bool);

VIVI_INSTANTIATE(float)
VIVI_INSTANTIATE(double)

#undef VIVI_INSTANTIATE

}  // namespace vivi::kern
