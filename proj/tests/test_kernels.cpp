#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "vivi/kernels.hpp"

using namespace vivi;

namespace {

template <typename T>
std::vector<T> random_vec(std::mt19937_64& rng, size_t n, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

const std::vector<size_t> kSizes = {1, 2, 7, 8, 9, 15, 16, 17, 63, 64, 255, 1000, 4103};

bool avx2_available() { return kern::detect_best_isa() == kern::Isa::avx2; }

}  // namespace

TEST_CASE("isa detection and forcing") {
  const kern::Isa best = kern::detect_best_isa();
  kern::force_isa(kern::Isa::scalar);
  CHECK(kern::active_isa() == kern::Isa::scalar);
  kern::force_isa(best);
  CHECK(kern::active_isa() == best);
}

TEST_CASE_TEMPLATE("pointwise kernels are bit-identical across backends", T, float, double) {
  if (!avx2_available()) return;
  std::mt19937_64 rng(7);
  for (size_t n : kSizes) {
    auto a = random_vec<T>(rng, n);
    auto b = random_vec<T>(rng, n);
    std::vector<T> r_scalar(n), r_avx(n);

    kern::scalar::add(a.data(), b.data(), r_scalar.data(), n);
    kern::avx2::add(a.data(), b.data(), r_avx.data(), n);
    CHECK(r_scalar == r_avx);

    kern::scalar::sub(a.data(), b.data(), r_scalar.data(), n);
    kern::avx2::sub(a.data(), b.data(), r_avx.data(), n);
    CHECK(r_scalar == r_avx);

    kern::scalar::mul(a.data(), b.data(), r_scalar.data(), n);
    kern::avx2::mul(a.data(), b.data(), r_avx.data(), n);
    CHECK(r_scalar == r_avx);

    kern::scalar::relu(a.data(), r_scalar.data(), n);
    kern::avx2::relu(a.data(), r_avx.data(), n);
    CHECK(r_scalar == r_avx);

    auto y1 = b, y2 = b;
    kern::scalar::axpy(T(0.37), a.data(), y1.data(), n);
    kern::avx2::axpy(T(0.37), a.data(), y2.data(), n);
    CHECK(y1 == y2);

    auto s1 = a, s2 = a;
    kern::scalar::scale(T(-1.3), s1.data(), n);
    kern::avx2::scale(T(-1.3), s2.data(), n);
    CHECK(s1 == s2);

    auto g1 = b, g2 = b;
    kern::scalar::relu_grad(a.data(), b.data(), g1.data(), n);
    kern::avx2::relu_grad(a.data(), b.data(), g2.data(), n);
    CHECK(g1 == g2);

    CHECK(kern::scalar::reduce_max(a.data(), n) == kern::avx2::reduce_max(a.data(), n));
  }
}

TEST_CASE_TEMPLATE("sgd update matches across backends", T, float, double) {
  if (!avx2_available()) return;
  std::mt19937_64 rng(11);
  for (size_t n : kSizes) {
    auto p1 = random_vec<T>(rng, n);
    auto buf1 = random_vec<T>(rng, n);
    auto g = random_vec<T>(rng, n);
    auto p2 = p1;
    auto buf2 = buf1;
    kern::scalar::sgd_update(p1.data(), buf1.data(), g.data(), T(0.9), T(1e-4), T(0.1), n);
    kern::avx2::sgd_update(p2.data(), buf2.data(), g.data(), T(0.9), T(1e-4), T(0.1), n);
    CHECK(p1 == p2);
    CHECK(buf1 == buf2);
  }
}

TEST_CASE_TEMPLATE("reductions agree within tolerance", T, float, double) {
  if (!avx2_available()) return;
  std::mt19937_64 rng(13);
  const double tol = std::is_same_v<T, float> ? 1e-4 : 1e-12;
  for (size_t n : kSizes) {
    auto a = random_vec<T>(rng, n);
    const double s1 = kern::scalar::reduce_sum(a.data(), n);
    const double s2 = kern::avx2::reduce_sum(a.data(), n);
    CHECK(std::abs(s1 - s2) <= tol * (1.0 + std::abs(s1)) * std::sqrt(double(n)));
  }
}

TEST_CASE_TEMPLATE("nonfinite detection agrees", T, float, double) {
  if (!avx2_available()) return;
  std::mt19937_64 rng(17);
  for (size_t n : kSizes) {
    auto a = random_vec<T>(rng, n);
    CHECK(kern::scalar::has_nonfinite(a.data(), n) == false);
    CHECK(kern::avx2::has_nonfinite(a.data(), n) == false);
    for (T bad : {std::numeric_limits<T>::quiet_NaN(), std::numeric_limits<T>::infinity(),
                  -std::numeric_limits<T>::infinity()}) {
      auto b = a;
      b[n / 2] = bad;
      CHECK(kern::scalar::has_nonfinite(b.data(), n));
      CHECK(kern::avx2::has_nonfinite(b.data(), n));
    }
  }
}

TEST_CASE_TEMPLATE("gemm variants agree with the scalar reference", T, float, double) {
  if (!avx2_available()) return;
  std::mt19937_64 rng(23);
  const double tol = std::is_same_v<T, float> ? 2e-4 : 1e-12;
  struct Dim { size_t M, N, K; };
  const Dim dims[] = {{1, 1, 1},   {2, 3, 4},   {4, 16, 8},  {5, 17, 9},
                      {8, 32, 27}, {13, 31, 7}, {33, 65, 19}, {64, 48, 100}};
  for (auto [M, N, K] : dims) {
    auto A = random_vec<T>(rng, static_cast<size_t>(M * K));
    auto Bn = random_vec<T>(rng, static_cast<size_t>(K * N));
    auto Bt = random_vec<T>(rng, static_cast<size_t>(N * K));
    auto At = random_vec<T>(rng, static_cast<size_t>(K * M));
    auto C0 = random_vec<T>(rng, static_cast<size_t>(M * N));

    for (bool acc : {false, true}) {
      auto c1 = C0, c2 = C0;
      kern::scalar::gemm_nn(M, N, K, A.data(), Bn.data(), c1.data(), acc);
      kern::avx2::gemm_nn(M, N, K, A.data(), Bn.data(), c2.data(), acc);
      for (size_t i = 0; i < c1.size(); ++i)
        CHECK(std::abs(double(c1[i]) - double(c2[i])) <=
              tol * (1.0 + std::abs(double(c1[i]))) * std::sqrt(double(K)));

      c1 = C0; c2 = C0;
      kern::scalar::gemm_nt(M, N, K, A.data(), Bt.data(), c1.data(), acc);
      kern::avx2::gemm_nt(M, N, K, A.data(), Bt.data(), c2.data(), acc);
      for (size_t i = 0; i < c1.size(); ++i)
        CHECK(std::abs(double(c1[i]) - double(c2[i])) <=
              tol * (1.0 + std::abs(double(c1[i]))) * std::sqrt(double(K)));

      c1 = C0; c2 = C0;
      kern::scalar::gemm_tn(M, N, K, At.data(), Bn.data(), c1.data(), acc);
      kern::avx2::gemm_tn(M, N, K, At.data(), Bn.data(), c2.data(), acc);
      for (size_t i = 0; i < c1.size(); ++i)
        CHECK(std::abs(double(c1[i]) - double(c2[i])) <=
              tol * (1.0 + std::abs(double(c1[i]))) * std::sqrt(double(K)));
    }
  }
}

TEST_CASE("gemm_nn computes a known product") {
  // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
  std::vector<double> A = {1, 2, 3, 4}, B = {5, 6, 7, 8}, C(4);
  kern::gemm_nn<double>(2, 2, 2, A.data(), B.data(), C.data(), false);
  CHECK(C == std::vector<double>{19, 22, 43, 50});
}
