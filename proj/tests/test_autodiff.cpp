#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "vivi/graph.hpp"

using namespace vivi;
using ad::Array;
using ad::Graph;
using ad::Var;

TEST_CASE("relu clamps negatives") {
  Graph<double> g;
  Var<double> x = g.input(Array<double>({3}, {-1, 0, 2}));
  Var<double> y = ad::relu(x);
  CHECK(g.data(y) == std::vector<double>{0, 0, 2});
}

TEST_CASE("l2 normalization of a 3-4-5 row") {
  Graph<double> g;
  Var<double> x = g.input(Array<double>({1, 2}, {3, 4}));
  Var<double> y = ad::l2_normalize_rows(x);
  CHECK(g.data(y)[0] == doctest::Approx(0.6).epsilon(1e-9));
  CHECK(g.data(y)[1] == doctest::Approx(0.8).epsilon(1e-9));
}

TEST_CASE("valid convolution of a constant image with an averaging kernel") {
  Graph<double> g;
  Array<double> img({1, 5, 5, 1});
  std::fill(img.data.begin(), img.data.end(), 3.25);
  Array<double> k({1, 3, 3, 1});
  std::fill(k.data.begin(), k.data.end(), 1.0 / 9.0);
  Var<double> y = ad::conv2d(g.input(std::move(img)), g.input(std::move(k)),
                             std::optional<Var<double>>{}, 1, ad::Padding::valid);
  CHECK(g.shape(y) == Shape{1, 3, 3, 1});
  for (double v : g.data(y)) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("backward of sum(w*w)") {
  Graph<double> g;
  Var<double> w = g.variable(Array<double>({2}, {1, 2}));
  Var<double> out = ad::sum_all(ad::mul(w, w));
  g.backward(out);
  CHECK(g.grad(w) == std::vector<double>{2, 4});
}

TEST_CASE("constant output leaves zero grads") {
  Graph<double> g;
  Var<double> w = g.variable(Array<double>({3}, {1, 2, 3}));
  Var<double> c = g.input(Array<double>::scalar(5.0));
  g.backward(c);
  CHECK(g.grad(w) == std::vector<double>{0, 0, 0});
  (void)w;
}

TEST_CASE("softmax cross-entropy gradient for uniform logits") {
  Graph<double> g;
  Var<double> logits = g.variable(Array<double>({1, 2}, {0, 0}));
  Var<double> l = ad::softmax_xent(logits, {0});
  g.backward(l);
  CHECK(g.grad(logits)[0] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(g.grad(logits)[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("backward twice errors") {
  Graph<double> g;
  Var<double> w = g.variable(Array<double>::scalar(2.0));
  Var<double> out = ad::mul(w, w);
  g.backward(out);
  CHECK_THROWS_AS(g.backward(out), Error);
}

TEST_CASE("backward requires a scalar") {
  Graph<double> g;
  Var<double> w = g.variable(Array<double>({2}, {1, 2}));
  Var<double> y = ad::mul(w, w);
  CHECK_THROWS_AS(g.backward(y), ShapeError);
}

TEST_CASE("shape mismatch names the primitive and both shapes") {
  Graph<double> g;
  Var<double> a = g.input(Array<double>({2}, {1, 2}));
  Var<double> b = g.input(Array<double>({3}, {1, 2, 3}));
  try {
    ad::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("(2)") != std::string::npos);
    CHECK(msg.find("(3)") != std::string::npos);
  }
}

TEST_CASE("nan production is reported with op provenance") {
  Graph<double> g;
  Var<double> a = g.input(Array<double>({1}, {1e308}));
  try {
    ad::mul(a, a);  // overflows to inf
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("mul") != std::string::npos);
  }
}

TEST_CASE("tape linearity: backward of a sum equals sum of backwards") {
  auto run = [](bool joint, std::vector<double>& grad_out) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> d(-1, 1);
    Array<double> init({4});
    for (auto& v : init.data) v = d(rng);
    if (joint) {
      Graph<double> g;
      Var<double> w = g.variable(init);
      Var<double> s1 = ad::sum_all(ad::mul(w, w));
      Var<double> s2 = ad::mean_all(ad::relu(w));
      g.backward(ad::add(s1, s2));
      grad_out = g.grad(w);
    } else {
      std::vector<double> total(4, 0.0);
      for (int which = 0; which < 2; ++which) {
        Graph<double> g;
        Var<double> w = g.variable(init);
        Var<double> s = which == 0 ? ad::sum_all(ad::mul(w, w))
                                   : ad::mean_all(ad::relu(w));
        g.backward(s);
        for (size_t i = 0; i < 4; ++i) total[i] += g.grad(w)[i];
      }
      grad_out = total;
    }
  };
  std::vector<double> joint, separate;
  run(true, joint);
  run(false, separate);
  for (size_t i = 0; i < joint.size(); ++i)
    CHECK(joint[i] == doctest::Approx(separate[i]).epsilon(1e-12));
}

TEST_CASE("gather accumulates repeated indices") {
  Graph<double> g;
  Var<double> w = g.variable(Array<double>({3}, {1, 2, 3}));
  Var<double> y = ad::gather(w, {1, 1, 2});
  g.backward(ad::sum_all(y));
  CHECK(g.grad(w) == std::vector<double>{0, 2, 1});
}

TEST_CASE("pairwise squared distances") {
  Graph<double> g;
  Var<double> x = g.input(Array<double>({2, 2}, {0, 0, 3, 4}));
  Var<double> d = ad::pairwise_sqdist(x);
  CHECK(g.data(d) == std::vector<double>{0, 25, 25, 0});
}

TEST_CASE("pool_rows averages row groups") {
  Graph<double> g;
  Var<double> x = g.input(Array<double>({4, 2}, {1, 0, 0, 1, 2, 2, 4, 4}));
  Var<double> y = ad::pool_rows(x, 2);
  CHECK(g.data(y) == std::vector<double>{0.5, 0.5, 3, 3});
}

TEST_CASE("mean pooling is permutation invariant") {
  Graph<double> g;
  Var<double> a = g.input(Array<double>({2, 2}, {1, 0, 0, 1}));
  Var<double> b = g.input(Array<double>({2, 2}, {0, 1, 1, 0}));
  CHECK(g.data(ad::pool_rows(a, 2)) == g.data(ad::pool_rows(b, 2)));
}

TEST_CASE("logsumexp matches direct evaluation") {
  Graph<double> g;
  Var<double> x = g.input(Array<double>({1, 3}, {1.0, 2.0, 3.0}));
  Var<double> y = ad::logsumexp_rows(x);
  const double expect = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(g.data(y)[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("masked logsumexp ignores masked-out entries") {
  Graph<double> g;
  Var<double> x = g.input(Array<double>({1, 3}, {1.0, 100.0, 3.0}));
  Var<double> y = ad::masked_logsumexp_rows(x, {1, 0, 1});
  const double expect = std::log(std::exp(1.0) + std::exp(3.0));
  CHECK(g.data(y)[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("batch norm normalizes batch statistics in training mode") {
  Graph<double> g;
  ad::BatchNormState<double> st(1);
  Var<double> x = g.input(Array<double>({4, 1}, {1, 2, 3, 4}));
  Var<double> gamma = g.input(Array<double>({1}, {1}));
  Var<double> beta = g.input(Array<double>({1}, {0}));
  Var<double> y = ad::batch_norm(x, gamma, beta, st, true, 0.9, 1e-9);
  const auto& v = g.data(y);
  double mean = 0, var = 0;
  for (double t : v) mean += t;
  mean /= 4;
  for (double t : v) var += (t - mean) * (t - mean);
  var /= 4;
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  // running stats moved toward the batch
  CHECK(st.running_mean[0] == doctest::Approx(0.1 * 2.5).epsilon(1e-12));
}

TEST_CASE("weight standardization: constant filter becomes zero") {
  Graph<double> g;
  Array<double> k({1, 1, 2, 1});
  std::fill(k.data.begin(), k.data.end(), 5.0);
  Var<double> w = g.input(std::move(k));
  Var<double> y = ad::weight_standardize(w, 1e-5);
  for (double v : g.data(y)) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("weight standardization: two-tap filter becomes plus-minus one") {
  Graph<double> g;
  Var<double> w = g.input(Array<double>({1, 1, 2, 1}, {1, 3}));
  Var<double> y = ad::weight_standardize(w, 1e-9);
  CHECK(g.data(y)[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(g.data(y)[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("weight standardization is idempotent and shift invariant") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-1, 1);
  Array<double> k({4, 3, 3, 2});
  for (auto& v : k.data) v = d(rng);

  Graph<double> g;
  Var<double> w = g.input(k);
  Var<double> once = ad::weight_standardize(w, 1e-7);
  Var<double> twice = ad::weight_standardize(once, 1e-7);
  const auto& v1 = g.data(once);
  const auto& v2 = g.data(twice);
  for (size_t i = 0; i < v1.size(); ++i)
    CHECK(std::abs(v1[i] - v2[i]) <= 1e-6);

  // per-output-channel constant shift does not change the output
  Array<double> shifted = k;
  const int64_t per = 3 * 3 * 2;
  for (int64_t o = 0; o < 4; ++o)
    for (int64_t i = 0; i < per; ++i)
      shifted.data[static_cast<size_t>(o * per + i)] += 0.7 * static_cast<double>(o + 1);
  Graph<double> g2;
  Var<double> ws = ad::weight_standardize(g2.input(shifted), 1e-7);
  const auto& v3 = g2.data(ws);
  for (size_t i = 0; i < v1.size(); ++i)
    CHECK(std::abs(v1[i] - v3[i]) <= 1e-9);
}
