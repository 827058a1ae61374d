#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vivi/gradcheck.hpp"

using namespace vivi;
using ad::Array;
using ad::Graph;
using ad::Parameter;
using ad::Var;

TEST_CASE("standard suite passes at 1e-4") {
  auto results = ad::standard_grad_checks(1e-4, 1234);
  CHECK(results.size() >= 25);
  for (const auto& r : results) {
    INFO(r.name, " max_rel_err=", r.max_rel_err);
    CHECK(r.pass);
    CHECK(r.elements > 0);
  }
}

TEST_CASE("a corrupted backward rule is caught") {
  // y = mean(x*x) with a deliberately wrong vjp (factor 3 instead of 2)
  Parameter<double> x("x", Array<double>({6}, {0.3, -0.8, 0.5, 0.9, -0.2, 0.7}));
  auto build = [&x](Graph<double>& g) -> Var<double> {
    Var<double> vx = g.param(x);
    const auto& val = g.data(vx);
    std::vector<double> sq(val.size());
    for (size_t i = 0; i < val.size(); ++i) sq[i] = val[i] * val[i];
    int id = g.add_node({6}, std::move(sq), true, "bad_square", {vx.id},
                        [px = vx.id](Graph<double>& gg, Graph<double>::Node& self) {
                          auto& gx = gg.grad_buf(px);
                          const auto& v = gg.node(px).val;
                          for (size_t i = 0; i < v.size(); ++i)
                            gx[i] += self.grad[i] * 3.0 * v[i];  // wrong rule
                        });
    return ad::mean_all(Var<double>{&g, id});
  };
  auto res = ad::grad_check("bad_square", build, {&x}, 1e-4);
  CHECK(!res.pass);
  CHECK(res.max_rel_err > 1e-2);
}

TEST_CASE("linear map passes at 1e-4 (spec example)") {
  Parameter<double> x("x", Array<double>({2, 3}, {0.1, -0.4, 0.7, 0.2, 0.5, -0.6}));
  Parameter<double> w("w", Array<double>({3, 2}, {0.3, -0.2, 0.8, 0.1, -0.5, 0.4}));
  auto res = ad::grad_check(
      "linear",
      [&](Graph<double>& g) {
        return ad::mean_all(ad::linear(g.param(x), g.param(w), std::optional<Var<double>>{}));
      },
      {&x, &w}, 1e-4);
  CHECK(res.pass);
}
