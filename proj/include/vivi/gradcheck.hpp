#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vivi/graph.hpp"

namespace vivi::ad {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  int64_t elements = 0;
  bool pass = false;
};

// Central finite-difference check of a scalar-valued computation against the
// tape's analytic gradients, at 64-bit precision.
//
// build runs the forward pass on a fresh graph; it must bind every Parameter
// in params (directly or through model code). The harness perturbs each
// parameter element by +/- fd_step and compares (f+ - f-)/(2*fd_step) with
// the accumulated parameter gradient. Elements where both gradients are
// below 1e-12 count as passing (degenerate denominator).
GradCheckResult grad_check(const std::string& name,
                           const std::function<Var<double>(Graph<double>&)>& build,
                           const std::vector<Parameter<double>*>& params, double tolerance,
                           double fd_step = 1e-5);

// The standard suite: every differentiable primitive plus each loss
// (triplet semi-hard, rotation CE, InfoNCE, order BCE, supervised CE and the
// weighted total) end to end through the model code.
std::vector<GradCheckResult> standard_grad_checks(double tolerance, uint64_t seed);

}  // namespace vivi::ad
