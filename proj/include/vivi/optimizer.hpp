#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vivi/graph.hpp"

namespace vivi::opt {

// Stepwise learning-rate schedule: linear warmup to the base rate, then the
// product of all decay factors whose step has been reached.
struct Schedule {
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;
  std::vector<std::pair<int64_t, double>> decay_points;  // (step, factor)

  void validate() const;
};

double lr_at_step(const Schedule& s, double base_lr, int64_t step);

template <typename T>
struct OptimizerState {
  std::unordered_map<std::string, std::vector<T>> momentum_buffers;
  int64_t step = 0;
  T base_lr = T(0);
  T momentum = T(0.9);
  T weight_decay = T(0);
};

// buffer <- momentum*buffer + grad (+ wd*param for eligible params);
// param <- param - lr*buffer. Aborts (throws) on non-finite gradients
// before touching any parameter.
template <typename T>
void sgd_momentum_step(const std::vector<ad::Parameter<T>*>& params,
                       OptimizerState<T>& state, T lr);

}  // namespace vivi::opt
