#include "vivi/optimizer.hpp"

#include "vivi/kernels.hpp"

namespace vivi::opt {

void Schedule::validate() const {
  if (total_steps < 1) throw ConfigError("schedule: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw ConfigError(strcat_msg("schedule: warmup_steps ", warmup_steps,
                                 " must be in [0, total_steps)"));
  }
  int64_t prev = -1;
  for (const auto& [step, factor] : decay_points) {
    if (step <= prev) throw ConfigError("schedule: decay points must be strictly increasing");
    if (step > total_steps) {
      throw ConfigError(strcat_msg("schedule: decay point ", step, " exceeds total_steps ",
                                   total_steps));
    }
    if (factor <= 0.0) throw ConfigError("schedule: decay factors must be positive");
    prev = step;
  }
}

double lr_at_step(const Schedule& s, double base_lr, int64_t step) {
  if (step < 0 || step > s.total_steps) {
    throw Error(strcat_msg("lr_at_step: step ", step, " outside [0, ", s.total_steps, "]"));
  }
  if (step < s.warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  double lr = base_lr;
  for (const auto& [decay_step, factor] : s.decay_points) {
    if (decay_step <= step) lr *= factor;
  }
  return lr;
}

template <typename T>
void sgd_momentum_step(const std::vector<ad::Parameter<T>*>& params,
                       OptimizerState<T>& state, T lr) {
  if (lr < T(0)) throw Error("sgd_momentum_step: negative learning rate");
  for (const auto* p : params) {
    if (p->grad.size() != p->value.data.size()) {
      throw ShapeError(strcat_msg("sgd_momentum_step: grad size ", p->grad.size(),
                                  " does not match parameter ", p->name));
    }
    if (kern::has_nonfinite(p->grad.data(), p->grad.size())) {
      throw NumericError(strcat_msg("sgd_momentum_step: non-finite gradient for parameter ",
                                    p->name));
    }
  }
  for (auto* p : params) {
    auto& buf = state.momentum_buffers[p->name];
    if (buf.size() != p->value.data.size()) buf.assign(p->value.data.size(), T(0));
    const T wd = p->weight_decay_eligible ? state.weight_decay : T(0);
    kern::sgd_update(p->value.data.data(), buf.data(), p->grad.data(), state.momentum, wd,
                     lr, buf.size());
    if (kern::has_nonfinite(p->value.data.data(), p->value.data.size())) {
      throw NumericError(strcat_msg("sgd_momentum_step: parameter ", p->name,
                                    " became non-finite"));
    }
  }
  state.step += 1;
}

template void sgd_momentum_step<float>(const std::vector<ad::Parameter<float>*>&,
                                       OptimizerState<float>&, float);
template void sgd_momentum_step<double>(const std::vector<ad::Parameter<double>*>&,
                                        OptimizerState<double>&, double);

}  // namespace vivi::opt
