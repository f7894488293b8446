#include "spinlab/optimizer.hpp"

#include <cmath>

#include "spinlab/errors.hpp"

namespace spinlab {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Gd ? "gd" : "rmsprop";
}

void OptimizerSettings::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate: must be > 0");
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("rho: must lie in (0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon: must be > 0");
}

Optimizer::Optimizer(OptimizerSettings settings, std::size_t num_params)
    : settings_(settings) {
  settings_.validate();
  accumulator_.assign(num_params, 0.0);
}

void Optimizer::step(std::span<double> params, std::span<const double> gradient,
                     double lr_multiplier) {
  if (params.size() != accumulator_.size() || gradient.size() != accumulator_.size()) {
    throw UsageError("optimizer step: shape mismatch");
  }
  for (std::size_t i = 0; i < gradient.size(); ++i) {
    if (!std::isfinite(gradient[i])) {
      throw NumericError("non-finite gradient entry " + std::to_string(i) + " at optimizer step " +
                         std::to_string(step_count_));
    }
  }
  const double lr = settings_.learning_rate * lr_multiplier;
  if (settings_.kind == OptimizerKind::Gd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * gradient[i];
  } else {
    for (std::size_t i = 0; i < params.size(); ++i) {
      accumulator_[i] = settings_.rho * accumulator_[i] +
                        (1.0 - settings_.rho) * gradient[i] * gradient[i];
      params[i] -= lr * gradient[i] / (std::sqrt(accumulator_[i]) + settings_.epsilon);
    }
  }
  ++step_count_;
}

void Optimizer::reset() {
  accumulator_.assign(accumulator_.size(), 0.0);
  step_count_ = 0;
}

double warmup_multiplier(std::size_t step, std::size_t total_steps, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw UsageError("warmup fraction must lie in (0, 1)");
  }
  const auto ramp = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(total_steps)));
  if (ramp == 0 || step >= ramp) return 1.0;
  return static_cast<double>(step) / static_cast<double>(ramp);
}

std::vector<double> warmup_schedule(std::size_t total_steps, double fraction) {
  std::vector<double> multipliers(total_steps);
  for (std::size_t s = 0; s < total_steps; ++s) {
    multipliers[s] = warmup_multiplier(s, total_steps, fraction);
  }
  return multipliers;
}

}  // namespace spinlab
