#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace spinlab {

enum class OptimizerKind { Gd, RmsProp };

std::string to_string(OptimizerKind kind);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::Gd;
  double learning_rate = 0.5;  // desk-scale defaults: gd 0.5, rmsprop 1e-2
  double rho = 0.99;           // rmsprop accumulator decay
  double epsilon = 1e-8;

  void validate() const;
};

// Single-writer parameter-update rule. No weight decay.
//   gd:      theta <- theta - lr*g
//   rmsprop: a <- rho*a + (1-rho)*g^2;  theta <- theta - lr*g/(sqrt(a)+eps)
class Optimizer {
 public:
  Optimizer(OptimizerSettings settings, std::size_t num_params);

  // lr_multiplier scales the learning rate for this step (warmup). Throws
  // NumericError naming the step on a non-finite gradient entry.
  void step(std::span<double> params, std::span<const double> gradient,
            double lr_multiplier = 1.0);

  const OptimizerSettings& settings() const { return settings_; }
  std::uint64_t step_count() const { return step_count_; }
  std::span<const double> accumulator() const { return accumulator_; }
  void reset();

 private:
  OptimizerSettings settings_;
  std::vector<double> accumulator_;
  std::uint64_t step_count_ = 0;
};

// Linear ramp 0 -> 1 over ceil(fraction * total_steps) steps, then 1.
// fraction must lie in (0, 1).
double warmup_multiplier(std::size_t step, std::size_t total_steps, double fraction);
std::vector<double> warmup_schedule(std::size_t total_steps, double fraction);

}  // namespace spinlab
