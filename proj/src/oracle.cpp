#include "spinlab/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "spinlab/objectives.hpp"
#include "spinlab/optimizer.hpp"
#include "spinlab/textio.hpp"

namespace spinlab {

namespace {

std::vector<double> softmax_of(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& p : out) p /= z;
  return out;
}

void check_prompt_index(const ConfidenceTable& table, PromptId prompt) {
  if (prompt < 0 || static_cast<std::size_t>(prompt) >= table.num_prompts()) {
    throw DomainError("prompt id " + std::to_string(prompt) + " out of range");
  }
}

}  // namespace

ConfidenceTable random_confidence_table(std::size_t num_prompts, std::size_t space_size,
                                        double sigma, std::uint64_t seed) {
  ConfidenceTable table;
  table.values.resize(num_prompts);
  for (std::size_t p = 0; p < num_prompts; ++p) {
    Rng rng(derive_seed(seed, "oracle.confidence_table", p));
    table.values[p].resize(space_size);
    for (double& c : table.values[p]) c = sigma * rng.next_normal();
  }
  return table;
}

ClosedFormPolicy closed_form_opponent(const ConfidenceTable& table, double alpha) {
  if (!(alpha > 0.0)) throw DomainError("alpha: must be > 0");
  ClosedFormPolicy policy;
  policy.probs.resize(table.num_prompts());
  policy.log_partition.resize(table.num_prompts());
  for (std::size_t p = 0; p < table.num_prompts(); ++p) {
    const auto& c = table.values[p];
    std::vector<double> scaled(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) scaled[i] = c[i] / alpha;
    const double m = *std::max_element(scaled.begin(), scaled.end());
    double z = 0.0;
    policy.probs[p].resize(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      policy.probs[p][i] = std::exp(scaled[i] - m);
      z += policy.probs[p][i];
    }
    for (double& q : policy.probs[p]) q /= z;
    policy.log_partition[p] = m + std::log(z);
  }
  return policy;
}

double opponent_objective(std::span<const double> dist, const ConfidenceTable& table,
                          double alpha, PromptId prompt) {
  if (!(alpha > 0.0)) throw DomainError("alpha: must be > 0");
  check_prompt_index(table, prompt);
  const auto& c = table.values[static_cast<std::size_t>(prompt)];
  if (dist.size() != c.size()) throw DomainError("distribution size does not match the table");
  double sum = 0.0;
  for (double q : dist) {
    if (!(q >= 0.0)) throw DomainError("distribution entry negative or non-finite");
    sum += q;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw DomainError("input is not normalized: sums to " + format_double(sum));
  }
  double objective = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] > 0.0) objective += dist[i] * (c[i] - alpha * std::log(dist[i]));
  }
  return objective;
}

double kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DomainError("kl: size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0) || !(q[i] >= 0.0)) throw DomainError("kl: negative or non-finite entry");
    if (p[i] > 0.0) {
      if (q[i] <= 0.0) {
        throw DomainError("kl: support violation at index " + std::to_string(i));
      }
      sum += p[i] * std::log(p[i] / q[i]);
    }
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Entropy-regularized confidence maximization over tabular logits.
//
// J(l) = E_p[c] + alpha*H(p) with p = softmax(l);
// dJ/dl_z = p_z * ((c_z - alpha*log p_z) - J).
//
// Plain ascent alone crawls on coordinates that must reach tiny target mass
// (1/t logit decay), so the run opens with an RMS-preconditioned ascent phase
// that moves every logit at a steady rate, then switches to plain ascent for
// the final contraction. Both phases use the exact enumeration gradient.

namespace {

struct AscentResult {
  double kl = 0.0;
  std::size_t steps = 0;
  std::vector<double> trajectory;
};

AscentResult ascend_row(std::span<const double> c, double alpha,
                        std::span<const double> target, double tolerance,
                        std::size_t max_steps) {
  const std::size_t n = c.size();
  std::vector<double> logits(n, 0.0);
  std::vector<double> acc(n, 0.0);
  std::vector<double> grad(n);

  const std::size_t phase1 = std::min<std::size_t>(max_steps * 3 / 4, 30000);
  const double rms_lr = 2e-3;
  const double rho = 0.99, eps = 1e-8;
  const double ga_lr = 1.0 / alpha;

  AscentResult result;
  std::vector<double> probs;
  for (std::size_t s = 0; s < max_steps; ++s) {
    probs = softmax_of(logits);
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      grad[i] = c[i] - alpha * std::log(probs[i]);
      objective += probs[i] * grad[i];
    }
    for (std::size_t i = 0; i < n; ++i) grad[i] = probs[i] * (grad[i] - objective);

    if (s % 200 == 0) {
      const double current = kl(probs, target);
      result.trajectory.push_back(current);
      if (current <= tolerance * 0.1) {
        result.kl = current;
        result.steps = s;
        return result;
      }
    }
    if (s < phase1) {
      for (std::size_t i = 0; i < n; ++i) {
        acc[i] = rho * acc[i] + (1.0 - rho) * grad[i] * grad[i];
        logits[i] += rms_lr * grad[i] / (std::sqrt(acc[i]) + eps);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) logits[i] += ga_lr * grad[i];
    }
  }
  result.kl = kl(softmax_of(logits), target);
  result.steps = max_steps;
  return result;
}

}  // namespace

OracleReport verify_prop1_by_training(const ConfidenceTable& table, double alpha,
                                      double tolerance, std::size_t max_steps) {
  if (!(alpha > 0.0)) throw DomainError("alpha: must be > 0");
  const ClosedFormPolicy closed = closed_form_opponent(table, alpha);

  OracleReport report;
  report.name = "prop1";
  report.alpha = alpha;
  report.pass = true;
  std::vector<double> worst_trajectory;
  for (std::size_t p = 0; p < table.num_prompts(); ++p) {
    const AscentResult row = ascend_row(table.values[p], alpha, closed.probs[p],
                                        tolerance, max_steps);
    report.steps = std::max(report.steps, row.steps);
    if (row.kl > report.kl) {
      report.kl = row.kl;
      worst_trajectory = row.trajectory;
    }
  }
  report.pass = report.kl <= tolerance;
  if (!report.pass) report.kl_trajectory = std::move(worst_trajectory);
  return report;
}

// ---------------------------------------------------------------------------
// Exact-expectation annotated-likelihood minimization, tabular family. Per
// prompt the expected loss is cross-entropy to pi_data, gradient
// softmax(l) - pi_data; rows are independent, so each is driven on its own.
// Same two-phase scheme as above for the same reason.

namespace {

struct SftRowResult {
  double kl = 0.0;
  std::size_t steps = 0;
  std::vector<double> trajectory;
};

SftRowResult sft_row(std::span<const double> target, double tolerance, std::size_t max_steps) {
  const std::size_t n = target.size();
  std::vector<double> logits(n, 0.0);
  std::vector<double> acc(n, 0.0);

  const std::size_t phase1 = std::min<std::size_t>(max_steps * 3 / 5, 3000);
  // rho bounds the sustained logit decay rate at (1-rho)/2 per step; 0.9
  // covers point-mass targets (logit gaps ~ 25) well inside phase 1
  const double rms_lr = 2e-2;
  const double rho = 0.9, eps = 1e-8;
  const double gd_lr = 2.0;

  SftRowResult result;
  for (std::size_t s = 0; s < max_steps; ++s) {
    const std::vector<double> probs = softmax_of(logits);
    if (s % 50 == 0) {
      const double current = kl(target, probs);
      result.trajectory.push_back(current);
      if (current <= tolerance * 0.1) {
        result.kl = current;
        result.steps = s;
        return result;
      }
    }
    if (s < phase1) {
      for (std::size_t i = 0; i < n; ++i) {
        const double g = probs[i] - target[i];
        acc[i] = rho * acc[i] + (1.0 - rho) * g * g;
        logits[i] -= rms_lr * g / (std::sqrt(acc[i]) + eps);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) logits[i] -= gd_lr * (probs[i] - target[i]);
    }
  }
  result.kl = kl(target, softmax_of(logits));
  result.steps = max_steps;
  return result;
}

}  // namespace

OracleReport verify_sft_optimum(const ToyTask& task, double tolerance, std::size_t max_steps) {
  OracleReport report;
  report.name = "sft_optimum";
  report.alpha = 0.0;
  std::vector<double> worst_trajectory;
  for (std::size_t p = 0; p < task.num_prompts(); ++p) {
    const SftRowResult row = sft_row(task.data_dist[p], tolerance, max_steps);
    report.steps = std::max(report.steps, row.steps);
    if (row.kl > report.kl) {
      report.kl = row.kl;
      worst_trajectory = row.trajectory;
    }
  }
  report.pass = report.kl <= tolerance;
  if (!report.pass) report.kl_trajectory = std::move(worst_trajectory);
  return report;
}

OracleReport sft_gap_autoregressive(const ToyTask& task, std::size_t max_steps) {
  auto policy = make_autoregressive_policy(task.num_prompts(), task.space,
                                           derive_seed(0, "oracle.ar_gap"));
  const std::size_t n = task.space->size();
  const auto& responses = task.space->all();

  // exact expected gradient: sum_x q(x) sum_y pi_data(y|x) * (-grad log pi(y|x))
  std::vector<GradContribution> contributions;
  for (std::size_t p = 0; p < task.num_prompts(); ++p) {
    for (std::size_t i = 0; i < n; ++i) {
      const double w = task.prompt_weights[p] * task.data_dist[p][i];
      if (w > 0.0) {
        contributions.push_back({static_cast<PromptId>(p), &responses[i], -w});
      }
    }
  }

  Optimizer optimizer({OptimizerKind::RmsProp, 1e-2, 0.99, 1e-8}, policy->num_params());
  std::vector<double> values(policy->params().values.begin(), policy->params().values.end());
  std::vector<double> grad(policy->num_params());
  for (std::size_t s = 0; s < max_steps; ++s) {
    std::fill(grad.begin(), grad.end(), 0.0);
    policy->accumulate_grad_batch(contributions, grad);
    optimizer.step(values, grad);
    policy->set_param_values(values);
  }

  double weighted = 0.0;
  for (std::size_t p = 0; p < task.num_prompts(); ++p) {
    weighted += task.prompt_weights[p] *
                kl(task.data_dist[p], policy->distribution(static_cast<PromptId>(p)));
  }
  OracleReport report;
  report.name = "sft_gap_autoregressive";
  report.kl = weighted;
  report.steps = max_steps;
  report.pass = true;  // informational: the family is not fully expressive
  return report;
}

}  // namespace spinlab
