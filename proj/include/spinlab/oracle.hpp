#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/policy.hpp"

namespace spinlab {

// Exact brute-force verifiers. Everything here works with exact expectations
// over the enumerated response space; no Monte Carlo. Pure functions, safe
// for concurrent use.

struct ConfidenceTable {
  std::vector<std::vector<double>> values;  // one row per prompt over the space

  std::size_t num_prompts() const { return values.size(); }
};

// Seeded random table: entries i.i.d. Normal(0, sigma^2).
ConfidenceTable random_confidence_table(std::size_t num_prompts, std::size_t space_size,
                                        double sigma, std::uint64_t seed);

// pi*(y|x) = exp(c(x,y)/alpha) / Z(x), computed with max-shifted
// exponentiation. log_partition holds log Z(x) per prompt.
struct ClosedFormPolicy {
  std::vector<std::vector<double>> probs;
  std::vector<double> log_partition;
};

ClosedFormPolicy closed_form_opponent(const ConfidenceTable& table, double alpha);

// E_{y ~ dist}[c(x, y)] + alpha * H(dist), by enumeration. Throws DomainError
// if dist is not a distribution over the row.
double opponent_objective(std::span<const double> dist, const ConfidenceTable& table,
                          double alpha, PromptId prompt);

// KL(p || q) = sum p log(p/q) with 0 log 0 = 0. Throws DomainError on
// mismatched sizes, negative entries, or q = 0 where p > 0.
double kl(std::span<const double> p, std::span<const double> q);

struct OracleReport {
  std::string name;
  bool pass = false;
  double kl = 0.0;
  std::size_t steps = 0;
  double alpha = 0.0;
  std::vector<double> kl_trajectory;  // populated on failure
};

// Maximizes the entropy-regularized confidence objective over tabular logits
// with exact enumeration gradients (an RMS-preconditioned approach phase
// followed by plain ascent polish), then reports KL(trained || closed form).
// Passes iff every prompt's KL <= tolerance.
OracleReport verify_prop1_by_training(const ConfidenceTable& table, double alpha,
                                      double tolerance, std::size_t max_steps = 40000);

// Minimizes the exact-expectation annotated log-likelihood loss over the
// tabular family and reports the worst per-prompt KL(pi_data || pi_theta).
// Passes iff it reaches `tolerance` within `max_steps`.
OracleReport verify_sft_optimum(const ToyTask& task, double tolerance,
                                std::size_t max_steps = 5000);

// Same minimization over the autoregressive family. That family is not fully
// expressive, so the result carries no pass/fail threshold; the report's kl
// field is informational and pass is set to true unconditionally.
OracleReport sft_gap_autoregressive(const ToyTask& task, std::size_t max_steps = 5000);

}  // namespace spinlab
