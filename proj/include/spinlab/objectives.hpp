#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/policy.hpp"

namespace spinlab {

// Convex, monotonically decreasing loss family.
//   logistic:    l(x) = -log sigma(x),  l'(x) = -sigma(-x)
//   exponential: l(x) = exp(-x),        l'(x) = -exp(-x)
enum class LossKind { Logistic, Exponential };

enum class Objective { Sft, Spin, Tspin, TspinRef };

std::string to_string(LossKind kind);
std::string to_string(Objective objective);

double ell(LossKind kind, double x);
double ell_prime(LossKind kind, double x);

struct LossSpec {
  Objective objective = Objective::Tspin;
  LossKind loss_kind = LossKind::Logistic;
  double alpha = 1.0;    // confidence scale; > 0
  double beta = 0.1;     // historical-advantage weight; >= 0, Tspin/TspinRef only
  double lambda = 1.0;   // Spin reward scale; > 0

  void validate() const;  // throws ConfigError naming the field
};

// One (x, y, y', y0) record. Response-space indices are precomputed at batch
// construction. Reference log-probs under the previous-iteration policy are
// cached here when an objective needs them, so no live reference policy is
// read during loss evaluation.
struct TripletItem {
  PromptId prompt = 0;
  Response y, y_prime, y_zero;
  std::size_t y_index = 0, y_prime_index = 0, y_zero_index = 0;
  double ref_logp_y = 0.0, ref_logp_yp = 0.0, ref_logp_y0 = 0.0;
  bool has_ref = false;
};

class PolicySnapshot;

struct TripletBatch {
  std::vector<TripletItem> items;

  // reference may be null (Tspin/Sft need none). When given, caches reference
  // log-probs for every item; they must come out finite.
  static TripletBatch build(const ToyTask& task, const AnnotatedSet& annotated,
                            std::span<const Response> y_prime_bank,
                            std::span<const Response> y_zero_bank,
                            const PolicySnapshot* reference);
};

// u = log pi(y|x) - log pi(y'|x), v = log pi(y'|x) - log pi(y0|x),
// both under the current policy state.
struct AdvantageTerms {
  double u = 0.0;
  double v = 0.0;
};

AdvantageTerms advantage_terms(const Policy& policy, const TripletItem& item);

// Every loss below evaluates value and gradient in one pass over the batch,
// in a fixed item order, so results are bit-stable. Evaluation is pure given
// (policy parameters, batch, spec).
struct LossResult {
  double value = 0.0;
  std::vector<double> gradient;
};

// Mean of -log pi(y|x) over the batch; gradient is the mean of
// -grad log pi(y|x). Throws UsageError on an empty batch.
LossResult sft_loss(const Policy& policy, std::span<const AnnotatedRecord> batch);

// Pairwise loss on reference log-ratios:
//   mean l( lambda*[log pi(y) - ref_y] - lambda*[log pi(y') - ref_yp] ).
// Requires cached reference log-probs.
LossResult spin_loss(const Policy& policy, const TripletBatch& batch, const LossSpec& spec);

// Triplet loss, reference-free:
//   mean l(alpha*u) + beta * l(alpha*v).
LossResult tspin_loss(const Policy& policy, const TripletBatch& batch, const LossSpec& spec);

// Triplet ablation with reference log-ratios in both terms. With beta = 0 it
// coincides with spin_loss at lambda := alpha.
LossResult tspin_ref_loss(const Policy& policy, const TripletBatch& batch, const LossSpec& spec);

// Dispatch by spec.objective. Sft reads `annotated`; the others read `batch`.
LossResult evaluate_loss(const Policy& policy, const LossSpec& spec, const TripletBatch& batch,
                         std::span<const AnnotatedRecord> annotated);

// Main-player confidence c(x, y) = alpha * log pi(y|x). Positive alpha, so
// the confidence ordering over responses equals the log-likelihood ordering.
double confidence(const Policy& policy, const LossSpec& spec, PromptId prompt,
                  const Response& r);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
  // max |analytic - fd| / max(1, |loss|) over every entry, small ones
  // included. The difference quotient carries rounding noise of order
  // eps*|loss|/(2*step) ~ 1e-11 * |loss|, so this stays at noise level for a
  // correct gradient and jumps by orders of magnitude for a wrong one.
  double max_abs_error = 0.0;
  std::size_t worst_abs_index = 0;
};

// Central finite differences over every parameter against the analytic
// gradient of `loss`. Relative error is measured where either side exceeds
// 1e-4; below that a 1e-6 relative bound is not meaningful against the f64
// noise floor, so small entries are covered by max_abs_error instead.
// `step` must lie in (1e-8, 1e-3).
GradCheckReport grad_check(Policy& policy,
                           const std::function<LossResult(const Policy&)>& loss,
                           double step = 1e-5);

}  // namespace spinlab
