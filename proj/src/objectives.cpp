#include "spinlab/objectives.hpp"

#include <cmath>

#include "spinlab/errors.hpp"

namespace spinlab {

std::string to_string(LossKind kind) {
  return kind == LossKind::Logistic ? "logistic" : "exponential";
}

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::Sft: return "sft";
    case Objective::Spin: return "spin";
    case Objective::Tspin: return "tspin";
    case Objective::TspinRef: return "tspin_ref";
  }
  return "?";
}

double ell(LossKind kind, double x) {
  if (kind == LossKind::Exponential) return std::exp(-x);
  // -log sigma(x) = softplus(-x), split for stability
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

double ell_prime(LossKind kind, double x) {
  if (kind == LossKind::Exponential) return -std::exp(-x);
  // -sigma(-x)
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return -e / (1.0 + e);
  }
  return -1.0 / (1.0 + std::exp(x));
}

void LossSpec::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("alpha: must be > 0");
  if (!(beta >= 0.0)) throw ConfigError("beta: must be >= 0");
  if (!(lambda > 0.0)) throw ConfigError("lambda: must be > 0");
}

TripletBatch TripletBatch::build(const ToyTask& task, const AnnotatedSet& annotated,
                                 std::span<const Response> y_prime_bank,
                                 std::span<const Response> y_zero_bank,
                                 const PolicySnapshot* reference) {
  if (y_prime_bank.size() != annotated.records.size() ||
      y_zero_bank.size() != annotated.records.size()) {
    throw UsageError("TripletBatch: banks must align with the annotated records");
  }
  TripletBatch batch;
  batch.items.reserve(annotated.records.size());
  const auto& space = *task.space;
  for (std::size_t i = 0; i < annotated.records.size(); ++i) {
    TripletItem item;
    item.prompt = annotated.records[i].prompt;
    item.y = annotated.records[i].response;
    item.y_prime = y_prime_bank[i];
    item.y_zero = y_zero_bank[i];
    item.y_index = space.index_of(item.y);
    item.y_prime_index = space.index_of(item.y_prime);
    item.y_zero_index = space.index_of(item.y_zero);
    if (reference != nullptr) {
      item.ref_logp_y = reference->log_prob(item.prompt, item.y);
      item.ref_logp_yp = reference->log_prob(item.prompt, item.y_prime);
      item.ref_logp_y0 = reference->log_prob(item.prompt, item.y_zero);
      if (!std::isfinite(item.ref_logp_y) || !std::isfinite(item.ref_logp_yp) ||
          !std::isfinite(item.ref_logp_y0)) {
        throw NumericError("TripletBatch: non-finite reference log-prob at item " +
                           std::to_string(i));
      }
      item.has_ref = true;
    }
    batch.items.push_back(std::move(item));
  }
  return batch;
}

AdvantageTerms advantage_terms(const Policy& policy, const TripletItem& item) {
  const double ly = policy.log_prob(item.prompt, item.y);
  const double lyp = policy.log_prob(item.prompt, item.y_prime);
  const double ly0 = policy.log_prob(item.prompt, item.y_zero);
  return AdvantageTerms{ly - lyp, lyp - ly0};
}

namespace {

// log pi(.|x) rows for every prompt, computed once per loss evaluation so
// value and gradient come from the same state.
std::vector<std::vector<double>> all_prompt_rows(const Policy& policy) {
  std::vector<std::vector<double>> rows(policy.num_prompts());
  for (std::size_t p = 0; p < rows.size(); ++p) {
    rows[p].resize(policy.space().size());
    policy.prompt_log_probs(static_cast<PromptId>(p), rows[p]);
  }
  return rows;
}

void require_refs(const TripletBatch& batch, const char* op) {
  for (const auto& item : batch.items) {
    if (!item.has_ref) {
      throw UsageError(std::string(op) + ": reference log-probs missing from the batch");
    }
  }
}

LossResult finish(const Policy& policy, double value_sum, std::size_t count,
                  std::vector<GradContribution>&& contributions) {
  LossResult result;
  result.value = value_sum / static_cast<double>(count);
  result.gradient.assign(policy.num_params(), 0.0);
  policy.accumulate_grad_batch(contributions, result.gradient);
  return result;
}

}  // namespace

LossResult sft_loss(const Policy& policy, std::span<const AnnotatedRecord> batch) {
  if (batch.empty()) throw UsageError("sft_loss: empty batch");
  const auto rows = all_prompt_rows(policy);
  const auto& space = policy.space();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double value_sum = 0.0;
  std::vector<GradContribution> contributions;
  contributions.reserve(batch.size());
  for (const auto& record : batch) {
    const std::size_t idx = space.index_of(record.response);
    value_sum += -rows[static_cast<std::size_t>(record.prompt)][idx];
    contributions.push_back({record.prompt, &record.response, -inv_b});
  }
  return finish(policy, value_sum, batch.size(), std::move(contributions));
}

LossResult spin_loss(const Policy& policy, const TripletBatch& batch, const LossSpec& spec) {
  if (spec.objective != Objective::Spin) throw UsageError("spin_loss: spec.objective != spin");
  if (batch.items.empty()) throw UsageError("spin_loss: empty batch");
  require_refs(batch, "spin_loss");
  spec.validate();

  const auto rows = all_prompt_rows(policy);
  const double inv_b = 1.0 / static_cast<double>(batch.items.size());
  double value_sum = 0.0;
  std::vector<GradContribution> contributions;
  contributions.reserve(2 * batch.items.size());
  for (const auto& item : batch.items) {
    const auto& row = rows[static_cast<std::size_t>(item.prompt)];
    const double arg = spec.lambda * ((row[item.y_index] - item.ref_logp_y) -
                                      (row[item.y_prime_index] - item.ref_logp_yp));
    value_sum += ell(spec.loss_kind, arg);
    const double d = ell_prime(spec.loss_kind, arg) * spec.lambda * inv_b;
    contributions.push_back({item.prompt, &item.y, d});
    contributions.push_back({item.prompt, &item.y_prime, -d});
  }
  return finish(policy, value_sum, batch.items.size(), std::move(contributions));
}

LossResult tspin_loss(const Policy& policy, const TripletBatch& batch, const LossSpec& spec) {
  if (spec.objective != Objective::Tspin) throw UsageError("tspin_loss: spec.objective != tspin");
  if (batch.items.empty()) throw UsageError("tspin_loss: empty batch");
  spec.validate();

  const auto rows = all_prompt_rows(policy);
  const double inv_b = 1.0 / static_cast<double>(batch.items.size());
  double value_sum = 0.0;
  std::vector<GradContribution> contributions;
  contributions.reserve(3 * batch.items.size());
  for (const auto& item : batch.items) {
    const auto& row = rows[static_cast<std::size_t>(item.prompt)];
    const double u = row[item.y_index] - row[item.y_prime_index];
    const double v = row[item.y_prime_index] - row[item.y_zero_index];
    value_sum += ell(spec.loss_kind, spec.alpha * u) +
                 spec.beta * ell(spec.loss_kind, spec.alpha * v);
    const double du = spec.alpha * ell_prime(spec.loss_kind, spec.alpha * u) * inv_b;
    const double dv = spec.alpha * spec.beta * ell_prime(spec.loss_kind, spec.alpha * v) * inv_b;
    contributions.push_back({item.prompt, &item.y, du});
    contributions.push_back({item.prompt, &item.y_prime, -du + dv});
    contributions.push_back({item.prompt, &item.y_zero, -dv});
  }
  return finish(policy, value_sum, batch.items.size(), std::move(contributions));
}

LossResult tspin_ref_loss(const Policy& policy, const TripletBatch& batch, const LossSpec& spec) {
  if (spec.objective != Objective::TspinRef) {
    throw UsageError("tspin_ref_loss: spec.objective != tspin_ref");
  }
  if (batch.items.empty()) throw UsageError("tspin_ref_loss: empty batch");
  require_refs(batch, "tspin_ref_loss");
  spec.validate();

  const auto rows = all_prompt_rows(policy);
  const double inv_b = 1.0 / static_cast<double>(batch.items.size());
  double value_sum = 0.0;
  std::vector<GradContribution> contributions;
  contributions.reserve(3 * batch.items.size());
  for (const auto& item : batch.items) {
    const auto& row = rows[static_cast<std::size_t>(item.prompt)];
    const double delta_y = row[item.y_index] - item.ref_logp_y;
    const double delta_yp = row[item.y_prime_index] - item.ref_logp_yp;
    const double delta_y0 = row[item.y_zero_index] - item.ref_logp_y0;
    const double arg1 = spec.alpha * (delta_y - delta_yp);
    const double arg2 = spec.alpha * (delta_yp - delta_y0);
    value_sum += ell(spec.loss_kind, arg1) + spec.beta * ell(spec.loss_kind, arg2);
    const double d1 = spec.alpha * ell_prime(spec.loss_kind, arg1) * inv_b;
    const double d2 = spec.alpha * spec.beta * ell_prime(spec.loss_kind, arg2) * inv_b;
    contributions.push_back({item.prompt, &item.y, d1});
    contributions.push_back({item.prompt, &item.y_prime, -d1 + d2});
    contributions.push_back({item.prompt, &item.y_zero, -d2});
  }
  return finish(policy, value_sum, batch.items.size(), std::move(contributions));
}

LossResult evaluate_loss(const Policy& policy, const LossSpec& spec, const TripletBatch& batch,
                         std::span<const AnnotatedRecord> annotated) {
  switch (spec.objective) {
    case Objective::Sft: return sft_loss(policy, annotated);
    case Objective::Spin: return spin_loss(policy, batch, spec);
    case Objective::Tspin: return tspin_loss(policy, batch, spec);
    case Objective::TspinRef: return tspin_ref_loss(policy, batch, spec);
  }
  throw UsageError("evaluate_loss: unknown objective");
}

double confidence(const Policy& policy, const LossSpec& spec, PromptId prompt,
                  const Response& r) {
  if (!(spec.alpha > 0.0)) throw ConfigError("alpha: must be > 0");
  return spec.alpha * policy.log_prob(prompt, r);
}

GradCheckReport grad_check(Policy& policy,
                           const std::function<LossResult(const Policy&)>& loss, double step) {
  if (!(step > 1e-8 && step < 1e-3)) {
    throw UsageError("grad_check: step must lie in (1e-8, 1e-3)");
  }
  const LossResult analytic = loss(policy);
  std::vector<double> values(policy.params().values.begin(), policy.params().values.end());
  const double noise_scale = std::max(1.0, std::abs(analytic.value));

  GradCheckReport report;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    policy.set_param_values(values);
    const double up = loss(policy).value;
    values[i] = saved - step;
    policy.set_param_values(values);
    const double down = loss(policy).value;
    values[i] = saved;

    const double fd = (up - down) / (2.0 * step);
    const double a = analytic.gradient[i];
    const double abs_err = std::abs(a - fd) / noise_scale;
    if (abs_err > report.max_abs_error) {
      report.max_abs_error = abs_err;
      report.worst_abs_index = i;
    }
    const double scale = std::max(std::abs(a), std::abs(fd));
    if (scale <= 1e-4) continue;  // FD noise dominates; covered by max_abs_error
    const double rel = abs_err / scale;
    ++report.entries_checked;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  policy.set_param_values(values);
  return report;
}

}  // namespace spinlab
