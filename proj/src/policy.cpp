#include "spinlab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "spinlab/errors.hpp"
#include "spinlab/textio.hpp"

#include <json.hpp>

namespace spinlab {

namespace {

// Shared by every log-probability path so that cached and recomputed values
// agree bit-for-bit.
double row_logsumexp(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double x : row) sum += std::exp(x - m);
  return m + std::log(sum);
}

void row_softmax(std::span<const double> row, std::span<double> out) {
  const double m = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i] - m);
    sum += out[i];
  }
  for (std::size_t i = 0; i < row.size(); ++i) out[i] /= sum;
}

std::size_t sample_from_row(std::span<const double> logits, Rng& rng) {
  std::vector<double> probs(logits.size());
  row_softmax(logits, probs);
  return rng.next_categorical(probs);
}

std::vector<double> normal_init(std::size_t count, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "policy.init"));
  std::vector<double> values(count);
  for (double& v : values) v = 0.1 * rng.next_normal();
  return values;
}

}  // namespace

std::string to_string(PolicyFamily family) {
  return family == PolicyFamily::Tabular ? "tabular" : "autoregressive";
}

std::string to_string(SnapshotLabel label) {
  switch (label) {
    case SnapshotLabel::Initial: return "initial";
    case SnapshotLabel::Previous: return "previous";
    case SnapshotLabel::Current: return "current";
  }
  return "?";
}

void PolicyParams::validate() const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError("policy parameter " + std::to_string(i) + " is not finite");
    }
  }
  std::size_t covered = 0;
  for (const auto& seg : layout) {
    if (seg.offset != covered) throw ConfigError("layout: segment \"" + seg.name + "\" misplaced");
    covered += seg.extent;
  }
  if (covered != values.size()) {
    throw ConfigError("layout: covers " + std::to_string(covered) + " of " +
                      std::to_string(values.size()) + " parameters");
  }
}

bool PolicyParams::operator==(const PolicyParams& other) const {
  if (values != other.values || layout.size() != other.layout.size()) return false;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != other.layout[i].name || layout[i].offset != other.layout[i].offset ||
        layout[i].extent != other.layout[i].extent) {
      return false;
    }
  }
  return true;
}

void Policy::accumulate_grad_batch(std::span<const GradContribution> items,
                                   std::span<double> grad) const {
  for (const auto& item : items) {
    accumulate_grad_log_prob(item.prompt, *item.response, item.coeff, grad);
  }
}

std::vector<double> Policy::grad_log_prob(PromptId prompt, const Response& r) const {
  std::vector<double> grad(num_params(), 0.0);
  accumulate_grad_log_prob(prompt, r, 1.0, grad);
  return grad;
}

std::vector<double> Policy::distribution(PromptId prompt) const {
  std::vector<double> out(space().size());
  prompt_log_probs(prompt, out);
  for (double& x : out) x = std::exp(x);
  return out;
}

double Policy::entropy(PromptId prompt) const {
  std::vector<double> logp(space().size());
  prompt_log_probs(prompt, logp);
  double h = 0.0;
  for (double lp : logp) h -= std::exp(lp) * lp;
  return h;
}

// ---------------------------------------------------------------------------
// tabular family

namespace {

class TabularPolicy final : public Policy {
 public:
  TabularPolicy(std::size_t num_prompts, std::shared_ptr<const ResponseSpace> space,
                std::vector<double> logits)
      : num_prompts_(num_prompts), space_(std::move(space)) {
    const std::size_t n = space_->size();
    if (logits.size() != num_prompts_ * n) {
      throw ConfigError("tabular policy: expected " + std::to_string(num_prompts_ * n) +
                        " logits, got " + std::to_string(logits.size()));
    }
    params_.values = std::move(logits);
    for (std::size_t p = 0; p < num_prompts_; ++p) {
      params_.layout.push_back({"logits[" + std::to_string(p) + "]", p * n, n});
    }
    params_.validate();
  }

  PolicyFamily family() const override { return PolicyFamily::Tabular; }
  const PolicyParams& params() const override { return params_; }
  std::size_t num_prompts() const override { return num_prompts_; }
  const ResponseSpace& space() const override { return *space_; }

  void set_param_values(std::span<const double> values) override {
    if (values.size() != params_.values.size()) {
      throw ConfigError("set_param_values: size mismatch");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw NumericError("policy parameter " + std::to_string(i) + " is not finite");
      }
    }
    std::copy(values.begin(), values.end(), params_.values.begin());
  }

  std::unique_ptr<Policy> clone() const override {
    return std::make_unique<TabularPolicy>(*this);
  }

  double log_prob(PromptId prompt, const Response& r) const override {
    const auto row = prompt_row(prompt);
    const std::size_t idx = space_->index_of(r);
    return row[idx] - row_logsumexp(row);
  }

  void prompt_log_probs(PromptId prompt, std::span<double> out) const override {
    const auto row = prompt_row(prompt);
    const double lse = row_logsumexp(row);
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
  }

  Response sample(PromptId prompt, Rng& rng) const override {
    return space_->at(sample_from_row(prompt_row(prompt), rng));
  }

  // d log pi(y|x) / d logit[x, z] = 1{z = y} - pi(z|x); other prompts' rows 0
  void accumulate_grad_log_prob(PromptId prompt, const Response& r, double coeff,
                                std::span<double> grad) const override {
    const auto row = prompt_row(prompt);
    const std::size_t base = row_base(prompt);
    std::vector<double> probs(row.size());
    row_softmax(row, probs);
    grad[base + space_->index_of(r)] += coeff;
    for (std::size_t i = 0; i < row.size(); ++i) grad[base + i] -= coeff * probs[i];
  }

  // One softmax per prompt for the whole batch.
  void accumulate_grad_batch(std::span<const GradContribution> items,
                             std::span<double> grad) const override {
    std::vector<double> coeff_per_prompt(num_prompts_, 0.0);
    for (const auto& item : items) {
      const std::size_t base = row_base(item.prompt);
      grad[base + space_->index_of(*item.response)] += item.coeff;
      coeff_per_prompt[static_cast<std::size_t>(item.prompt)] += item.coeff;
    }
    std::vector<double> probs(space_->size());
    for (std::size_t p = 0; p < num_prompts_; ++p) {
      if (coeff_per_prompt[p] == 0.0) continue;
      row_softmax(prompt_row(static_cast<PromptId>(p)), probs);
      const std::size_t base = p * space_->size();
      for (std::size_t i = 0; i < probs.size(); ++i) {
        grad[base + i] -= coeff_per_prompt[p] * probs[i];
      }
    }
  }

 private:
  std::size_t row_base(PromptId prompt) const {
    if (prompt < 0 || static_cast<std::size_t>(prompt) >= num_prompts_) {
      throw DomainError("prompt id " + std::to_string(prompt) + " out of range");
    }
    return static_cast<std::size_t>(prompt) * space_->size();
  }
  std::span<const double> prompt_row(PromptId prompt) const {
    return {params_.values.data() + row_base(prompt), space_->size()};
  }

  std::size_t num_prompts_;
  std::shared_ptr<const ResponseSpace> space_;
  PolicyParams params_;
};

}  // namespace

std::unique_ptr<Policy> make_tabular_policy(std::size_t num_prompts,
                                            std::shared_ptr<const ResponseSpace> space,
                                            std::vector<double> logits) {
  return std::make_unique<TabularPolicy>(num_prompts, std::move(space), std::move(logits));
}

std::unique_ptr<Policy> make_tabular_policy(std::size_t num_prompts,
                                            std::shared_ptr<const ResponseSpace> space,
                                            std::uint64_t init_seed) {
  const std::size_t count = num_prompts * space->size();
  return make_tabular_policy(num_prompts, std::move(space), normal_init(count, init_seed));
}

// ---------------------------------------------------------------------------
// autoregressive family
//
// Per prompt: a length head (Lmax logits), an initial-token row (V logits),
// and for each position 1..Lmax-1 a VxV transition table conditioned on the
// previous token. log pi(y|x) = log P(L|x) + log P(t_0|x) +
// sum_i log P(t_i|x, i, t_{i-1}); the length head makes the distribution sum
// to exactly 1 over the mixed-length space.

namespace {

class AutoregressivePolicy final : public Policy {
 public:
  AutoregressivePolicy(std::size_t num_prompts, std::shared_ptr<const ResponseSpace> space,
                       std::vector<double> values)
      : num_prompts_(num_prompts),
        space_(std::move(space)),
        vocab_(static_cast<std::size_t>(space_->vocab_size())),
        lmax_(static_cast<std::size_t>(space_->lmax())) {
    stride_ = lmax_ + vocab_ + (lmax_ - 1) * vocab_ * vocab_;
    if (values.size() != num_prompts_ * stride_) {
      throw ConfigError("autoregressive policy: expected " +
                        std::to_string(num_prompts_ * stride_) + " parameters, got " +
                        std::to_string(values.size()));
    }
    params_.values = std::move(values);
    for (std::size_t p = 0; p < num_prompts_; ++p) {
      const std::string tag = "[" + std::to_string(p) + "]";
      std::size_t off = p * stride_;
      params_.layout.push_back({"len" + tag, off, lmax_});
      off += lmax_;
      params_.layout.push_back({"init" + tag, off, vocab_});
      off += vocab_;
      for (std::size_t pos = 1; pos < lmax_; ++pos) {
        params_.layout.push_back(
            {"trans" + tag + "[" + std::to_string(pos) + "]", off, vocab_ * vocab_});
        off += vocab_ * vocab_;
      }
    }
    params_.validate();
  }

  PolicyFamily family() const override { return PolicyFamily::Autoregressive; }
  const PolicyParams& params() const override { return params_; }
  std::size_t num_prompts() const override { return num_prompts_; }
  const ResponseSpace& space() const override { return *space_; }

  void set_param_values(std::span<const double> values) override {
    if (values.size() != params_.values.size()) {
      throw ConfigError("set_param_values: size mismatch");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw NumericError("policy parameter " + std::to_string(i) + " is not finite");
      }
    }
    std::copy(values.begin(), values.end(), params_.values.begin());
  }

  std::unique_ptr<Policy> clone() const override {
    return std::make_unique<AutoregressivePolicy>(*this);
  }

  double log_prob(PromptId prompt, const Response& r) const override {
    space_->check_valid(r);
    check_prompt(prompt);
    const std::size_t len = static_cast<std::size_t>(r.length());
    double lp = row_log_prob(len_row(prompt), len - 1);
    lp += row_log_prob(init_row(prompt), static_cast<std::size_t>(r.tokens[0]));
    for (std::size_t pos = 1; pos < len; ++pos) {
      const auto row = trans_row(prompt, pos, static_cast<std::size_t>(r.tokens[pos - 1]));
      lp += row_log_prob(row, static_cast<std::size_t>(r.tokens[pos]));
    }
    return lp;
  }

  void prompt_log_probs(PromptId prompt, std::span<double> out) const override {
    check_prompt(prompt);
    // row normalizers computed once, then reused for every response
    const double len_lse = row_logsumexp(len_row(prompt));
    const double init_lse = row_logsumexp(init_row(prompt));
    std::vector<double> trans_lse((lmax_ - 1) * vocab_, 0.0);
    for (std::size_t pos = 1; pos < lmax_; ++pos) {
      for (std::size_t prev = 0; prev < vocab_; ++prev) {
        trans_lse[(pos - 1) * vocab_ + prev] = row_logsumexp(trans_row(prompt, pos, prev));
      }
    }
    const auto& responses = space_->all();
    for (std::size_t i = 0; i < responses.size(); ++i) {
      const auto& tokens = responses[i].tokens;
      const std::size_t len = tokens.size();
      double lp = len_row(prompt)[len - 1] - len_lse;
      lp += init_row(prompt)[static_cast<std::size_t>(tokens[0])] - init_lse;
      for (std::size_t pos = 1; pos < len; ++pos) {
        const auto prev = static_cast<std::size_t>(tokens[pos - 1]);
        lp += trans_row(prompt, pos, prev)[static_cast<std::size_t>(tokens[pos])] -
              trans_lse[(pos - 1) * vocab_ + prev];
      }
      out[i] = lp;
    }
  }

  Response sample(PromptId prompt, Rng& rng) const override {
    check_prompt(prompt);
    const std::size_t len = sample_from_row(len_row(prompt), rng) + 1;
    Response r;
    r.tokens.reserve(len);
    r.tokens.push_back(static_cast<int>(sample_from_row(init_row(prompt), rng)));
    for (std::size_t pos = 1; pos < len; ++pos) {
      const auto prev = static_cast<std::size_t>(r.tokens[pos - 1]);
      r.tokens.push_back(static_cast<int>(sample_from_row(trans_row(prompt, pos, prev), rng)));
    }
    return r;
  }

  void accumulate_grad_log_prob(PromptId prompt, const Response& r, double coeff,
                                std::span<double> grad) const override {
    space_->check_valid(r);
    check_prompt(prompt);
    const std::size_t len = static_cast<std::size_t>(r.length());
    accumulate_row(len_row(prompt), len_offset(prompt), len - 1, coeff, grad);
    accumulate_row(init_row(prompt), init_offset(prompt),
                   static_cast<std::size_t>(r.tokens[0]), coeff, grad);
    for (std::size_t pos = 1; pos < len; ++pos) {
      const auto prev = static_cast<std::size_t>(r.tokens[pos - 1]);
      accumulate_row(trans_row(prompt, pos, prev), trans_offset(prompt, pos, prev),
                     static_cast<std::size_t>(r.tokens[pos]), coeff, grad);
    }
  }

 private:
  static double row_log_prob(std::span<const double> row, std::size_t idx) {
    return row[idx] - row_logsumexp(row);
  }

  static void accumulate_row(std::span<const double> row, std::size_t offset, std::size_t chosen,
                             double coeff, std::span<double> grad) {
    std::vector<double> probs(row.size());
    row_softmax(row, probs);
    grad[offset + chosen] += coeff;
    for (std::size_t i = 0; i < row.size(); ++i) grad[offset + i] -= coeff * probs[i];
  }

  void check_prompt(PromptId prompt) const {
    if (prompt < 0 || static_cast<std::size_t>(prompt) >= num_prompts_) {
      throw DomainError("prompt id " + std::to_string(prompt) + " out of range");
    }
  }

  std::size_t len_offset(PromptId p) const { return static_cast<std::size_t>(p) * stride_; }
  std::size_t init_offset(PromptId p) const { return len_offset(p) + lmax_; }
  std::size_t trans_offset(PromptId p, std::size_t pos, std::size_t prev) const {
    return init_offset(p) + vocab_ + ((pos - 1) * vocab_ + prev) * vocab_;
  }

  std::span<const double> len_row(PromptId p) const {
    return {params_.values.data() + len_offset(p), lmax_};
  }
  std::span<const double> init_row(PromptId p) const {
    return {params_.values.data() + init_offset(p), vocab_};
  }
  std::span<const double> trans_row(PromptId p, std::size_t pos, std::size_t prev) const {
    return {params_.values.data() + trans_offset(p, pos, prev), vocab_};
  }

  std::size_t num_prompts_;
  std::shared_ptr<const ResponseSpace> space_;
  std::size_t vocab_;
  std::size_t lmax_;
  std::size_t stride_;
  PolicyParams params_;
};

}  // namespace

std::unique_ptr<Policy> make_autoregressive_policy(std::size_t num_prompts,
                                                   std::shared_ptr<const ResponseSpace> space,
                                                   std::vector<double> values) {
  return std::make_unique<AutoregressivePolicy>(num_prompts, std::move(space), std::move(values));
}

std::unique_ptr<Policy> make_autoregressive_policy(std::size_t num_prompts,
                                                   std::shared_ptr<const ResponseSpace> space,
                                                   std::uint64_t init_seed) {
  const std::size_t v = static_cast<std::size_t>(space->vocab_size());
  const std::size_t l = static_cast<std::size_t>(space->lmax());
  const std::size_t stride = l + v + (l - 1) * v * v;
  return make_autoregressive_policy(num_prompts, std::move(space),
                                    normal_init(num_prompts * stride, init_seed));
}

std::unique_ptr<Policy> make_policy(PolicyFamily family, std::size_t num_prompts,
                                    std::shared_ptr<const ResponseSpace> space,
                                    std::uint64_t init_seed) {
  if (family == PolicyFamily::Tabular) {
    return make_tabular_policy(num_prompts, std::move(space), init_seed);
  }
  return make_autoregressive_policy(num_prompts, std::move(space), init_seed);
}

// ---------------------------------------------------------------------------
// snapshots

PolicySnapshot::PolicySnapshot(const Policy& live, SnapshotLabel label)
    : frozen_(live.clone()), label_(label) {}

double PolicySnapshot::log_prob(PromptId prompt, const Response& r) const {
  ++log_prob_calls_;
  return frozen_->log_prob(prompt, r);
}

Response PolicySnapshot::sample(PromptId prompt, Rng& rng) const {
  return frozen_->sample(prompt, rng);
}

// ---------------------------------------------------------------------------
// checkpoints

void save_policy(const Policy& policy, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write file: " + path);
  const auto& space = policy.space();
  out << "{\n";
  out << "  \"family\": \"" << to_string(policy.family()) << "\",\n";
  out << "  \"layout\": {\"num_prompts\": " << policy.num_prompts()
      << ", \"vocab_size\": " << space.vocab_size() << ", \"lmax\": " << space.lmax() << "},\n";
  out << "  \"values\": " << format_double_array(policy.params().values) << "\n";
  out << "}\n";
  if (!out) throw ConfigError("write failed: " + path);
}

std::unique_ptr<Policy> load_policy(const std::string& path,
                                    std::shared_ptr<const ResponseSpace> space,
                                    std::size_t num_prompts) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "family" && key != "layout" && key != "values") {
      throw ConfigError(path + ": unknown field \"" + key + "\"");
    }
  }
  const auto family = j.at("family").get<std::string>();
  const auto& layout = j.at("layout");
  if (layout.at("num_prompts").get<std::size_t>() != num_prompts ||
      layout.at("vocab_size").get<int>() != space->vocab_size() ||
      layout.at("lmax").get<int>() != space->lmax()) {
    throw ConfigError(path + ": layout does not match the task");
  }
  auto values = j.at("values").get<std::vector<double>>();
  if (family == "tabular") {
    return make_tabular_policy(num_prompts, std::move(space), std::move(values));
  }
  if (family == "autoregressive") {
    return make_autoregressive_policy(num_prompts, std::move(space), std::move(values));
  }
  throw ConfigError(path + ": unknown family \"" + family + "\"");
}

}  // namespace spinlab
