#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/rng.hpp"

namespace spinlab {

enum class PolicyFamily { Tabular, Autoregressive };
enum class SnapshotLabel { Initial, Previous, Current };

std::string to_string(PolicyFamily family);
std::string to_string(SnapshotLabel label);

struct LayoutSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t extent = 0;
};

// Flat parameter vector plus a descriptor mapping positions to semantic
// slots. Entries must be finite.
struct PolicyParams {
  std::vector<double> values;
  std::vector<LayoutSegment> layout;

  void validate() const;  // finite values, layout covers the vector exactly
  bool operator==(const PolicyParams&) const;
};

// Contribution to a batched gradient accumulation: coeff * grad log pi(y|x).
struct GradContribution {
  PromptId prompt = 0;
  const Response* response = nullptr;
  double coeff = 0.0;
};

// Parameterized conditional distribution pi(y|x) over a response space.
// log_prob / prompt_log_probs / entropy / gradients are pure reads and safe
// to call concurrently; set_param_values requires exclusive access.
class Policy {
 public:
  virtual ~Policy() = default;

  virtual PolicyFamily family() const = 0;
  virtual const PolicyParams& params() const = 0;
  virtual void set_param_values(std::span<const double> values) = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  std::size_t num_params() const { return params().values.size(); }
  virtual std::size_t num_prompts() const = 0;
  virtual const ResponseSpace& space() const = 0;

  virtual double log_prob(PromptId prompt, const Response& r) const = 0;
  // log pi(.|x) over the full response space, enumeration order
  virtual void prompt_log_probs(PromptId prompt, std::span<double> out) const = 0;
  virtual Response sample(PromptId prompt, Rng& rng) const = 0;

  // grad += coeff * d log pi(r|x) / d theta
  virtual void accumulate_grad_log_prob(PromptId prompt, const Response& r, double coeff,
                                        std::span<double> grad) const = 0;
  // batched form; families may exploit shared structure
  virtual void accumulate_grad_batch(std::span<const GradContribution> items,
                                     std::span<double> grad) const;

  std::vector<double> grad_log_prob(PromptId prompt, const Response& r) const;
  std::vector<double> distribution(PromptId prompt) const;  // exp of prompt_log_probs
  double entropy(PromptId prompt) const;                    // -sum p log p, by enumeration
};

// Tabular family: one logit per (prompt, response-index) cell. Fully
// expressive; the exact-oracle workhorse.
std::unique_ptr<Policy> make_tabular_policy(std::size_t num_prompts,
                                            std::shared_ptr<const ResponseSpace> space,
                                            std::uint64_t init_seed);
std::unique_ptr<Policy> make_tabular_policy(std::size_t num_prompts,
                                            std::shared_ptr<const ResponseSpace> space,
                                            std::vector<double> logits);

// Autoregressive family: a length head plus per-position token logits
// conditioned on (prompt, position, previous token), context window 1.
// Parameters are shared across responses, so the family is not tabular and
// not fully expressive. The length head guarantees exact normalization over
// the mixed-length response space.
std::unique_ptr<Policy> make_autoregressive_policy(std::size_t num_prompts,
                                                   std::shared_ptr<const ResponseSpace> space,
                                                   std::uint64_t init_seed);
std::unique_ptr<Policy> make_autoregressive_policy(std::size_t num_prompts,
                                                   std::shared_ptr<const ResponseSpace> space,
                                                   std::vector<double> values);

std::unique_ptr<Policy> make_policy(PolicyFamily family, std::size_t num_prompts,
                                    std::shared_ptr<const ResponseSpace> space,
                                    std::uint64_t init_seed);

// Deep frozen copy of a policy at a moment in time. Immutable; later updates
// to the live policy do not affect it. log_prob calls are counted so the
// reference-free property of the triplet loss can be asserted.
class PolicySnapshot {
 public:
  PolicySnapshot(const Policy& live, SnapshotLabel label);

  SnapshotLabel label() const { return label_; }
  PolicyFamily family() const { return frozen_->family(); }
  const PolicyParams& params() const { return frozen_->params(); }
  const ResponseSpace& space() const { return frozen_->space(); }

  double log_prob(PromptId prompt, const Response& r) const;
  Response sample(PromptId prompt, Rng& rng) const;
  double entropy(PromptId prompt) const { return frozen_->entropy(prompt); }

  std::uint64_t log_prob_calls() const { return log_prob_calls_; }

 private:
  std::unique_ptr<const Policy> frozen_;
  SnapshotLabel label_;
  mutable std::uint64_t log_prob_calls_ = 0;
};

// Checkpoint persistence: JSON {family, layout, values[]}, values written
// with 17-significant-digit precision (bit-exact round trip).
void save_policy(const Policy& policy, const std::string& path);
std::unique_ptr<Policy> load_policy(const std::string& path,
                                    std::shared_ptr<const ResponseSpace> space,
                                    std::size_t num_prompts);

}  // namespace spinlab
