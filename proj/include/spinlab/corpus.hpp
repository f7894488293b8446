#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "spinlab/errors.hpp"

namespace spinlab {

using PromptId = int;

struct Vocabulary {
  int size = 0;
  std::vector<int> tokens;  // 0..size-1, contiguous

  static Vocabulary of_size(int size);
  void validate() const;
};

// A response is a token sequence of length 1..lmax. All lengths are valid;
// there is no end-of-sequence token.
struct Response {
  std::vector<int> tokens;

  int length() const { return static_cast<int>(tokens.size()); }
  bool operator==(const Response&) const = default;
};

// Exhaustive enumeration of every valid response for a (vocab_size, lmax)
// pair. Order is deterministic: length-major, then lexicographic by token,
// leftmost token most significant.
class ResponseSpace {
 public:
  ResponseSpace(int vocab_size, int lmax);

  std::size_t size() const { return responses_.size(); }
  const Response& at(std::size_t index) const;
  std::size_t index_of(const Response& r) const;  // throws DomainError on invalid r
  const std::vector<Response>& all() const { return responses_; }
  int vocab_size() const { return vocab_size_; }
  int lmax() const { return lmax_; }

  // validates tokens/length without computing an index
  void check_valid(const Response& r) const;

 private:
  int vocab_size_;
  int lmax_;
  std::vector<Response> responses_;
  std::vector<std::size_t> length_offset_;  // offset of the first response of each length
};

// Immutable after construction; safe to read from any number of threads.
// Sampling takes an explicit generator, so concurrent samplers need
// independent Rng instances.
struct ToyTask {
  Vocabulary vocabulary;
  int lmax = 1;
  std::vector<PromptId> prompts;                // 0..P-1
  std::vector<double> prompt_weights;           // q(.), sums to 1
  std::vector<std::vector<double>> data_dist;   // one row per prompt over the response space
  std::shared_ptr<const ResponseSpace> space;

  std::size_t num_prompts() const { return prompts.size(); }
  void validate() const;  // throws ConfigError naming the offending field
};

enum class DataRecipe { Uniform, Peaked, Explicit };

// Recipe for the annotated-data distribution. "Peaked" draws one logit per
// response from Uniform(-1, 1) under the stated seed and applies
// softmax(logits / temperature); bounded logits keep every task
// well-conditioned for the exact-enumeration oracles.
struct TaskSpec {
  int vocab_size = 4;
  int lmax = 3;
  int num_prompts = 4;
  DataRecipe recipe = DataRecipe::Peaked;
  double temperature = 0.5;
  std::uint64_t seed = 7;
  std::vector<std::vector<double>> explicit_dist;  // DataRecipe::Explicit only
  std::vector<double> prompt_weights;              // empty = uniform
};

// The default desk-scale task: V=4, Lmax=3, 4 prompts, peaked recipe at
// temperature 0.5 (84-response space).
TaskSpec default_task_spec();

ToyTask build_task(const TaskSpec& spec);

struct AnnotatedRecord {
  PromptId prompt = 0;
  Response response;

  bool operator==(const AnnotatedRecord&) const = default;
};

// i.i.d. draws x ~ q(.), y ~ data_dist(.|x). Sampling is with replacement;
// duplicates per prompt are expected and kept.
struct AnnotatedSet {
  std::vector<AnnotatedRecord> records;
  std::uint64_t seed = 0;
};

AnnotatedSet sample_annotated(const ToyTask& task, std::size_t n, std::uint64_t seed);

// JSON persistence. Probabilities are written with 17-significant-digit
// precision; a save/load round trip reproduces every field bit-exactly.
void save_task(const ToyTask& task, const std::string& path);
ToyTask load_task(const std::string& path);

void save_annotated(const AnnotatedSet& set, const std::string& path);
AnnotatedSet load_annotated(const std::string& path, const ToyTask& task);

}  // namespace spinlab
