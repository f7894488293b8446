#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/objectives.hpp"
#include "spinlab/policy.hpp"

namespace spinlab::testing {

inline ToyTask make_uniform_task(int vocab_size, int lmax, int num_prompts) {
  TaskSpec spec;
  spec.vocab_size = vocab_size;
  spec.lmax = lmax;
  spec.num_prompts = num_prompts;
  spec.recipe = DataRecipe::Uniform;
  return build_task(spec);
}

inline ToyTask make_peaked_task(int vocab_size, int lmax, int num_prompts,
                                std::uint64_t seed = 7, double temperature = 0.5) {
  TaskSpec spec;
  spec.vocab_size = vocab_size;
  spec.lmax = lmax;
  spec.num_prompts = num_prompts;
  spec.recipe = DataRecipe::Peaked;
  spec.seed = seed;
  spec.temperature = temperature;
  return build_task(spec);
}

// Random triplet batch over a task; reference log-probs cached when a
// reference snapshot is given.
inline TripletBatch random_batch(const ToyTask& task, std::size_t size, std::uint64_t seed,
                                 const PolicySnapshot* reference = nullptr) {
  Rng rng(derive_seed(seed, "tests.random_batch"));
  AnnotatedSet annotated;
  std::vector<Response> y_prime, y_zero;
  for (std::size_t i = 0; i < size; ++i) {
    const auto prompt = static_cast<PromptId>(rng.next_u64() % task.num_prompts());
    annotated.records.push_back({prompt, task.space->at(rng.next_u64() % task.space->size())});
    y_prime.push_back(task.space->at(rng.next_u64() % task.space->size()));
    y_zero.push_back(task.space->at(rng.next_u64() % task.space->size()));
  }
  return TripletBatch::build(task, annotated, y_prime, y_zero, reference);
}

inline std::unique_ptr<Policy> random_policy(PolicyFamily family, const ToyTask& task,
                                             std::uint64_t seed, double scale = 0.4) {
  auto policy = make_policy(family, task.num_prompts(), task.space, seed);
  Rng rng(derive_seed(seed, "tests.random_policy"));
  std::vector<double> values = policy->params().values;
  for (double& v : values) v = scale * rng.next_normal();
  policy->set_param_values(values);
  return policy;
}

inline double l2(std::span<const double> xs) {
  double sum = 0.0;
  for (double x : xs) sum += x * x;
  return std::sqrt(sum);
}

}  // namespace spinlab::testing
