#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/metrics.hpp"
#include "spinlab/objectives.hpp"
#include "spinlab/optimizer.hpp"
#include "spinlab/policy.hpp"

namespace spinlab {

// Configuration of the iterative self-play loop.
struct SelfPlayConfig {
  int iterations = 5;     // T
  int inner_steps = 500;  // optimizer steps per iteration
  LossSpec objective;
  std::vector<double> beta_schedule;  // length T; empty = default schedule
  std::uint64_t seed = 1;             // root of all generation seeds
  OptimizerSettings optimizer;
  double warmup_fraction = 0.1;
  PolicyFamily family = PolicyFamily::Tabular;
  bool dump_items = false;  // per-item gap dumps in the trace

  // The baseline regenerates every record's synthetic response each
  // iteration. This hook can skip records: returning false keeps the
  // record's synthetic response from the previous iteration. Per-record
  // seeds are derived independently, so skipping one record never shifts
  // another's draw.
  std::function<bool(std::size_t record_index)> regenerate_filter;

  // beta = 0 at iteration 0 (historical and current advantages coincide
  // there), 0.1 afterwards.
  static std::vector<double> default_beta_schedule(int iterations);

  std::vector<double> effective_beta_schedule() const;
  std::vector<std::uint64_t> iteration_seeds() const;
  void validate() const;  // throws ConfigError naming the field
};

struct IterationState {
  int t = 0;
  std::unique_ptr<Policy> policy;
  std::shared_ptr<const PolicySnapshot> initial;   // pi_theta_0
  std::shared_ptr<const PolicySnapshot> previous;  // pi_theta_t
  std::vector<Response> y_zero_bank;   // one per annotated record, fixed for the run
  std::vector<Response> y_prime_bank;  // regenerated from `previous` each iteration
  std::uint64_t y_zero_checksum = 0;
  MetricsTrace trace;
  std::vector<double> iteration_kl;            // index 0 = before any training
  std::vector<double> iteration_misalignment;  // index 0 = 0
};

std::uint64_t bank_checksum(std::span<const Response> bank);

// Builds the initial policy, snapshots it, and draws the proto-synthetic bank
// once from it. Deterministic under config.seed.
IterationState init_run(const ToyTask& task, const AnnotatedSet& annotated,
                        const SelfPlayConfig& config);

// One iteration: snapshot the current policy as `previous`, regenerate the
// synthetic bank from it, build the triplet batch (caching reference
// log-probs only when the objective reads them), run inner_steps optimizer
// steps, record metrics, advance t. Throws NumericError naming (t, step) on a
// non-finite loss.
void run_iteration(IterationState& state, const ToyTask& task, const AnnotatedSet& annotated,
                   const SelfPlayConfig& config);

// init_run + T iterations.
IterationState run(const ToyTask& task, const AnnotatedSet& annotated,
                   const SelfPlayConfig& config);

}  // namespace spinlab
