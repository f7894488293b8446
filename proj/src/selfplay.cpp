#include "spinlab/selfplay.hpp"

#include <cmath>
#include <stdexcept>

#include "spinlab/oracle.hpp"

namespace spinlab {

std::vector<double> SelfPlayConfig::default_beta_schedule(int iterations) {
  std::vector<double> schedule(static_cast<std::size_t>(std::max(iterations, 0)), 0.1);
  if (!schedule.empty()) schedule[0] = 0.0;
  return schedule;
}

std::vector<double> SelfPlayConfig::effective_beta_schedule() const {
  if (beta_schedule.empty()) return default_beta_schedule(iterations);
  return beta_schedule;
}

std::vector<std::uint64_t> SelfPlayConfig::iteration_seeds() const {
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(std::max(iterations, 0)));
  for (std::size_t t = 0; t < seeds.size(); ++t) {
    seeds[t] = derive_seed(seed, "selfplay.iteration", t);
  }
  return seeds;
}

void SelfPlayConfig::validate() const {
  if (iterations < 0) throw ConfigError("iterations: must be >= 0");
  if (inner_steps < 1) throw ConfigError("inner_steps: must be >= 1");
  if (!beta_schedule.empty() &&
      beta_schedule.size() != static_cast<std::size_t>(iterations)) {
    throw ConfigError("beta_schedule: expected length " + std::to_string(iterations) + ", got " +
                      std::to_string(beta_schedule.size()));
  }
  for (double b : beta_schedule) {
    if (!(b >= 0.0)) throw ConfigError("beta_schedule: entries must be >= 0");
  }
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("warmup_fraction: must lie in (0, 1)");
  }
  objective.validate();
  optimizer.validate();
}

std::uint64_t bank_checksum(std::span<const Response> bank) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& r : bank) {
    h ^= static_cast<std::uint64_t>(r.tokens.size());
    h *= 0x100000001B3ull;
    for (int tok : r.tokens) {
      h ^= static_cast<std::uint64_t>(tok) + 1;
      h *= 0x100000001B3ull;
    }
  }
  return h;
}

namespace {

std::vector<Response> sample_bank(const PolicySnapshot& snapshot,
                                  const AnnotatedSet& annotated, std::uint64_t bank_seed,
                                  const char* purpose) {
  std::vector<Response> bank;
  bank.reserve(annotated.records.size());
  for (std::size_t i = 0; i < annotated.records.size(); ++i) {
    Rng rng(derive_seed(bank_seed, purpose, i));
    bank.push_back(snapshot.sample(annotated.records[i].prompt, rng));
  }
  return bank;
}

std::vector<Response> sample_bank_filtered(
    const PolicySnapshot& snapshot, const AnnotatedSet& annotated, std::uint64_t bank_seed,
    const char* purpose, const std::function<bool(std::size_t)>* filter,
    const std::vector<Response>& previous_bank) {
  std::vector<Response> bank;
  bank.reserve(annotated.records.size());
  for (std::size_t i = 0; i < annotated.records.size(); ++i) {
    if (filter != nullptr && *filter && !(*filter)(i)) {
      bank.push_back(previous_bank[i]);
      continue;
    }
    Rng rng(derive_seed(bank_seed, purpose, i));
    bank.push_back(snapshot.sample(annotated.records[i].prompt, rng));
  }
  return bank;
}

void check_annotated(const ToyTask& task, const AnnotatedSet& annotated) {
  if (annotated.records.empty()) throw ConfigError("annotated set: must be nonempty");
  for (const auto& record : annotated.records) {
    if (record.prompt < 0 || static_cast<std::size_t>(record.prompt) >= task.num_prompts()) {
      throw ConfigError("annotated set: prompt id " + std::to_string(record.prompt) +
                        " not in task");
    }
    task.space->check_valid(record.response);
  }
}

}  // namespace

IterationState init_run(const ToyTask& task, const AnnotatedSet& annotated,
                        const SelfPlayConfig& config) {
  config.validate();
  task.validate();
  check_annotated(task, annotated);

  IterationState state;
  state.t = 0;
  state.policy = make_policy(config.family, task.num_prompts(), task.space,
                             derive_seed(config.seed, "selfplay.policy_init"));
  state.initial = std::make_shared<PolicySnapshot>(*state.policy, SnapshotLabel::Initial);
  state.y_zero_bank = sample_bank(*state.initial, annotated,
                                  derive_seed(config.seed, "selfplay.y_zero"), "record");
  state.y_zero_checksum = bank_checksum(state.y_zero_bank);
  state.iteration_kl.push_back(kl_to_data(*state.policy, task).weighted_mean);
  state.iteration_misalignment.push_back(0.0);
  return state;
}

void run_iteration(IterationState& state, const ToyTask& task, const AnnotatedSet& annotated,
                   const SelfPlayConfig& config) {
  config.validate();
  if (state.t >= config.iterations) {
    throw UsageError("run_iteration: t = " + std::to_string(state.t) +
                     " is past the configured iteration count");
  }
  const auto beta_schedule = config.effective_beta_schedule();
  const auto seeds = config.iteration_seeds();
  const auto t_index = static_cast<std::size_t>(state.t);

  // (a) freeze the current policy as pi_theta_t
  state.previous = std::make_shared<PolicySnapshot>(*state.policy, SnapshotLabel::Previous);

  // (b) regenerate the synthetic bank from it; the filter hook may keep
  // selected records from the previous iteration (no previous bank exists at
  // t = 0, so everything is generated then)
  std::vector<Response> fresh = sample_bank_filtered(
      *state.previous, annotated, seeds[t_index], "y_prime",
      state.y_prime_bank.empty() ? nullptr : &config.regenerate_filter, state.y_prime_bank);
  state.y_prime_bank = std::move(fresh);

  if (bank_checksum(state.y_zero_bank) != state.y_zero_checksum) {
    throw std::logic_error("y_zero bank changed after init_run");
  }

  // (c) build the batch; only objectives that read a reference cache it
  const bool needs_ref = config.objective.objective == Objective::Spin ||
                         config.objective.objective == Objective::TspinRef;
  const TripletBatch batch =
      TripletBatch::build(task, annotated, state.y_prime_bank, state.y_zero_bank,
                          needs_ref ? state.previous.get() : nullptr);

  LossSpec spec = config.objective;
  spec.beta = beta_schedule[t_index];

  const std::uint64_t snapshot_reads_before = state.previous->log_prob_calls();

  // (d) inner optimization
  Optimizer optimizer(config.optimizer, state.policy->num_params());
  std::vector<double> values(state.policy->params().values.begin(),
                             state.policy->params().values.end());
  MisalignmentStat last_misalignment;
  const auto total = static_cast<std::size_t>(config.inner_steps);
  for (std::size_t s = 0; s < total; ++s) {
    const LossResult result = evaluate_loss(*state.policy, spec, batch, annotated.records);
    if (!std::isfinite(result.value)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(state.t) + ", step " +
                         std::to_string(s));
    }
    double kl_mean = 0.0;
    try {
      kl_mean = kl_to_data(*state.policy, task).weighted_mean;
    } catch (const DomainError& e) {
      // a policy driven to zero mass on supported responses is a diverged run
      throw NumericError("numerical collapse at iteration " + std::to_string(state.t) +
                         ", step " + std::to_string(s) + ": " + e.what());
    }
    if (spec.objective == Objective::Sft) {
      state.trace.steps.push_back(make_step_record_sft(state.t, static_cast<int>(s),
                                                       *state.policy, task, annotated.records,
                                                       result.value, result.gradient));
      last_misalignment = MisalignmentStat{};
      state.trace.step_misalignment.push_back(last_misalignment);
    } else {
      const BatchRewards rewards = batch_rewards(*state.policy, batch, spec);
      state.trace.steps.push_back(make_step_record(state.t, static_cast<int>(s), rewards,
                                                   result.value, result.gradient, kl_mean));
      last_misalignment = misalignment(rewards);
      state.trace.step_misalignment.push_back(last_misalignment);
      if (config.dump_items && s + 1 == total) {
        GapTrace gaps;
        gaps.values.resize(rewards.logp_y.size());
        for (std::size_t i = 0; i < gaps.values.size(); ++i) {
          gaps.values[i] = rewards.logp_y[i] - rewards.logp_yp[i];
        }
        state.trace.item_gaps.push_back(std::move(gaps));
      }
    }
    optimizer.step(values, result.gradient,
                   warmup_multiplier(s, total, config.warmup_fraction));
    state.policy->set_param_values(values);
  }

  // the triplet loss never reads a snapshot's log-probabilities; every
  // reference the other objectives use was cached at batch construction
  if (state.previous->log_prob_calls() != snapshot_reads_before) {
    throw std::logic_error("snapshot log_prob was read during loss evaluation");
  }
  if (spec.objective == Objective::Tspin && state.previous->log_prob_calls() != 0) {
    throw std::logic_error("tspin read a reference policy");
  }

  // (e) iteration metrics
  state.iteration_kl.push_back(kl_to_data(*state.policy, task).weighted_mean);
  state.iteration_misalignment.push_back(last_misalignment.fraction);

  // (f)
  ++state.t;
}

IterationState run(const ToyTask& task, const AnnotatedSet& annotated,
                   const SelfPlayConfig& config) {
  IterationState state = init_run(task, annotated, config);
  for (int t = 0; t < config.iterations; ++t) {
    run_iteration(state, task, annotated, config);
  }
  return state;
}

}  // namespace spinlab
