#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "helpers.hpp"
#include "spinlab/policy.hpp"

using namespace spinlab;
using spinlab::testing::make_peaked_task;
using spinlab::testing::make_uniform_task;
using spinlab::testing::random_policy;

namespace {

double total_prob(const Policy& policy, PromptId prompt) {
  std::vector<double> logp(policy.space().size());
  policy.prompt_log_probs(prompt, logp);
  double sum = 0.0;
  for (double lp : logp) sum += std::exp(lp);
  return sum;
}

}  // namespace

TEST_CASE("tabular: uniform logits give the uniform distribution") {
  const ToyTask task = make_uniform_task(4, 3, 2);
  const std::size_t n = task.space->size();
  auto policy = make_tabular_policy(2, task.space, std::vector<double>(2 * n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(policy->log_prob(0, task.space->at(i)) == doctest::Approx(-std::log(84.0)).epsilon(1e-14));
  }
  CHECK(policy->entropy(0) == doctest::Approx(std::log(84.0)).epsilon(1e-14));
}

TEST_CASE("tabular: logits [1, 0] over two responses") {
  auto space = std::make_shared<ResponseSpace>(2, 1);
  auto policy = make_tabular_policy(1, space, std::vector<double>{1.0, 0.0});
  // log sigma(1) and the binary entropy at sigma(1)
  CHECK(policy->log_prob(0, space->at(0)) ==
        doctest::Approx(-0.31326168751822284).epsilon(1e-14));
  CHECK(policy->entropy(0) == doctest::Approx(0.58220310888821795).epsilon(1e-13));
}

TEST_CASE("normalization: exp(log_prob) sums to 1 within 1e-10 for both families") {
  const ToyTask task = make_peaked_task(4, 3, 3);
  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
      auto policy = random_policy(family, task, seed);
      for (std::size_t p = 0; p < task.num_prompts(); ++p) {
        CHECK(std::abs(total_prob(*policy, static_cast<PromptId>(p)) - 1.0) <= 1e-10);
      }
    }
  }
}

TEST_CASE("log_prob agrees with prompt_log_probs entry by entry") {
  const ToyTask task = make_peaked_task(3, 2, 2);
  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    auto policy = random_policy(family, task, 5);
    std::vector<double> rows(task.space->size());
    policy->prompt_log_probs(1, rows);
    for (std::size_t i = 0; i < task.space->size(); ++i) {
      CHECK(policy->log_prob(1, task.space->at(i)) == rows[i]);  // same code path, same bits
    }
  }
}

TEST_CASE("log_prob rejects invalid responses") {
  const ToyTask task = make_uniform_task(2, 2, 1);
  auto policy = make_tabular_policy(1, task.space, 1);
  CHECK_THROWS_AS(policy->log_prob(0, Response{{5}}), DomainError);
  CHECK_THROWS_AS(policy->log_prob(0, Response{{0, 0, 0}}), DomainError);
  CHECK_THROWS_AS(policy->log_prob(3, Response{{0}}), DomainError);
}

TEST_CASE("sampling: deterministic under the seed, point mass honored") {
  const ToyTask task = make_uniform_task(3, 2, 1);
  const std::size_t n = task.space->size();

  std::vector<double> logits(n, 0.0);
  logits[4] = 200.0;  // effectively a point mass
  auto point = make_tabular_policy(1, task.space, logits);
  Rng rng(derive_seed(5, "sample"));
  for (int i = 0; i < 50; ++i) CHECK(point->sample(0, rng) == task.space->at(4));

  auto policy = random_policy(PolicyFamily::Autoregressive, task, 8);
  Rng r1(derive_seed(9, "sample"));
  Rng r2(derive_seed(9, "sample"));
  for (int i = 0; i < 100; ++i) CHECK(policy->sample(0, r1) == policy->sample(0, r2));
}

TEST_CASE("sampling: empirical frequencies match exp(log_prob) within 3 sigma") {
  const ToyTask task = make_uniform_task(3, 2, 1);
  const std::size_t n = task.space->size();
  const std::size_t draws = 100000;
  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    auto policy = random_policy(family, task, 21, 0.3);
    const std::vector<double> probs = policy->distribution(0);
    std::vector<int> counts(n, 0);
    Rng rng(derive_seed(77, "sample_freq"));
    for (std::size_t i = 0; i < draws; ++i) {
      ++counts[task.space->index_of(policy->sample(0, rng))];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double sigma = std::sqrt(draws * probs[i] * (1.0 - probs[i]));
      CHECK(std::abs(counts[i] - draws * probs[i]) <= 3.0 * sigma + 1e-9);
    }
  }
}

TEST_CASE("sampling/likelihood consistency: mean log-likelihood approaches -entropy") {
  const ToyTask task = make_uniform_task(4, 2, 1);
  auto policy = random_policy(PolicyFamily::Tabular, task, 31, 0.5);
  const double entropy = policy->entropy(0);

  // exact variance of log pi under pi, for the 3-sigma band
  std::vector<double> logp(task.space->size());
  policy->prompt_log_probs(0, logp);
  double var = 0.0;
  for (double lp : logp) var += std::exp(lp) * (lp + entropy) * (lp + entropy);

  const std::size_t draws = 100000;
  Rng rng(derive_seed(13, "consistency"));
  double sum = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    sum += policy->log_prob(0, policy->sample(0, rng));
  }
  const double sigma_mean = std::sqrt(var / static_cast<double>(draws));
  CHECK(std::abs(sum / draws - (-entropy)) <= 3.0 * sigma_mean);
}

TEST_CASE("entropy: bounds and extremes") {
  const ToyTask task = make_uniform_task(3, 2, 1);
  const std::size_t n = task.space->size();

  std::vector<double> logits(n, 0.0);
  logits[0] = 300.0;
  auto point = make_tabular_policy(1, task.space, logits);
  CHECK(point->entropy(0) == doctest::Approx(0.0).epsilon(1e-12));

  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    for (std::uint64_t seed : {4ull, 5ull}) {
      auto policy = random_policy(family, task, seed);
      const double h = policy->entropy(0);
      CHECK(h >= 0.0);
      CHECK(h <= std::log(static_cast<double>(n)) + 1e-12);
    }
  }
}

TEST_CASE("tabular gradient: softmax identity") {
  const ToyTask task = make_uniform_task(4, 3, 2);
  const std::size_t n = task.space->size();
  auto policy = make_tabular_policy(2, task.space, std::vector<double>(2 * n, 0.0));
  const auto grad = policy->grad_log_prob(1, task.space->at(7));
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(grad[i] == 0.0);  // prompt 0 row untouched
    const double expected = (i == 7 ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
    CHECK(grad[n + i] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("gradients match finite differences of log_prob") {
  const ToyTask task = make_peaked_task(3, 2, 2);
  const double h = 1e-5;
  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    auto policy = random_policy(family, task, 17);
    Rng rng(derive_seed(18, "fd_pairs"));
    for (int pair = 0; pair < 50; ++pair) {
      const auto prompt = static_cast<PromptId>(rng.next_u64() % task.num_prompts());
      const Response& r = task.space->at(rng.next_u64() % task.space->size());
      const auto grad = policy->grad_log_prob(prompt, r);
      std::vector<double> values = policy->params().values;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + h;
        policy->set_param_values(values);
        const double up = policy->log_prob(prompt, r);
        values[i] = saved - h;
        policy->set_param_values(values);
        const double down = policy->log_prob(prompt, r);
        values[i] = saved;
        policy->set_param_values(values);
        const double fd = (up - down) / (2.0 * h);
        const double scale = std::max({std::abs(grad[i]), std::abs(fd), 1e-4});
        CHECK(std::abs(grad[i] - fd) / scale <= 1e-6);
      }
    }
  }
}

TEST_CASE("zero expected score: sum_y pi(y) grad log pi(y) vanishes") {
  const ToyTask task = make_peaked_task(3, 2, 2);
  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    auto policy = random_policy(family, task, 23);
    for (std::size_t p = 0; p < task.num_prompts(); ++p) {
      const auto probs = policy->distribution(static_cast<PromptId>(p));
      std::vector<double> acc(policy->num_params(), 0.0);
      for (std::size_t i = 0; i < probs.size(); ++i) {
        policy->accumulate_grad_log_prob(static_cast<PromptId>(p), task.space->at(i), probs[i],
                                         acc);
      }
      for (double g : acc) CHECK(std::abs(g) <= 1e-8);
    }
  }
}

TEST_CASE("batched gradient accumulation equals the per-item loop") {
  const ToyTask task = make_peaked_task(4, 3, 3);
  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    auto policy = random_policy(family, task, 29);
    Rng rng(derive_seed(30, "batch"));
    std::vector<GradContribution> items;
    std::vector<const Response*> keep;
    for (int i = 0; i < 64; ++i) {
      items.push_back({static_cast<PromptId>(rng.next_u64() % task.num_prompts()),
                       &task.space->at(rng.next_u64() % task.space->size()),
                       rng.next_normal()});
    }
    std::vector<double> batched(policy->num_params(), 0.0);
    policy->accumulate_grad_batch(items, batched);
    std::vector<double> looped(policy->num_params(), 0.0);
    for (const auto& item : items) {
      policy->accumulate_grad_log_prob(item.prompt, *item.response, item.coeff, looped);
    }
    for (std::size_t i = 0; i < batched.size(); ++i) {
      CHECK(batched[i] == doctest::Approx(looped[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("snapshots: immutable deep copies with an access counter") {
  const ToyTask task = make_uniform_task(3, 2, 1);
  auto policy = random_policy(PolicyFamily::Tabular, task, 41);
  const Response& r = task.space->at(2);

  const PolicySnapshot snap(*policy, SnapshotLabel::Initial);
  CHECK(snap.label() == SnapshotLabel::Initial);
  CHECK(snap.params() == policy->params());

  const double before = snap.log_prob(0, r);
  std::vector<double> values = policy->params().values;
  for (double& v : values) v += 1.5;
  policy->set_param_values(values);
  CHECK(snap.log_prob(0, r) == before);
  CHECK_FALSE(snap.params() == policy->params());

  const PolicySnapshot again(*policy, SnapshotLabel::Previous);
  const PolicySnapshot same(*policy, SnapshotLabel::Previous);
  CHECK(again.params() == same.params());
  CHECK(again.label() == same.label());

  CHECK(snap.log_prob_calls() == 2);  // counted reads
}

TEST_CASE("params: non-finite values are rejected") {
  const ToyTask task = make_uniform_task(2, 1, 1);
  auto policy = make_tabular_policy(1, task.space, 3);
  std::vector<double> values = policy->params().values;
  values[0] = std::nan("");
  CHECK_THROWS_AS(policy->set_param_values(values), NumericError);
  values[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(policy->set_param_values(values), NumericError);
}

TEST_CASE("checkpoints: save/load round trip is bit-exact for both families") {
  const ToyTask task = make_peaked_task(3, 2, 2);
  const auto path =
      (std::filesystem::temp_directory_path() / "spinlab_policy_roundtrip.json").string();
  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    auto policy = random_policy(family, task, 47);
    save_policy(*policy, path);
    auto loaded = load_policy(path, task.space, task.num_prompts());
    CHECK(loaded->family() == family);
    CHECK(loaded->params() == policy->params());
  }
  const ToyTask other = make_peaked_task(4, 3, 2);
  CHECK_THROWS_AS(load_policy(path, other.space, other.num_prompts()), ConfigError);
  std::remove(path.c_str());
}
