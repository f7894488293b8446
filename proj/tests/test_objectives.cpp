#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "spinlab/objectives.hpp"

using namespace spinlab;
using spinlab::testing::l2;
using spinlab::testing::make_peaked_task;
using spinlab::testing::make_uniform_task;
using spinlab::testing::random_batch;
using spinlab::testing::random_policy;

namespace {

LossSpec spec_for(Objective objective, LossKind kind = LossKind::Logistic, double alpha = 1.0,
                  double beta = 0.1, double lambda = 1.0) {
  LossSpec spec;
  spec.objective = objective;
  spec.loss_kind = kind;
  spec.alpha = alpha;
  spec.beta = beta;
  spec.lambda = lambda;
  return spec;
}

// A 4-response task whose tabular logits are exact log-probabilities:
// the first three responses carry log pi = -1, -2, -3.
std::unique_ptr<Policy> exact_logprob_policy(std::shared_ptr<const ResponseSpace> space) {
  const double rest = 1.0 - std::exp(-1.0) - std::exp(-2.0) - std::exp(-3.0);
  return make_tabular_policy(1, std::move(space),
                             std::vector<double>{-1.0, -2.0, -3.0, std::log(rest)});
}

}  // namespace

TEST_CASE("ell: frozen values") {
  CHECK(ell(LossKind::Logistic, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(ell_prime(LossKind::Logistic, 0.0) == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(ell(LossKind::Logistic, 1.0) ==
        doctest::Approx(0.31326168751822284).epsilon(1e-14));
  CHECK(ell(LossKind::Exponential, 0.0) == 1.0);
  CHECK(ell_prime(LossKind::Exponential, 0.0) == -1.0);
}

TEST_CASE("ell: derivative matches finite differences") {
  const double h = 1e-6;
  for (LossKind kind : {LossKind::Logistic, LossKind::Exponential}) {
    for (double x = -8.0; x <= 8.0; x += 0.37) {
      const double fd = (ell(kind, x + h) - ell(kind, x - h)) / (2.0 * h);
      CHECK(ell_prime(kind, x) == doctest::Approx(fd).epsilon(1e-8));
    }
  }
}

TEST_CASE("ell: decreasing and convex") {
  Rng rng(derive_seed(2, "ell_convex"));
  for (LossKind kind : {LossKind::Logistic, LossKind::Exponential}) {
    for (double x = -30.0; x <= 30.0; x += 1.3) {
      CHECK(ell_prime(kind, x) < 0.0);
    }
    for (int i = 0; i < 200; ++i) {
      const double a = 20.0 * (rng.next_double() - 0.5);
      const double b = 20.0 * (rng.next_double() - 0.5);
      CHECK(ell(kind, 0.5 * (a + b)) <= 0.5 * (ell(kind, a) + ell(kind, b)) + 1e-12);
    }
  }
}

TEST_CASE("ell: stable at large arguments") {
  CHECK(std::isfinite(ell(LossKind::Logistic, 700.0)));
  CHECK(std::isfinite(ell(LossKind::Logistic, -700.0)));
  CHECK(ell(LossKind::Logistic, 700.0) == doctest::Approx(0.0));
  CHECK(ell(LossKind::Logistic, -700.0) == doctest::Approx(700.0));
}

TEST_CASE("sft_loss: uniform and point-mass policies") {
  const ToyTask task = make_uniform_task(4, 3, 1);
  const std::size_t n = task.space->size();
  const AnnotatedSet batch = sample_annotated(task, 16, 3);

  auto uniform = make_tabular_policy(1, task.space, std::vector<double>(n, 0.0));
  CHECK(sft_loss(*uniform, batch.records).value ==
        doctest::Approx(std::log(84.0)).epsilon(1e-13));

  // a policy that puts all mass on the single annotated response
  AnnotatedSet single;
  single.records.assign(8, AnnotatedRecord{0, task.space->at(5)});
  std::vector<double> logits(n, 0.0);
  logits[5] = 300.0;
  auto point = make_tabular_policy(1, task.space, logits);
  CHECK(sft_loss(*point, single.records).value == doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS_AS(sft_loss(*uniform, std::span<const AnnotatedRecord>{}), UsageError);
}

TEST_CASE("spin_loss: ratios cancel right after a snapshot") {
  const ToyTask task = make_peaked_task(4, 3, 2);
  auto policy = random_policy(PolicyFamily::Tabular, task, 11);
  const PolicySnapshot reference(*policy, SnapshotLabel::Previous);
  const TripletBatch batch = random_batch(task, 16, 4, &reference);
  const auto spec = spec_for(Objective::Spin);
  const LossResult result = spin_loss(*policy, batch, spec);
  CHECK(result.value == doctest::Approx(ell(LossKind::Logistic, 0.0)).epsilon(1e-15));
}

TEST_CASE("spin_loss: y' = y degenerates to a constant with a zero gradient") {
  const ToyTask task = make_peaked_task(4, 3, 2);
  Rng rng(derive_seed(6, "degenerate"));
  for (int trial = 0; trial < 20; ++trial) {
    auto policy = random_policy(PolicyFamily::Tabular, task, 100 + trial);
    auto ref_policy = random_policy(PolicyFamily::Tabular, task, 200 + trial);
    const PolicySnapshot reference(*ref_policy, SnapshotLabel::Previous);

    AnnotatedSet annotated;
    std::vector<Response> y_prime, y_zero;
    for (int i = 0; i < 12; ++i) {
      const auto prompt = static_cast<PromptId>(rng.next_u64() % task.num_prompts());
      const Response& y = task.space->at(rng.next_u64() % task.space->size());
      annotated.records.push_back({prompt, y});
      y_prime.push_back(y);  // synthetic identical to annotated
      y_zero.push_back(task.space->at(rng.next_u64() % task.space->size()));
    }
    const TripletBatch batch = TripletBatch::build(task, annotated, y_prime, y_zero, &reference);

    const LossResult spin = spin_loss(*policy, batch, spec_for(Objective::Spin));
    CHECK(std::abs(spin.value - ell(LossKind::Logistic, 0.0)) <= 1e-12);
    CHECK(l2(spin.gradient) <= 1e-12);

    // the historical term keeps the triplet loss alive on the same batch
    const LossResult tspin = tspin_loss(*policy, batch, spec_for(Objective::Tspin));
    CHECK(l2(tspin.gradient) > 1e-3);
  }
}

TEST_CASE("spin_loss: missing reference log-probs is a usage error") {
  const ToyTask task = make_uniform_task(3, 2, 1);
  auto policy = random_policy(PolicyFamily::Tabular, task, 12);
  const TripletBatch batch = random_batch(task, 4, 5, nullptr);
  CHECK_THROWS_AS(spin_loss(*policy, batch, spec_for(Objective::Spin)), UsageError);
  CHECK_THROWS_AS(tspin_ref_loss(*policy, batch, spec_for(Objective::TspinRef)), UsageError);
}

TEST_CASE("tspin_loss: equal log-probs give (1 + beta) * log 2") {
  const ToyTask task = make_uniform_task(4, 3, 1);
  const std::size_t n = task.space->size();
  auto uniform = make_tabular_policy(1, task.space, std::vector<double>(n, 0.0));
  const TripletBatch batch = random_batch(task, 16, 6, nullptr);
  const auto spec = spec_for(Objective::Tspin, LossKind::Logistic, 1.0, 0.1);
  const LossResult result = tspin_loss(*uniform, batch, spec);
  CHECK(result.value == doctest::Approx(1.1 * std::log(2.0)).epsilon(1e-13));
}

TEST_CASE("tspin_loss: frozen scalar instance") {
  auto space = std::make_shared<ResponseSpace>(4, 1);
  auto policy = exact_logprob_policy(space);

  ToyTask task;
  task.vocabulary = Vocabulary::of_size(4);
  task.lmax = 1;
  task.space = space;
  task.prompts = {0};
  task.prompt_weights = {1.0};
  task.data_dist = {{0.25, 0.25, 0.25, 0.25}};

  AnnotatedSet annotated;
  annotated.records = {{0, space->at(0)}};  // log pi(y)  = -1
  const std::vector<Response> y_prime = {space->at(1)};  // log pi(y') = -2
  const std::vector<Response> y_zero = {space->at(2)};   // log pi(y0) = -3
  const TripletBatch batch = TripletBatch::build(task, annotated, y_prime, y_zero, nullptr);

  const auto spec = spec_for(Objective::Tspin, LossKind::Logistic, 1.0, 0.1);
  const AdvantageTerms adv = advantage_terms(*policy, batch.items[0]);
  CHECK(adv.u == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(adv.v == doctest::Approx(1.0).epsilon(1e-12));
  // 1.1 * (-log sigma(1))
  CHECK(tspin_loss(*policy, batch, spec).value ==
        doctest::Approx(0.34458785627004512).epsilon(1e-13));
}

TEST_CASE("tspin_ref_loss: equals ell(0) terms right after a snapshot") {
  const ToyTask task = make_peaked_task(4, 3, 2);
  auto policy = random_policy(PolicyFamily::Tabular, task, 13);
  const PolicySnapshot reference(*policy, SnapshotLabel::Previous);
  const TripletBatch batch = random_batch(task, 8, 7, &reference);
  const auto spec = spec_for(Objective::TspinRef, LossKind::Logistic, 1.0, 0.1);
  CHECK(tspin_ref_loss(*policy, batch, spec).value ==
        doctest::Approx(1.1 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("tspin_ref_loss: beta = 0 reduces to spin_loss at lambda = alpha") {
  const ToyTask task = make_peaked_task(4, 3, 2);
  auto policy = random_policy(PolicyFamily::Autoregressive, task, 14);
  auto ref_policy = random_policy(PolicyFamily::Autoregressive, task, 15);
  const PolicySnapshot reference(*ref_policy, SnapshotLabel::Previous);
  const TripletBatch batch = random_batch(task, 16, 8, &reference);

  const double alpha = 0.7;
  const LossResult ref0 =
      tspin_ref_loss(*policy, batch, spec_for(Objective::TspinRef, LossKind::Logistic, alpha, 0.0));
  const LossResult spin =
      spin_loss(*policy, batch, spec_for(Objective::Spin, LossKind::Logistic, 1.0, 0.1, alpha));
  CHECK(ref0.value == doctest::Approx(spin.value).epsilon(1e-15));
  for (std::size_t i = 0; i < ref0.gradient.size(); ++i) {
    CHECK(ref0.gradient[i] == doctest::Approx(spin.gradient[i]).epsilon(1e-12));
  }
}

TEST_CASE("tspin_ref_loss: uniform reference reproduces the reference-free arguments") {
  const ToyTask task = make_uniform_task(4, 3, 2);
  const std::size_t n = task.space->size();
  auto policy = random_policy(PolicyFamily::Tabular, task, 16);
  auto uniform = make_tabular_policy(task.num_prompts(), task.space,
                                     std::vector<double>(task.num_prompts() * n, 0.0));
  const PolicySnapshot reference(*uniform, SnapshotLabel::Previous);
  const TripletBatch batch = random_batch(task, 32, 9, &reference);

  // under a uniform pi_theta_t every reference log-prob is the same constant,
  // so the log-ratio differences collapse to the raw advantages
  const auto ref_spec = spec_for(Objective::TspinRef, LossKind::Logistic, 1.0, 0.1);
  const auto free_spec = spec_for(Objective::Tspin, LossKind::Logistic, 1.0, 0.1);
  for (const auto& item : batch.items) {
    const AdvantageTerms adv = advantage_terms(*policy, item);
    const double arg1_ref = ref_spec.alpha * ((policy->log_prob(item.prompt, item.y) -
                                               item.ref_logp_y) -
                                              (policy->log_prob(item.prompt, item.y_prime) -
                                               item.ref_logp_yp));
    CHECK(std::abs(arg1_ref - free_spec.alpha * adv.u) <= 1e-12);
  }
  CHECK(tspin_ref_loss(*policy, batch, ref_spec).value ==
        doctest::Approx(tspin_loss(*policy, batch, free_spec).value).epsilon(1e-13));
}

TEST_CASE("losses match finite differences on random instances") {
  const ToyTask task = make_peaked_task(3, 2, 2);
  for (PolicyFamily family : {PolicyFamily::Tabular, PolicyFamily::Autoregressive}) {
    for (LossKind kind : {LossKind::Logistic, LossKind::Exponential}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto policy = random_policy(family, task, 300 + seed);
        auto ref_policy = random_policy(family, task, 400 + seed);
        const PolicySnapshot reference(*ref_policy, SnapshotLabel::Previous);
        const TripletBatch batch = random_batch(task, 8, 500 + seed, &reference);
        const AnnotatedSet annotated = sample_annotated(task, 8, 600 + seed);

        for (Objective objective :
             {Objective::Sft, Objective::Spin, Objective::Tspin, Objective::TspinRef}) {
          const auto spec = spec_for(objective, kind, 0.8, 0.15, 1.2);
          const auto loss = [&](const Policy& p) {
            return evaluate_loss(p, spec, batch, annotated.records);
          };
          const GradCheckReport report = grad_check(*policy, loss);
          CHECK(report.max_rel_error <= 1e-6);
          CHECK(report.max_abs_error <= 1e-9);
        }
      }
    }
  }
}

TEST_CASE("confidence: positive scaling of the log-likelihood") {
  const ToyTask task = make_uniform_task(3, 2, 1);
  auto policy = random_policy(PolicyFamily::Tabular, task, 19);

  const auto spec1 = spec_for(Objective::Tspin, LossKind::Logistic, 1.0);
  const Response& r = task.space->at(3);
  CHECK(confidence(*policy, spec1, 0, r) == policy->log_prob(0, r));

  const std::size_t n = task.space->size();
  auto uniform = make_tabular_policy(1, task.space, std::vector<double>(n, 0.0));
  const auto spec_half = spec_for(Objective::Tspin, LossKind::Logistic, 0.5);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(confidence(*uniform, spec_half, 0, task.space->at(i)) ==
          doctest::Approx(-0.5 * std::log(static_cast<double>(n))).epsilon(1e-14));
  }

  // argmax under confidence == argmax under log-likelihood
  std::size_t best_conf = 0, best_lp = 0;
  const auto spec_a = spec_for(Objective::Tspin, LossKind::Logistic, 0.37);
  for (std::size_t i = 1; i < n; ++i) {
    if (confidence(*policy, spec_a, 0, task.space->at(i)) >
        confidence(*policy, spec_a, 0, task.space->at(best_conf))) {
      best_conf = i;
    }
    if (policy->log_prob(0, task.space->at(i)) > policy->log_prob(0, task.space->at(best_lp))) {
      best_lp = i;
    }
  }
  CHECK(best_conf == best_lp);
}

TEST_CASE("naive triplet evaluator agrees to 1e-12") {
  // straight-line transcription: mean of -log sigmoid(alpha*u) - beta*log sigmoid(alpha*v)
  const ToyTask task = make_peaked_task(4, 3, 4);
  Rng rng(derive_seed(20, "naive"));
  for (int round = 0; round < 10; ++round) {
    auto policy = random_policy(PolicyFamily::Tabular, task, 700 + round, 0.6);
    const TripletBatch batch = random_batch(task, 100, 800 + round, nullptr);
    const double alpha = 0.5 + rng.next_double();
    const double beta = 0.3 * rng.next_double();
    const auto spec = spec_for(Objective::Tspin, LossKind::Logistic, alpha, beta);

    double naive = 0.0;
    for (const auto& item : batch.items) {
      const double ly = policy->log_prob(item.prompt, item.y);
      const double lyp = policy->log_prob(item.prompt, item.y_prime);
      const double ly0 = policy->log_prob(item.prompt, item.y_zero);
      const double su = 1.0 / (1.0 + std::exp(-alpha * (ly - lyp)));
      const double sv = 1.0 / (1.0 + std::exp(-alpha * (lyp - ly0)));
      naive += -std::log(su) - beta * std::log(sv);
    }
    naive /= static_cast<double>(batch.items.size());
    CHECK(std::abs(tspin_loss(*policy, batch, spec).value - naive) <= 1e-12);
  }
}

TEST_CASE("grad_check: flags a deliberately corrupted gradient entry") {
  const ToyTask task = make_peaked_task(3, 2, 1);
  auto policy = random_policy(PolicyFamily::Tabular, task, 22);
  const TripletBatch batch = random_batch(task, 8, 10, nullptr);
  const auto spec = spec_for(Objective::Tspin);

  const LossResult honest = tspin_loss(*policy, batch, spec);
  std::size_t corrupt = 0;
  for (std::size_t i = 1; i < honest.gradient.size(); ++i) {
    if (std::abs(honest.gradient[i]) > std::abs(honest.gradient[corrupt])) corrupt = i;
  }
  const auto loss = [&](const Policy& p) {
    LossResult r = tspin_loss(p, batch, spec);
    r.gradient[corrupt] *= 2.0;
    return r;
  };
  const GradCheckReport report = grad_check(*policy, loss);
  CHECK(report.max_rel_error > 0.1);
  CHECK(report.worst_index == corrupt);

  CHECK_THROWS_AS(grad_check(*policy, loss, 1e-2), UsageError);
  CHECK_THROWS_AS(grad_check(*policy, loss, 1e-9), UsageError);
}

TEST_CASE("negative gradient direction raises log pi(y) and lowers log pi(y0)") {
  // near the init distribution, where the discussion of the triplet gradient
  // applies: 20 isolated triplets with distinct responses
  const ToyTask task = make_peaked_task(4, 3, 1);
  Rng rng(derive_seed(26, "signs"));
  const auto spec = spec_for(Objective::Tspin, LossKind::Logistic, 1.0, 0.1);
  int done = 0;
  while (done < 20) {
    auto policy = random_policy(PolicyFamily::Tabular, task, 900 + done, 0.1);
    const std::size_t iy = rng.next_u64() % task.space->size();
    const std::size_t iyp = rng.next_u64() % task.space->size();
    const std::size_t iy0 = rng.next_u64() % task.space->size();
    if (iy == iyp || iy == iy0 || iyp == iy0) continue;
    ++done;

    AnnotatedSet annotated;
    annotated.records = {{0, task.space->at(iy)}};
    const std::vector<Response> y_prime = {task.space->at(iyp)};
    const std::vector<Response> y_zero = {task.space->at(iy0)};
    const TripletBatch batch = TripletBatch::build(task, annotated, y_prime, y_zero, nullptr);

    const LossResult result = tspin_loss(*policy, batch, spec);
    const auto grad_y = policy->grad_log_prob(0, task.space->at(iy));
    const auto grad_y0 = policy->grad_log_prob(0, task.space->at(iy0));
    double dir_y = 0.0, dir_y0 = 0.0;
    for (std::size_t i = 0; i < result.gradient.size(); ++i) {
      dir_y += grad_y[i] * -result.gradient[i];
      dir_y0 += grad_y0[i] * -result.gradient[i];
    }
    CHECK(dir_y > 0.0);
    CHECK(dir_y0 < 0.0);
  }
}

TEST_CASE("loss spec validation") {
  auto spec = spec_for(Objective::Tspin);
  spec.alpha = 0.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = spec_for(Objective::Tspin);
  spec.beta = -0.1;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = spec_for(Objective::Spin);
  spec.lambda = 0.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}
