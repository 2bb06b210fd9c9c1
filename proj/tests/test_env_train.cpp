#include <gtest/gtest.h>

#include <cmath>

#include "lengthlab/env_train.hpp"
#include "oracles.hpp"

using namespace lengthlab;

namespace {
TrainConfig ppo_cfg(int steps, std::uint64_t seed = 1) {
  TrainConfig c;
  c.algorithm = Algorithm::kPpo;
  c.actor_lr = 10.0;
  c.steps = steps;
  c.seed = seed;
  return c;
}

TrainConfig grpo_cfg(int steps, double beta, std::uint64_t seed = 1) {
  TrainConfig c;
  c.algorithm = Algorithm::kGrpo;
  c.grpo.kl_weight = beta;
  c.actor_lr = 10.0;
  c.steps = steps;
  c.seed = seed;
  return c;
}

const ProblemSet& mixed_set() {
  static const ProblemSet s = make_problem_set({2, 2, 2}, 7);
  return s;
}
}  // namespace

TEST(ProblemSet, ClassesAndIds) {
  const auto& s = mixed_set();
  ASSERT_EQ(s.size(), 6u);
  EXPECT_EQ(s.problems[0].id, "u0");
  EXPECT_EQ(s.problems[2].id, "o0");
  EXPECT_EQ(s.problems[5].id, "f1");
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(s.problems[i].correct_answer.has_value(), s.classes[i] != DifficultyClass::kUnsolvable);
    EXPECT_TRUE(class_rate_ok(s.classes[i], s.measured_rate[i]));
  }
  EXPECT_EQ(make_problem_set({0, 1, 0}, 7, {}, "p2-").problems[0].id, "p2-o0");
}

TEST(ProblemSet, DeterministicInSeed) {
  const auto a = make_problem_set({1, 2, 1}, 3);
  const auto b = make_problem_set({1, 2, 1}, 3);
  EXPECT_EQ(a.problems, b.problems);
  EXPECT_EQ(a.skill, b.skill);
  EXPECT_EQ(a.measured_rate, b.measured_rate);
}

TEST(ProblemSet, UnsolvableHasZeroSolveRateUnderAnyPolicy) {
  const auto& s = mixed_set();
  TabularSoftmaxPolicy uniform(s.vocab.size());
  const auto base = make_base_policy(s, 1.0);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(estimate_pa(uniform, s.problems[i], s.vocab, 2000, 1).per_sample_rate, 0.0);
    EXPECT_EQ(estimate_pa(base, s.problems[i], s.vocab, 2000, 2).per_sample_rate, 0.0);
  }
}

TEST(ProblemSet, OccasionalUnderUniformPolicy) {
  const auto& s = mixed_set();
  TabularSoftmaxPolicy uniform(s.vocab.size());
  const double expected = static_cast<double>(oracle::uniform_policy_solve_rate(s.vocab.size(), s.base.max_len));
  for (std::size_t i = 2; i < 4; ++i) {
    const auto est = estimate_pa(uniform, s.problems[i], s.vocab, 10000, 10 + i);
    EXPECT_GT(est.per_sample_rate, 0.0);
    EXPECT_LT(est.per_sample_rate, 0.5);
    EXPECT_NEAR(est.per_sample_rate, expected, oracle::binomial_halfwidth(expected, 10000));
  }
}

TEST(ProblemSet, FullStaysSolvedAfterUnsolvableTraining) {
  const auto& s = mixed_set();
  const auto unsolvable = make_problem_set({4, 0, 0}, 1);
  auto cfg = ppo_cfg(300);
  auto pol = make_base_policy(s.merged_with(unsolvable), cfg.temperature);
  ValueTable values;
  train_ppo(pol, values, unsolvable, cfg);
  pol.set_temperature(1.0);
  for (std::size_t i = 4; i < 6; ++i)
    EXPECT_GE(estimate_pa(pol, s.problems[i], s.vocab, 2000, 20 + i).per_sample_rate, 0.9);
}

TEST(ProblemSet, MergeSkipsIdenticalAndRejectsConflicts) {
  const auto a = make_problem_set({1, 0, 0}, 1);
  EXPECT_EQ(a.merged_with(a).size(), 1u);
  auto b = make_problem_set({0, 1, 0}, 1);
  b.problems[0].id = "u0";
  EXPECT_THROW(a.merged_with(b), std::invalid_argument);
}

TEST(ProblemSet, UnreachableClassThrows) {
  BaseModelConfig base;
  base.full_skill = -3.0;
  EXPECT_THROW(make_problem_set({0, 0, 1}, 1, base, "", 500, 2), ProblemSetError);
}

TEST(TrainConfig, Validation) {
  auto c = grpo_cfg(1, 0.0);
  c.samples_per_problem = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ppo_cfg(1);
  c.step_penalty = 0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ppo_cfg(-1);
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ppo_cfg(1);
  c.step_penalty = -0.01;
  EXPECT_EQ(c.reward_scheme().step_penalty, -0.01);
}

TEST(Training, ZeroLearningRatesKeepPolicyAndValuesFixed) {
  const auto& s = mixed_set();
  for (auto cfg : {ppo_cfg(10), grpo_cfg(10, 0.1)}) {
    cfg.actor_lr = 0.0;
    cfg.critic_lr = 0.0;
    auto pol = make_base_policy(s, cfg.temperature);
    const auto start = pol;
    ValueTable values;
    const auto log = train(pol, values, s, cfg);
    EXPECT_EQ(log.records.size(), 10u);
    EXPECT_TRUE(pol == start);
    EXPECT_TRUE(values.table().empty());
  }
}

TEST(Training, ReproducibleForFixedSeed) {
  const auto& s = mixed_set();
  for (const auto& cfg : {ppo_cfg(30, 5), grpo_cfg(30, 0.05, 5)}) {
    auto p1 = make_base_policy(s, cfg.temperature), p2 = p1;
    ValueTable v1, v2;
    const auto l1 = train(p1, v1, s, cfg);
    const auto l2 = train(p2, v2, s, cfg);
    EXPECT_TRUE(l1 == l2);
    EXPECT_TRUE(p1 == p2);
    EXPECT_TRUE(v1 == v2);
  }
  auto pa = make_base_policy(s, 0.6), pb = pa;
  ValueTable va, vb;
  EXPECT_FALSE(train(pa, va, s, ppo_cfg(5, 1)) == train(pb, vb, s, ppo_cfg(5, 2)));
}

TEST(Training, LengthStatisticsAreOrdered) {
  const auto& s = mixed_set();
  for (const auto& cfg : {ppo_cfg(40), grpo_cfg(40, 0.01)}) {
    auto pol = make_base_policy(s, cfg.temperature);
    ValueTable values;
    for (const auto& r : train(pol, values, s, cfg).records) {
      EXPECT_GE(r.min_len, 1);
      EXPECT_LE(r.min_len, r.mean_len);
      EXPECT_LE(r.mean_len, r.max_len);
      EXPECT_LE(r.max_len, s.base.max_len);
      EXPECT_GE(r.accuracy, 0.0);
      EXPECT_LE(r.accuracy, 1.0);
    }
  }
}

TEST(Training, PpoLossEqualsSAtIdentityRatio) {
  const auto& s = mixed_set();
  auto pol = make_base_policy(s, 0.6);
  ValueTable values;
  for (const auto& r : train(pol, values, s, ppo_cfg(50)).records) EXPECT_NEAR(r.policy_loss, r.S, 1e-12);
}

TEST(Training, PpoLossSignFollowsTerminalResidualOnUnsolvableSet) {
  // Every response scores the same negative reward, so while V stays above r
  // each S is positive.
  const auto set = make_problem_set({3, 0, 0}, 1);
  auto pol = make_base_policy(set, 0.6);
  ValueTable values;
  const auto log = train(pol, values, set, ppo_cfg(100));
  int positive = 0;
  for (const auto& r : log.records) {
    EXPECT_EQ(r.accuracy, 0.0);
    EXPECT_EQ(r.max_abs_reward, 0.5);
    positive += r.policy_loss > 0.0;
  }
  EXPECT_GE(positive, 95);
}

TEST(Training, LambdaOneTargetsEqualReward) {
  const auto set = make_problem_set({2, 2, 0}, 1);
  auto cfg = ppo_cfg(40);
  cfg.gae.lambda = 1.0;
  auto pol = make_base_policy(set, cfg.temperature);
  ValueTable values;
  for (const auto& r : train(pol, values, set, cfg).records) EXPECT_LE(r.max_abs_target, r.max_abs_reward + 1e-12);
}

TEST(Training, ZeroAdvantageGroupsGetOnlyTheKlUpdate) {
  const auto set = make_problem_set({3, 0, 0}, 1);
  auto cfg = grpo_cfg(1, 0.1);
  const auto ref = make_base_policy(set, cfg.temperature);
  auto pol = ref;
  pol.add_to_entry(ContextKey{"", 0, {}}, std::vector<double>{0.3, -0.2, 0.1, 0.0, 0.2, -0.1, 0.0, 0.0});
  const auto out = grpo_step(pol, ref, set, cfg, 1);
  EXPECT_EQ(out.stats.all_wrong, 3);
  EXPECT_EQ(out.record.zero_advantage_rate, 1.0);
  EXPECT_TRUE(out.policy_gradient.empty());
  EXPECT_EQ(out.record.policy_loss, 0.0);
  EXPECT_EQ(out.record.policy_grad_norm, 0.0);
  EXPECT_FALSE(out.kl_gradient.empty());
  EXPECT_GT(out.record.kl, 0.0);
  for (const auto& g : out.groups) {
    EXPECT_EQ(g.k, 0);
    EXPECT_EQ(g.advantage_wrong, 0.0);
    EXPECT_DOUBLE_EQ(g.total, 0.1 * g.kl);
  }

  cfg.grpo.kl_weight = 0.0;
  auto frozen = pol;
  grpo_step(frozen, ref, set, cfg, 1);
  EXPECT_TRUE(frozen == pol);
}

TEST(Training, GrpoLogsOneRowPerGroupPerStep) {
  const auto& s = mixed_set();
  auto pol = make_base_policy(s, 0.6);
  ValueTable values;
  const auto log = train(pol, values, s, grpo_cfg(7, 0.01));
  EXPECT_EQ(log.groups.size(), 7 * s.size());
  EXPECT_EQ(log.group_stats.size(), 7u);
  for (const auto& g : log.groups) {
    EXPECT_EQ(g.N, 8);
    if (g.k > 0 && g.k < g.N) {
      EXPECT_NEAR(g.advantage_correct, closed_form_advantage(g.N, g.k, 1), 1e-12);
      EXPECT_NEAR(g.advantage_wrong, closed_form_advantage(g.N, g.k, 0), 1e-12);
    }
  }
}

TEST(Training, WrongAlgorithmRejected) {
  const auto& s = mixed_set();
  auto pol = make_base_policy(s, 0.6);
  ValueTable values;
  EXPECT_THROW(train_ppo(pol, values, s, grpo_cfg(1, 0.0)), std::invalid_argument);
  EXPECT_THROW(train_grpo(pol, s, ppo_cfg(1)), std::invalid_argument);
}

TEST(Dynamics, WindowStatistics) {
  TrainLog log;
  for (int s = 1; s <= 40; ++s) {
    StepRecord r;
    r.step = s;
    r.mean_len = s <= 20 ? 10.0 : 6.0;
    log.records.push_back(r);
  }
  EXPECT_EQ(window_median(log, field_mean_len, 20), 10.0);
  EXPECT_EQ(window_median(log, field_mean_len, 40), 6.0);
  EXPECT_EQ(window_median(log, field_mean_len, 30), 8.0);
  EXPECT_EQ(window_mean(log, field_mean_len, 25), 9.0);
  EXPECT_EQ(window_median_series(log, field_mean_len).size(), 21u);
  EXPECT_EQ(length_reduction_step(log), 31);
  EXPECT_FALSE(length_reduction_step(log, 0.5).has_value());
  EXPECT_THROW(window_median(log, field_mean_len, 41), std::out_of_range);
  EXPECT_THROW(median({}), std::invalid_argument);
}

TEST(TwoPhase, ZeroPhaseTwoStepsLeavesPolicyUnchanged) {
  const auto p1 = make_problem_set({2, 0, 0}, 1);
  const auto p2 = make_problem_set({0, 2, 0}, 101, {}, "p2-");
  const auto start = make_base_policy(p1.merged_with(p2), 0.6);
  const auto r = two_phase(start, p1, p2, ppo_cfg(20), ppo_cfg(0), 50, 9);
  EXPECT_TRUE(r.policy1 == r.policy2);
  EXPECT_TRUE(r.log2.records.empty());
  EXPECT_EQ(r.eval1.accuracy, r.eval2.accuracy);
  EXPECT_EQ(r.eval1.mean_len, r.eval2.mean_len);
}

TEST(LambdaSweep, RunsEachLambdaFromTheSameStart) {
  const auto set = make_problem_set({2, 0, 0}, 1);
  const auto start = make_base_policy(set, 0.6);
  const auto runs = lambda_sweep(start, set, {0.95, 1.0}, ppo_cfg(20));
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs[0].lambda, 0.95);
  EXPECT_EQ(runs[1].log.records.size(), 20u);
  EXPECT_FALSE(runs[1].overflow);
  EXPECT_THROW(lambda_sweep(start, set, {1.5}, ppo_cfg(1)), std::invalid_argument);
  EXPECT_THROW(lambda_sweep(start, set, {1.0}, grpo_cfg(1, 0.0)), std::invalid_argument);
}
