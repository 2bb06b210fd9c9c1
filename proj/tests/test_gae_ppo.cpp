#include <gtest/gtest.h>

#include <cmath>

#include "lengthlab/gae_ppo.hpp"
#include "oracles.hpp"

using namespace lengthlab;

namespace {
Trajectory traj_of(int T, double reward) {
  Trajectory t;
  t.tokens.assign(static_cast<std::size_t>(T), 0);
  t.old_probs.assign(static_cast<std::size_t>(T), 0.5);
  t.reward = reward;
  t.terminated = true;
  return t;
}
}  // namespace

TEST(TdErrors, DocumentedExamples) {
  const std::vector<double> r{0, 0, 1};
  EXPECT_EQ(td_errors(r, std::vector<double>{0, 0, 0}), (std::vector<double>{0, 0, 1}));
  const auto d = td_errors(r, std::vector<double>{0.2, 0.3, 0.5});
  EXPECT_NEAR(d[0], 0.1, 1e-15);
  EXPECT_NEAR(d[1], 0.2, 1e-15);
  EXPECT_NEAR(d[2], 0.5, 1e-15);
  const double v = 0.7;
  const auto c = td_errors(std::vector<double>{0, -0.5}, std::vector<double>{v, v});
  EXPECT_DOUBLE_EQ(c[0], 0.0);
  EXPECT_DOUBLE_EQ(c[1], -0.5 - v);
  EXPECT_THROW(td_errors(r, std::vector<double>{0, 0}), std::invalid_argument);
}

TEST(Gae, DocumentedExampleAndS) {
  const std::vector<double> d{0, 0, 0, 1};
  const auto a = gae_advantages(d, 0.5);
  EXPECT_EQ(a, (std::vector<double>{0.125, 0.25, 0.5, 1.0}));
  EXPECT_DOUBLE_EQ(mean_advantage_S(a), -0.46875);
  EXPECT_DOUBLE_EQ(mean_advantage_S(std::vector<double>{0, 0, 0}), 0.0);
  EXPECT_EQ(gae_advantages(std::vector<double>{2.5}, 0.3), (std::vector<double>{2.5}));
}

TEST(Gae, LambdaOneIsSuffixSum) {
  const std::vector<double> d{0.3, -0.2, 1.5, 0.25};
  const auto a = gae_advantages(d, 1.0);
  EXPECT_NEAR(a[0], 1.85, 1e-15);
  EXPECT_NEAR(a[1], 1.55, 1e-15);
  EXPECT_NEAR(a[2], 1.75, 1e-15);
  EXPECT_NEAR(a[3], 0.25, 1e-15);
}

TEST(Gae, RecursionMatchesForwardDoubleSum) {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const int T = rng.uniform_int(1, 64);
    const double lambda = rng.bernoulli(0.2) ? 1.0 : rng.uniform(0.01, 0.999);
    const double gamma = rng.bernoulli(0.5) ? 1.0 : rng.uniform(0.5, 1.0);
    std::vector<double> d(static_cast<std::size_t>(T));
    for (double& x : d) x = rng.uniform(-3.0, 3.0);
    const auto a = gae_advantages(d, lambda, gamma);
    const auto o = oracle::gae_double_sum(d, lambda, gamma);
    for (int t = 0; t < T; ++t) EXPECT_NEAR(a[static_cast<std::size_t>(t)], static_cast<double>(o[static_cast<std::size_t>(t)]), 1e-10);
    if (gamma == 1.0) EXPECT_NEAR(mean_advantage_S(a), static_cast<double>(oracle::S_reindexed(d, lambda)), 1e-10);
  }
}

TEST(Gae, RejectsBadInput) {
  EXPECT_THROW(gae_advantages(std::vector<double>{}, 0.5), std::invalid_argument);
  EXPECT_THROW(gae_advantages(std::vector<double>{1.0}, 0.0), std::invalid_argument);
  EXPECT_THROW(gae_advantages(std::vector<double>{1.0}, 1.1), std::invalid_argument);
  EXPECT_THROW(mean_advantage_S(std::vector<double>{}), std::invalid_argument);
}

TEST(S, TerminalOnlyLambdaOneIsMinusR) {
  const std::vector<double> d{0, 0, 0, 0, -0.5};
  EXPECT_DOUBLE_EQ(mean_advantage_S(gae_advantages(d, 1.0)), 0.5);
}

TEST(ClippedWeight, Branches) {
  EXPECT_DOUBLE_EQ(clipped_ratio_weight(2.0, 1.0, 0.2), 1.2);
  EXPECT_DOUBLE_EQ(clipped_ratio_weight(2.0, -1.0, 0.2), 2.0);
  EXPECT_DOUBLE_EQ(clipped_ratio_weight(0.5, 1.0, 0.2), 0.5);
  EXPECT_DOUBLE_EQ(clipped_ratio_weight(0.5, -1.0, 0.2), 0.8);
  EXPECT_DOUBLE_EQ(clipped_ratio_weight(1.7, 0.0, 0.2), 1.0);
  EXPECT_EQ(clipped_ratio_slope(1.19, 1.0, 0.2), 1.0);
  EXPECT_EQ(clipped_ratio_slope(1.2, 1.0, 0.2), 0.0);
  EXPECT_EQ(clipped_ratio_slope(0.8, -1.0, 0.2), 0.0);
}

TEST(PpoLoss, IdentityRatioGivesS) {
  const auto t = traj_of(4, 1.0);
  const std::vector<double> a{0.125, 0.25, 0.5, 1.0};
  const auto l = ppo_loss(t, t.old_probs, a, 0.2);
  EXPECT_DOUBLE_EQ(l.loss, mean_advantage_S(a));
  for (double x : l.alpha) EXPECT_EQ(x, 1.0);
}

TEST(PpoLoss, RejectsZeroOldProbAndMismatch) {
  auto t = traj_of(2, 1.0);
  t.old_probs[1] = 0.0;
  EXPECT_THROW(ppo_loss(t, std::vector<double>{0.5, 0.5}, std::vector<double>{1, 1}, 0.2), std::invalid_argument);
  const auto u = traj_of(2, 1.0);
  EXPECT_THROW(ppo_loss(u, std::vector<double>{0.5}, std::vector<double>{1, 1}, 0.2), std::invalid_argument);
}

TEST(Theorem1, ExactRegimeMatchesOracle) {
  EXPECT_DOUBLE_EQ(theorem1_prediction(0.7, 9, 1.0, 0.0).S_leading, -0.7);
  EXPECT_DOUBLE_EQ(theorem1_prediction(1.0, 4, 0.5, 0.0).S_leading, -0.46875);
  for (int T : {1, 2, 7, 33, 64})
    for (double lambda : {0.1, 0.5, 0.95, 0.999})
      EXPECT_NEAR(theorem1_prediction(-0.5, T, lambda, 0.0).S_leading,
                  static_cast<double>(oracle::S_leading(-0.5L, T, lambda)), 1e-12);
}

TEST(Theorem1, NegativeRFavoursLength) {
  // R < 0: predicted S > 0 and shrinking with T.
  double prev = INFINITY;
  for (int T = 1; T <= 200; T += 7) {
    const double s = theorem1_prediction(-0.5, T, 0.95, 0.0).S_leading;
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, prev);
    prev = s;
  }
  EXPECT_NEAR(theorem1_prediction(-0.5, 2000, 0.95, 0.0).S_leading * 2000, 0.5 / 0.05, 1e-9);
}

TEST(Theorem1, ErrorBoundForms) {
  EXPECT_DOUBLE_EQ(theorem1_prediction(1.0, 5, 1.0, 0.2).error_bound, 0.2 * 4 / 2);
  EXPECT_DOUBLE_EQ(theorem1_prediction(1.0, 5, 0.5, 0.2).error_bound, 0.2 * 4 / (5 * 0.5));
  EXPECT_THROW(theorem1_prediction(1.0, 0, 0.5, 0.2), std::invalid_argument);
}

TEST(LossFollowsS, IdentityRatioTrivial) {
  const std::vector<double> a{0.3, -0.1, 0.2};
  const double S = mean_advantage_S(a);
  const auto c = loss_follows_S_check(S, S, a, 1.0, 1.0, 0.2);
  EXPECT_TRUE(c.holds);
  EXPECT_DOUBLE_EQ(c.alpha_dev, 0.2);
  EXPECT_FALSE(c.same_sign.has_value());
}

TEST(LossFollowsS, SameSignBracketsOnRandomInstances) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const int T = rng.uniform_int(1, 30);
    const auto t = traj_of(T, 0.0);
    std::vector<double> newp(static_cast<std::size_t>(T)), a(static_cast<std::size_t>(T));
    double rmin = INFINITY, rmax = -INFINITY;
    const double sgn = trial % 2 ? 1.0 : -1.0;
    for (int i = 0; i < T; ++i) {
      const double rho = rng.uniform(0.5, 2.0);
      rmin = std::min(rmin, rho);
      rmax = std::max(rmax, rho);
      newp[static_cast<std::size_t>(i)] = rho * 0.5;
      a[static_cast<std::size_t>(i)] = sgn * rng.uniform(0.01, 1.0);
    }
    const double S = mean_advantage_S(a);
    const double L = ppo_loss(t, newp, a, 0.2).loss;
    const auto c = loss_follows_S_check(L, S, a, rmin, rmax, 0.2);
    EXPECT_TRUE(c.holds);
    ASSERT_TRUE(c.same_sign.has_value());
    EXPECT_TRUE(*c.same_sign);
  }
}

TEST(LossFollowsS, LiteralLowerBracketFailsWhenEveryRatioIsClipped) {
  // T = 1, rho = 1.9, A > 0: alpha = 1.2, so |L| = 1.2|S| < rho_min |S|.
  const auto t = traj_of(1, 0.0);
  const std::vector<double> a{1.0};
  const double L = ppo_loss(t, std::vector<double>{0.95}, a, 0.2).loss;
  const auto c = loss_follows_S_check(L, mean_advantage_S(a), a, 1.9, 1.9, 0.2);
  EXPECT_TRUE(*c.same_sign);
  EXPECT_FALSE(*c.literal_bracket_holds);
}

TEST(FixedSign, Threshold) {
  EXPECT_DOUBLE_EQ(fixed_sign_threshold(1.0, 5), 4.0);
  EXPECT_DOUBLE_EQ(fixed_sign_threshold(0.3, 1), 0.0);
  EXPECT_DOUBLE_EQ(fixed_sign_threshold(1.0, 1), 0.0);
  EXPECT_NEAR(fixed_sign_threshold(0.95, 3), 2.16066, 1e-5);
  EXPECT_NEAR(fixed_sign_threshold(0.95, 3), (1 - 0.9025) / (0.05 * 0.9025), 1e-13);
}

TEST(FixedSign, AboveThresholdEveryAdvantageSharesSign) {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const int T = rng.uniform_int(1, 40);
    const double lambda = rng.uniform(0.3, 1.0);
    const double eps = rng.uniform(0.01, 0.5);
    const double R = -(eps * fixed_sign_threshold(lambda, T) * 1.01 + 1e-9);
    std::vector<double> d(static_cast<std::size_t>(T), eps);  // worst case against R < 0
    d.back() = R;
    for (double x : gae_advantages(d, lambda)) EXPECT_LT(x, 0.0);
  }
}

TEST(ValueTargets, LambdaOneTelescopesToReward) {
  // V_old = (2, 1), r = -0.5, lambda = 1: the TD errors telescope, so every
  // target is r regardless of V_old.
  const auto t = traj_of(2, -0.5);
  const std::vector<double> v{2.0, 1.0};
  const auto d = td_errors(t.reward_vector(), v);
  const auto a = gae_advantages(d, 1.0);
  const auto tg = value_targets(t, v, a);
  EXPECT_DOUBLE_EQ(tg[0], -0.5);
  EXPECT_DOUBLE_EQ(tg[1], -0.5);
}

TEST(ValueTargets, ConstantValuesPushTargetAboveReward) {
  // Constant V = 2: A_0 = lambda^{T-1} (r - V), so target_0 = V + lambda^{T-1} (r - V) > r.
  const auto t = traj_of(3, -0.5);
  const std::vector<double> v{2.0, 2.0, 2.0};
  const auto a = gae_advantages(td_errors(t.reward_vector(), v), 0.95);
  const auto tg = value_targets(t, v, a);
  EXPECT_GT(tg[0], t.reward);
  EXPECT_NEAR(tg[0], 2.0 + 0.95 * 0.95 * (-2.5), 1e-14);
}

TEST(ValueTargets, ZeroValuesGiveAdvantages) {
  const auto t = traj_of(3, 1.0);
  const std::vector<double> v{0, 0, 0};
  const auto a = gae_advantages(td_errors(t.reward_vector(), v), 0.9);
  EXPECT_EQ(value_targets(t, v, a), a);
  EXPECT_NEAR(a[0], 0.81, 1e-15);  // discounted by lambda^{T-1}
}

TEST(ValueUpdate, UnitStepPureRegression) {
  const std::vector<double> v{0.3, -1.0}, tg{1.0, 2.0};
  EXPECT_EQ(value_update(v, tg, 1.0, 0.0), tg);
  EXPECT_THROW(value_update(v, tg, 0.0, 0.0), std::invalid_argument);
  EXPECT_THROW(value_update(v, tg, 0.5, -1.0), std::invalid_argument);
}

TEST(ValueUpdate, EquilibriumBetweenZeroAndTarget) {
  for (double target : {1.0, -0.5, 3.0}) {
    std::vector<double> v{0.0};
    const std::vector<double> tg{target};
    for (int i = 0; i < 2000; ++i) v = value_update(v, tg, 0.3, 0.5);
    EXPECT_NEAR(v[0], target / 1.5, 1e-12);
    if (target > 0) {
      EXPECT_GT(v[0], 0.0);
      EXPECT_LT(v[0], target);
    } else {
      EXPECT_LT(v[0], 0.0);
      EXPECT_GT(v[0], target);
    }
  }
}

TEST(AnalyzeTrajectory, ReportsResidualAndEpsilon) {
  const auto t = traj_of(3, 1.0);
  const std::vector<double> v{0.2, 0.3, 0.5};
  const auto r = analyze_trajectory(t, v, GaeConfig{1.0, 1.0, 0.2});
  EXPECT_DOUBLE_EQ(r.R, 0.5);
  EXPECT_NEAR(r.epsilon_bound, 0.2, 1e-15);
  EXPECT_NEAR(r.S, r.L, 1e-15);
}
