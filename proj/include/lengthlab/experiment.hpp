#pragma once

// Experiment descriptions (what the CLI configs deserialize into), runners,
// and the dynamics checks reported in run summaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lengthlab/env_train.hpp"

namespace lengthlab {

struct ProblemsConfig {
  ProblemSetSpec spec;
  std::uint64_t seed = 1;
  std::string id_prefix;
  int validation_samples = 2000;

  ProblemSet build(const BaseModelConfig& base) const {
    return make_problem_set(spec, seed, base, id_prefix, validation_samples);
  }
};

struct StageConfig {
  ProblemsConfig problems;
  TrainConfig train;
};

// Single training run. With `warmup`, a PPO stage first moves the policy away
// from the base model; the base model stays the GRPO reference.
struct TrainExperiment {
  BaseModelConfig base;
  std::optional<StageConfig> warmup;
  StageConfig stage;
};

struct TwoPhaseExperiment {
  BaseModelConfig base;
  StageConfig phase1;
  StageConfig phase2;
  int eval_samples = 200;
  std::uint64_t eval_seed = 99;
  double accuracy_tolerance = 0.05;
};

struct SweepExperiment {
  BaseModelConfig base;
  StageConfig stage;
  std::vector<double> lambdas{0.95, 1.0};
  double overflow_factor = 10.0;
  double reduction_fraction = 0.25;
};

inline constexpr int kDynamicsWindow = 20;
inline constexpr int kDynamicsTail = 50;

// Windowed statistics of a training log. Windows are the first and last
// kDynamicsWindow steps; "tail" is the last kDynamicsTail steps.
struct DynamicsSummary {
  int steps = 0;
  double len_initial = 0.0;
  double len_final = 0.0;
  double len_peak = 0.0;
  double growth_ratio = 0.0;
  double reduction_from_peak = 0.0;
  double acc_initial = 0.0;
  double acc_final = 0.0;
  double min_len_initial = 0.0;
  double min_len_final = 0.0;
  double positive_loss_fraction = 0.0;
  bool reward_constant = false;
  double reward_first = 0.0;
  double max_accuracy = 0.0;
  double zero_advantage_tail = 0.0;
  double abs_policy_loss_tail = 0.0;
  double max_abs_policy_loss = 0.0;
  double grad_norm_initial = 0.0;
  double grad_norm_tail = 0.0;
  double max_grad_norm = 0.0;
};

inline DynamicsSummary summarize_dynamics(const TrainLog& log) {
  DynamicsSummary d;
  const int n = static_cast<int>(log.records.size());
  d.steps = n;
  if (n == 0) return d;
  const int w = std::min(kDynamicsWindow, n);
  d.len_initial = window_median(log, field_mean_len, w, w);
  d.len_final = window_median(log, field_mean_len, n, w);
  d.len_peak = d.len_initial;
  for (int s = w; s <= n; ++s) d.len_peak = std::max(d.len_peak, window_median(log, field_mean_len, s, w));
  d.growth_ratio = d.len_final / d.len_initial;
  d.reduction_from_peak = 1.0 - d.len_final / d.len_peak;
  d.acc_initial = window_mean(log, field_accuracy, w, w);
  d.acc_final = window_mean(log, field_accuracy, n, w);
  d.min_len_initial = window_median(log, field_min_len, w, w);
  d.min_len_final = window_median(log, field_min_len, n, w);
  d.reward_first = log.records.front().mean_reward;
  d.reward_constant = true;
  int positive = 0;
  for (const auto& r : log.records) {
    positive += r.policy_loss > 0.0;
    d.reward_constant = d.reward_constant && r.mean_reward == d.reward_first;
    d.max_accuracy = std::max(d.max_accuracy, r.accuracy);
    d.max_abs_policy_loss = std::max(d.max_abs_policy_loss, std::abs(r.policy_loss));
    d.max_grad_norm = std::max(d.max_grad_norm, r.policy_grad_norm);
  }
  d.positive_loss_fraction = static_cast<double>(positive) / n;
  const int tail = std::min(kDynamicsTail, n);
  for (int i = n - tail; i < n; ++i) {
    const auto& r = log.records[static_cast<std::size_t>(i)];
    d.zero_advantage_tail += r.zero_advantage_rate / tail;
    d.abs_policy_loss_tail += std::abs(r.policy_loss) / tail;
    d.grad_norm_tail += r.policy_grad_norm / tail;
  }
  d.grad_norm_initial = window_mean(log, [](const StepRecord& r) { return r.policy_grad_norm; }, w, w);
  return d;
}

using CheckMap = std::map<std::string, bool>;

inline bool all_pass(const CheckMap& m) {
  return std::all_of(m.begin(), m.end(), [](const auto& kv) { return kv.second; });
}

// Checks that apply to a run, chosen from the algorithm and the classes in
// the problem set.
inline CheckMap dynamics_checks(const TrainLog& log, const ProblemSet& set) {
  CheckMap c;
  if (log.records.size() < static_cast<std::size_t>(kDynamicsWindow)) return c;
  const auto d = summarize_dynamics(log);
  auto only = [&](DifficultyClass k) {
    return !set.classes.empty() && std::all_of(set.classes.begin(), set.classes.end(), [&](auto x) { return x == k; });
  };
  const bool any_solvable = std::any_of(set.problems.begin(), set.problems.end(), [](const Problem& p) { return p.solvable(); });
  if (log.algorithm == Algorithm::kPpo) {
    if (only(DifficultyClass::kUnsolvable)) {
      c["reward_constant_at_answered_wrong"] = d.reward_constant && d.reward_first == -0.5;
      c["policy_loss_positive_95pct"] = d.positive_loss_fraction >= 0.95;
      c["length_growth_25pct"] = d.len_final >= 1.25 * d.len_initial;
    } else if (any_solvable) {
      c["length_reduction_25pct_from_peak"] = d.reduction_from_peak >= 0.25;
      c["accuracy_preserved_5pt"] = d.acc_final >= d.acc_initial - 0.05;
    }
  } else {
    if (only(DifficultyClass::kUnsolvable)) {
      c["policy_loss_identically_zero"] = d.max_abs_policy_loss == 0.0 && d.max_grad_norm == 0.0;
      c["min_length_collapse"] = d.min_len_final < d.min_len_initial;
    } else if (only(DifficultyClass::kFull)) {
      c["zero_advantage_rate_90pct_tail"] = d.zero_advantage_tail >= 0.9;
      c["policy_loss_to_zero"] = d.abs_policy_loss_tail <= 1e-12 && d.grad_norm_tail < d.grad_norm_initial;
    }
  }
  if (only(DifficultyClass::kUnsolvable)) c["unsolvable_accuracy_zero"] = d.max_accuracy == 0.0;
  return c;
}

struct TrainRun {
  ProblemSet set;
  TabularSoftmaxPolicy base;
  TabularSoftmaxPolicy policy;
  std::optional<TrainLog> warmup_log;
  TrainLog log;
  CheckMap checks;
};

inline TrainRun run_train(const TrainExperiment& ex) {
  const auto set = ex.stage.problems.build(ex.base);
  std::optional<ProblemSet> warm_set;
  ProblemSet all = set;
  if (ex.warmup) {
    warm_set = ex.warmup->problems.build(ex.base);
    all = warm_set->merged_with(set);
  }
  const auto base = make_base_policy(all, ex.stage.train.temperature);
  TrainRun run{set, base, base, std::nullopt, {}, {}};
  ValueTable values;
  if (ex.warmup) run.warmup_log = train(run.policy, values, *warm_set, ex.warmup->train);
  ValueTable fresh;
  run.log = train(run.policy, fresh, set, ex.stage.train, &run.base);
  run.checks = dynamics_checks(run.log, set);
  return run;
}

struct TwoPhaseRun {
  ProblemSet set1;
  ProblemSet set2;
  TwoPhaseResult result;
  DynamicsSummary d1;
  DynamicsSummary d2;
  CheckMap checks;
};

inline TwoPhaseRun run_two_phase(const TwoPhaseExperiment& ex) {
  if (ex.eval_samples < 1) throw std::invalid_argument("two-phase: eval_samples must be >= 1");
  if (ex.accuracy_tolerance < 0.0) throw std::invalid_argument("two-phase: accuracy_tolerance must be >= 0");
  auto set1 = ex.phase1.problems.build(ex.base);
  auto set2 = ex.phase2.problems.build(ex.base);
  const auto base = make_base_policy(set1.merged_with(set2), ex.phase1.train.temperature);
  auto result = two_phase(base, set1, set2, ex.phase1.train, ex.phase2.train, ex.eval_samples, ex.eval_seed);
  TwoPhaseRun run{std::move(set1), std::move(set2), std::move(result), {}, {}, {}};
  run.d1 = summarize_dynamics(run.result.log1);
  run.d2 = summarize_dynamics(run.result.log2);
  auto& c = run.checks;
  if (!run.result.log1.records.empty()) c["phase1_length_increase"] = run.d1.len_final > run.d1.len_initial;
  if (!run.result.log1.records.empty() && !run.result.log2.records.empty())
    c["phase2_length_reduction"] = run.d2.len_final < run.d1.len_final;
  c["phase2_accuracy_preserved"] = run.result.eval2.accuracy >= run.result.eval1.accuracy - ex.accuracy_tolerance;
  return run;
}

struct SweepRun {
  ProblemSet set;
  std::vector<LambdaRun> runs;
  CheckMap checks;
};

inline SweepRun run_sweep(const SweepExperiment& ex) {
  if (ex.lambdas.empty()) throw std::invalid_argument("sweep: lambdas must be non-empty");
  SweepRun run;
  run.set = ex.stage.problems.build(ex.base);
  const auto base = make_base_policy(run.set, ex.stage.train.temperature);
  run.runs = lambda_sweep(base, run.set, ex.lambdas, ex.stage.train, ex.overflow_factor, ex.reduction_fraction);
  const bool unsolvable = std::none_of(run.set.problems.begin(), run.set.problems.end(),
                                       [](const Problem& p) { return p.solvable(); });
  const LambdaRun* one = nullptr;
  const LambdaRun* smallest = nullptr;
  for (const auto& r : run.runs) {
    if (r.lambda == 1.0) one = &r;
    else if (!smallest || r.lambda < smallest->lambda) smallest = &r;
  }
  if (unsolvable) {
    for (const auto& r : run.runs) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "overflow_flag_lambda_%g", r.lambda);
      run.checks[buf] = r.overflow == (r.lambda == 1.0);
    }
  } else if (one && smallest) {
    const int big = std::numeric_limits<int>::max();
    const int a = smallest->length_reduction_step.value_or(big);
    const int b = one->length_reduction_step.value_or(big);
    run.checks["lambda_below_one_reaches_reduction_first"] = a < b;
  }
  return run;
}

}  // namespace lengthlab
