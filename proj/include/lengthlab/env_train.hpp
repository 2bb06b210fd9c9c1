#pragma once

// Problem-set construction, a format-following base policy, PPO and GRPO
// training loops over tabular logits, the two-phase procedure, and the
// lambda sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lengthlab/core.hpp"
#include "lengthlab/gae_ppo.hpp"
#include "lengthlab/grpo.hpp"
#include "lengthlab/rng.hpp"

namespace lengthlab {

enum class Algorithm { kPpo, kGrpo };
enum class DifficultyClass { kUnsolvable, kOccasional, kFull };

inline const char* to_string(DifficultyClass c) {
  switch (c) {
    case DifficultyClass::kUnsolvable: return "unsolvable";
    case DifficultyClass::kOccasional: return "occasional";
    case DifficultyClass::kFull: return "full";
  }
  return "?";
}

inline const char* to_string(Algorithm a) { return a == Algorithm::kPpo ? "ppo" : "grpo"; }

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProblemSetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape of the pretrained starting policy. The policy answers after a few
// filler tokens (answer hazard rising with position), almost never emits the
// terminal token without an answer right before it, and prefers the correct
// answer with log-odds `skill` that depends on the problem.
struct BaseModelConfig {
  int max_len = 32;
  double hazard_center = 5.0;
  double hazard_slope = 0.8;
  double format_logprob = -16.0;  // log-weight of the terminal token outside answer contexts
  double stop_prob = 0.9;         // P(terminal | last token is an answer)
  double occasional_skill = -1.0;
  double full_skill = 4.0;
  double skill_jitter = 0.3;

  void validate() const {
    if (max_len < 2) throw std::invalid_argument("BaseModelConfig: max_len must be >= 2");
    if (!(stop_prob > 0.0 && stop_prob < 1.0)) throw std::invalid_argument("BaseModelConfig: stop_prob must be in (0,1)");
    if (!(hazard_slope >= 0.0)) throw std::invalid_argument("BaseModelConfig: hazard_slope must be >= 0");
  }
};

struct ProblemSetSpec {
  int n_unsolvable = 0;
  int n_occasional = 0;
  int n_full = 0;
};

struct ProblemSet {
  Vocab vocab = Vocab::standard();
  BaseModelConfig base;
  std::vector<Problem> problems;
  std::vector<DifficultyClass> classes;
  std::vector<double> skill;          // base-policy log-odds of the correct answer
  std::vector<double> measured_rate;  // per-sample solve rate of the base policy

  std::size_t size() const { return problems.size(); }

  ProblemSet merged_with(const ProblemSet& other) const {
    if (!(other.vocab == vocab)) throw std::invalid_argument("ProblemSet: vocabularies differ");
    ProblemSet out = *this;
    for (std::size_t i = 0; i < other.size(); ++i) {
      bool shared = false;
      for (std::size_t j = 0; j < size(); ++j) {
        if (problems[j].id != other.problems[i].id) continue;
        if (!(problems[j] == other.problems[i]) || skill[j] != other.skill[i])
          throw std::invalid_argument("ProblemSet: conflicting definitions of " + problems[j].id);
        shared = true;
      }
      if (shared) continue;
      out.problems.push_back(other.problems[i]);
      out.classes.push_back(other.classes[i]);
      out.skill.push_back(other.skill[i]);
      out.measured_rate.push_back(other.measured_rate[i]);
    }
    return out;
  }
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Builds the starting policy over `set` (context = position + last token,
// shared table plus per-problem tables). Logits are stored pre-multiplied by
// `temperature` so sampling at that temperature reproduces the designed
// distribution.
inline TabularSoftmaxPolicy make_base_policy(const ProblemSet& set, double temperature) {
  const auto& v = set.vocab;
  const auto& b = set.base;
  b.validate();
  const int K = v.size();
  const auto n_f = static_cast<double>(v.filler_tokens().size());
  const auto n_a = static_cast<double>(v.answer_tokens().size());
  TabularSoftmaxPolicy pol(K, temperature, 1, PolicySharing::kSharedPlusPerProblem);

  int max_len = b.max_len;
  for (const auto& p : set.problems) max_len = std::max(max_len, p.max_len);

  std::vector<std::vector<TokenId>> histories{{}};
  for (TokenId t = 0; t < K; ++t)
    if (!v.is_terminal(t)) histories.push_back({t});

  for (int pos = 0; pos < max_len; ++pos) {
    const double h = logistic(b.hazard_slope * (pos - b.hazard_center));
    for (const auto& hist : histories) {
      if (pos == 0 && !hist.empty()) continue;
      if (pos > 0 && hist.empty()) continue;
      std::vector<double> lp(static_cast<std::size_t>(K), 0.0);
      const bool after_answer = !hist.empty() && v.is_answer(hist[0]);
      for (TokenId t = 0; t < K; ++t) {
        double w;
        if (after_answer) {
          w = v.is_terminal(t) ? std::log(b.stop_prob) : std::log((1.0 - b.stop_prob) / (K - 1));
        } else if (v.is_terminal(t)) {
          w = b.format_logprob;
        } else if (v.is_answer(t)) {
          w = n_f > 0 ? std::log(h / n_a) : 0.0;
        } else {
          w = std::log((1.0 - h) / n_f);
        }
        lp[static_cast<std::size_t>(t)] = temperature * w;
      }
      ContextKey key{"", pos, hist};
      pol.set_entry(key, std::move(lp));
    }
  }

  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& p = set.problems[i];
    if (!p.correct_answer || set.skill[i] == 0.0) continue;
    std::vector<double> bump(static_cast<std::size_t>(K), 0.0);
    for (TokenId a : v.answer_tokens())
      bump[static_cast<std::size_t>(a)] = temperature * (a == *p.correct_answer ? 0.5 : -0.5) * set.skill[i];
    for (int pos = 0; pos < p.max_len; ++pos)
      for (const auto& hist : histories) {
        if ((pos == 0) != hist.empty()) continue;
        pol.set_entry(ContextKey{p.id, pos, hist}, bump);
      }
  }
  return pol;
}

inline bool class_rate_ok(DifficultyClass c, double rate) {
  switch (c) {
    case DifficultyClass::kUnsolvable: return rate == 0.0;
    case DifficultyClass::kOccasional: return rate > 0.0 && rate < 0.5;
    case DifficultyClass::kFull: return rate >= 0.9;
  }
  return false;
}

// Unsolvable problems get no correct answer. Occasional and full problems get
// a random correct answer token and a base-policy skill; each class is then
// validated by Monte Carlo under the base policy, redrawing the skill jitter
// on failure.
inline ProblemSet make_problem_set(const ProblemSetSpec& spec, std::uint64_t seed,
                                   const BaseModelConfig& base = {}, const std::string& id_prefix = "",
                                   int validation_samples = 2000, int max_retries = 20) {
  if (spec.n_unsolvable < 0 || spec.n_occasional < 0 || spec.n_full < 0)
    throw std::invalid_argument("make_problem_set: counts must be >= 0");
  base.validate();
  ProblemSet set;
  set.base = base;
  Rng rng(derive_seed(seed, {0x5e7}));
  const auto& answers = set.vocab.answer_tokens();

  auto add = [&](DifficultyClass c, int idx) {
    static constexpr const char* tag[] = {"u", "o", "f"};
    Problem p;
    p.id = id_prefix + tag[static_cast<int>(c)] + std::to_string(idx);
    p.max_len = base.max_len;
    double skill = 0.0;
    if (c != DifficultyClass::kUnsolvable) {
      p.correct_answer = answers[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(answers.size()) - 1))];
      skill = (c == DifficultyClass::kOccasional ? base.occasional_skill : base.full_skill) +
              rng.uniform(-base.skill_jitter, base.skill_jitter);
    }
    p.validate(set.vocab);
    set.problems.push_back(p);
    set.classes.push_back(c);
    set.skill.push_back(skill);
    set.measured_rate.push_back(0.0);
  };
  for (int i = 0; i < spec.n_unsolvable; ++i) add(DifficultyClass::kUnsolvable, i);
  for (int i = 0; i < spec.n_occasional; ++i) add(DifficultyClass::kOccasional, i);
  for (int i = 0; i < spec.n_full; ++i) add(DifficultyClass::kFull, i);

  for (std::size_t i = 0; i < set.size(); ++i) {
    bool ok = false;
    for (int attempt = 0; attempt <= max_retries && !ok; ++attempt) {
      if (attempt > 0) {
        const double center = set.classes[i] == DifficultyClass::kOccasional ? base.occasional_skill : base.full_skill;
        set.skill[i] = center + rng.uniform(-base.skill_jitter, base.skill_jitter);
      }
      ProblemSet single = set;
      single.problems = {set.problems[i]};
      single.classes = {set.classes[i]};
      single.skill = {set.skill[i]};
      single.measured_rate = {0.0};
      const auto pol = make_base_policy(single, 1.0);
      const auto est = estimate_pa(pol, set.problems[i], set.vocab, validation_samples,
                                   derive_seed(seed, {0xa11, i, static_cast<std::uint64_t>(attempt)}));
      set.measured_rate[i] = est.per_sample_rate;
      ok = class_rate_ok(set.classes[i], est.per_sample_rate);
    }
    if (!ok)
      throw ProblemSetError("make_problem_set: problem " + set.problems[i].id + " did not reach class " +
                            to_string(set.classes[i]) + " (measured " + std::to_string(set.measured_rate[i]) + ")");
  }
  return set;
}

// Per-(problem, position) value estimates with V(s_T) = 0 implied.
class ValueTable {
 public:
  double get(const std::string& problem, int position) const {
    auto it = values_.find({problem, position});
    return it == values_.end() ? 0.0 : it->second;
  }
  void set(const std::string& problem, int position, double v) { values_[{problem, position}] = v; }
  std::vector<double> values_for(const std::string& problem, int T) const {
    std::vector<double> out(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) out[static_cast<std::size_t>(t)] = get(problem, t);
    return out;
  }
  const std::map<std::pair<std::string, int>, double>& table() const { return values_; }
  bool operator==(const ValueTable&) const = default;

 private:
  std::map<std::pair<std::string, int>, double> values_;
};

struct TrainConfig {
  Algorithm algorithm = Algorithm::kPpo;
  GaeConfig gae;
  GrpoConfig grpo;
  int samples_per_problem = 8;
  double actor_lr = 1.0;
  double critic_lr = 0.5;
  double value_kl_weight = 1.0;  // pull of the critic toward its zero initialization
  double temperature = 0.6;
  int steps = 300;
  std::uint64_t seed = 0;
  double step_penalty = 0.0;
  KlReduction kl_reduction = KlReduction::kTokenMean;

  RewardScheme reward_scheme() const {
    auto s = algorithm == Algorithm::kPpo ? RewardScheme::ppo_ternary() : RewardScheme::grpo_binary();
    s.step_penalty = step_penalty;
    return s;
  }

  void validate() const {
    gae.validate();
    grpo.validate();
    if (samples_per_problem < 1) throw std::invalid_argument("TrainConfig: samples_per_problem must be >= 1");
    if (algorithm == Algorithm::kGrpo && samples_per_problem < 2)
      throw std::invalid_argument("TrainConfig: GRPO needs samples_per_problem >= 2");
    if (actor_lr < 0.0 || critic_lr < 0.0) throw std::invalid_argument("TrainConfig: learning rates must be >= 0");
    if (value_kl_weight < 0.0) throw std::invalid_argument("TrainConfig: value_kl_weight must be >= 0");
    if (!(temperature > 0.0)) throw std::invalid_argument("TrainConfig: temperature must be > 0");
    if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
    if (step_penalty > 0.0) throw std::invalid_argument("TrainConfig: step_penalty must be <= 0");
  }
};

struct StepRecord {
  int step = 0;
  double mean_reward = 0.0;
  double accuracy = 0.0;
  double mean_len = 0.0;
  int min_len = 0;
  int max_len = 0;
  double policy_loss = 0.0;
  double value_loss = 0.0;  // PPO critic loss
  double kl = 0.0;          // GRPO KL estimate
  double S = 0.0;           // PPO batch mean of S
  double adv_mean = 0.0;
  double adv_std = 0.0;
  double adv_abs_max = 0.0;
  double max_abs_target = 0.0;
  double max_abs_reward = 0.0;
  double zero_advantage_rate = 0.0;
  double all_correct_rate = 0.0;
  double all_wrong_rate = 0.0;
  double policy_grad_norm = 0.0;
};

struct GroupRow {
  int step = 0;
  std::string group_id;
  int k = 0;
  int N = 0;
  double advantage_correct = 0.0;
  double advantage_wrong = 0.0;
  double policy_loss = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct TrainLog {
  Algorithm algorithm = Algorithm::kPpo;
  std::vector<StepRecord> records;
  std::vector<GroupRow> groups;
  std::vector<GroupStepStats> group_stats;

  bool operator==(const TrainLog& o) const;
};

inline bool operator==(const StepRecord& a, const StepRecord& b) {
  return a.step == b.step && a.mean_reward == b.mean_reward && a.accuracy == b.accuracy &&
         a.mean_len == b.mean_len && a.min_len == b.min_len && a.max_len == b.max_len &&
         a.policy_loss == b.policy_loss && a.value_loss == b.value_loss && a.kl == b.kl && a.S == b.S &&
         a.adv_mean == b.adv_mean && a.adv_std == b.adv_std && a.adv_abs_max == b.adv_abs_max &&
         a.max_abs_target == b.max_abs_target && a.max_abs_reward == b.max_abs_reward &&
         a.zero_advantage_rate == b.zero_advantage_rate && a.all_correct_rate == b.all_correct_rate &&
         a.all_wrong_rate == b.all_wrong_rate && a.policy_grad_norm == b.policy_grad_norm;
}

inline bool TrainLog::operator==(const TrainLog& o) const {
  if (algorithm != o.algorithm || records.size() != o.records.size() || groups.size() != o.groups.size())
    return false;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!(records[i] == o.records[i])) return false;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto &a = groups[i], &b = o.groups[i];
    if (a.step != b.step || a.group_id != b.group_id || a.k != b.k || a.N != b.N ||
        a.advantage_correct != b.advantage_correct || a.advantage_wrong != b.advantage_wrong ||
        a.policy_loss != b.policy_loss || a.kl != b.kl || a.total != b.total)
      return false;
  }
  return true;
}

using LogitDelta = std::map<ContextKey, std::vector<double>>;

inline void accumulate(LogitDelta& acc, const TabularSoftmaxPolicy& pol, std::string_view problem,
                       std::span<const TokenId> prefix, std::span<const double> g, double scale) {
  for (auto& key : pol.keys_for(problem, prefix)) {
    auto [it, inserted] = acc.try_emplace(std::move(key));
    if (inserted) it->second.assign(g.size(), 0.0);
    for (std::size_t j = 0; j < g.size(); ++j) it->second[j] += scale * g[j];
  }
}

inline double delta_norm(const LogitDelta& d) {
  double s = 0.0;
  for (const auto& [k, v] : d)
    for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline void apply_delta(TabularSoftmaxPolicy& pol, const LogitDelta& d, double lr) {
  if (lr == 0.0) return;
  std::vector<double> scaled;
  for (const auto& [k, v] : d) {
    scaled.assign(v.size(), 0.0);
    for (std::size_t j = 0; j < v.size(); ++j) scaled[j] = lr * v[j];
    pol.add_to_entry(k, scaled);
  }
}

struct SampledBatch {
  std::vector<std::size_t> problem_index;
  std::vector<Trajectory> trajectories;
};

inline SampledBatch sample_batch(const TabularSoftmaxPolicy& pol, const ProblemSet& set, const TrainConfig& cfg,
                                 int step) {
  SampledBatch b;
  const auto scheme = cfg.reward_scheme();
  for (std::size_t p = 0; p < set.size(); ++p)
    for (int i = 0; i < cfg.samples_per_problem; ++i) {
      auto traj = sample_trajectory(pol, set.problems[p], set.vocab,
                                    derive_seed(cfg.seed, {static_cast<std::uint64_t>(step), p,
                                                           static_cast<std::uint64_t>(i)}));
      traj.reward = score_response(traj, set.problems[p], set.vocab, scheme);
      b.problem_index.push_back(p);
      b.trajectories.push_back(std::move(traj));
    }
  return b;
}

inline void fill_length_stats(StepRecord& rec, const SampledBatch& b, const ProblemSet& set) {
  if (b.trajectories.empty()) return;
  double len = 0.0, reward = 0.0, correct = 0.0;
  rec.min_len = b.trajectories.front().length();
  rec.max_len = rec.min_len;
  for (std::size_t i = 0; i < b.trajectories.size(); ++i) {
    const auto& t = b.trajectories[i];
    len += t.length();
    reward += t.reward;
    rec.max_abs_reward = std::max(rec.max_abs_reward, std::abs(t.reward));
    rec.min_len = std::min(rec.min_len, t.length());
    rec.max_len = std::max(rec.max_len, t.length());
    if (classify_response(t, set.problems[b.problem_index[i]], set.vocab) == ResponseOutcome::kCorrect)
      correct += 1.0;
  }
  const double n = static_cast<double>(b.trajectories.size());
  rec.mean_len = len / n;
  rec.mean_reward = reward / n;
  rec.accuracy = correct / n;
}

inline void check_finite(const StepRecord& r) {
  for (double x : {r.policy_loss, r.value_loss, r.kl, r.S, r.max_abs_target, r.policy_grad_norm})
    if (!std::isfinite(x))
      throw TrainingDiverged("training diverged at step " + std::to_string(r.step) +
                             ": non-finite loss or gradient (policy_loss=" + std::to_string(r.policy_loss) +
                             ", value_loss=" + std::to_string(r.value_loss) + ")");
}

struct PpoStepOutput {
  StepRecord record;
  LogitDelta policy_gradient;  // ascent direction on the clipped surrogate
};

// One PPO step: sample, score, GAE from the current critic, one gradient step
// on the clipped surrogate at theta_old, one critic step.
inline PpoStepOutput ppo_step(TabularSoftmaxPolicy& pol, ValueTable& values, const ProblemSet& set,
                              const TrainConfig& cfg, int step) {
  PpoStepOutput out;
  auto& rec = out.record;
  rec.step = step;
  const auto batch = sample_batch(pol, set, cfg, step);
  fill_length_stats(rec, batch, set);
  const double B = static_cast<double>(batch.trajectories.size());

  std::map<std::pair<std::string, int>, std::pair<double, int>> target_acc;
  double adv_sum = 0.0, adv_sq = 0.0, adv_n = 0.0;
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    const auto& traj = batch.trajectories[i];
    const auto& problem = set.problems[batch.problem_index[i]];
    const int T = traj.length();
    const auto v = values.values_for(problem.id, T);
    const auto rep = analyze_trajectory(traj, v, cfg.gae);
    rec.policy_loss += rep.L / B;
    rec.S += rep.S / B;
    const auto targets = value_targets(traj, v, rep.advantages);
    const std::span<const TokenId> tokens(traj.tokens);
    for (int t = 0; t < T; ++t) {
      const auto ut = static_cast<std::size_t>(t);
      const double A = rep.advantages[ut];
      adv_sum += A;
      adv_sq += A * A;
      adv_n += 1.0;
      rec.adv_abs_max = std::max(rec.adv_abs_max, std::abs(A));
      rec.max_abs_target = std::max(rec.max_abs_target, std::abs(targets[ut]));
      auto& acc = target_acc[{problem.id, t}];
      acc.first += targets[ut];
      acc.second += 1;
      // rho = 1 at theta_old, so d(alpha A)/dz = slope * A * (e_k - pi) / temperature.
      const double slope = clipped_ratio_slope(1.0, A, cfg.gae.clip);
      if (slope == 0.0 || A == 0.0) continue;
      const auto prefix = tokens.first(ut);
      const auto g = pol.log_prob_gradient(problem.id, prefix, tokens[ut]);
      accumulate(out.policy_gradient, pol, problem.id, prefix, g, slope * A / (B * T));
    }
  }
  if (adv_n > 0) {
    rec.adv_mean = adv_sum / adv_n;
    rec.adv_std = std::sqrt(std::max(0.0, adv_sq / adv_n - rec.adv_mean * rec.adv_mean));
  }
  rec.policy_grad_norm = delta_norm(out.policy_gradient);

  double vloss = 0.0;
  for (const auto& [key, acc] : target_acc) {
    const double mean_target = acc.first / acc.second;
    const double old = values.get(key.first, key.second);
    vloss += 0.5 * (old - mean_target) * (old - mean_target);
    if (cfg.critic_lr > 0.0) {
      const double grad = (old - mean_target) + cfg.value_kl_weight * old;
      values.set(key.first, key.second, old - cfg.critic_lr * grad);
    }
  }
  rec.value_loss = target_acc.empty() ? 0.0 : vloss / static_cast<double>(target_acc.size());
  check_finite(rec);
  apply_delta(pol, out.policy_gradient, cfg.actor_lr);
  return out;
}

inline TrainLog train_ppo(TabularSoftmaxPolicy& pol, ValueTable& values, const ProblemSet& set,
                          const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.algorithm != Algorithm::kPpo) throw std::invalid_argument("train_ppo: config algorithm is not PPO");
  pol.set_temperature(cfg.temperature);
  TrainLog log;
  log.algorithm = Algorithm::kPpo;
  for (int s = 0; s < cfg.steps; ++s) log.records.push_back(ppo_step(pol, values, set, cfg, s + 1).record);
  return log;
}

struct GrpoStepOutput {
  StepRecord record;
  LogitDelta policy_gradient;  // descent direction of the policy term (negated gradient)
  LogitDelta kl_gradient;      // descent direction of beta * KL
  std::vector<GroupRow> groups;
  GroupStepStats stats;
};

inline GrpoStepOutput grpo_step(TabularSoftmaxPolicy& pol, const TabularSoftmaxPolicy& reference,
                                const ProblemSet& set, const TrainConfig& cfg, int step) {
  GrpoStepOutput out;
  auto& rec = out.record;
  rec.step = step;
  const auto batch = sample_batch(pol, set, cfg, step);
  fill_length_stats(rec, batch, set);
  const double P = static_cast<double>(set.size());
  const int G = cfg.samples_per_problem;
  const double beta = cfg.grpo.kl_weight;

  out.stats.step = step;
  out.stats.groups = static_cast<int>(set.size());
  out.stats.kl_weight = beta;
  double adv_sum = 0.0, adv_sq = 0.0, adv_n = 0.0;
  for (std::size_t p = 0; p < set.size(); ++p) {
    const auto& problem = set.problems[p];
    GroupSample group;
    group.problem_id = problem.id;
    std::vector<std::vector<double>> new_probs, ref_probs;
    for (int i = 0; i < G; ++i) {
      const auto& traj = batch.trajectories[p * static_cast<std::size_t>(G) + static_cast<std::size_t>(i)];
      group.trajectories.push_back(traj);
      group.rewards.push_back(traj.reward);
      new_probs.push_back(traj.old_probs);
      std::vector<double> rp;
      const std::span<const TokenId> tokens(traj.tokens);
      for (std::size_t t = 0; t < tokens.size(); ++t)
        rp.push_back(reference.probs(problem.id, tokens.first(t))[static_cast<std::size_t>(tokens[t])]);
      ref_probs.push_back(std::move(rp));
    }
    const auto loss = grpo_loss(group, new_probs, cfg.grpo, ref_probs);
    const double kl = kl_estimate(new_probs, ref_probs, cfg.kl_reduction);
    rec.policy_loss += loss.policy_loss / P;
    rec.kl += kl / P;

    int k = 0;
    GroupRow row;
    row.step = step;
    row.group_id = problem.id;
    row.N = G;
    for (int i = 0; i < G; ++i) {
      const auto& traj = group.trajectories[static_cast<std::size_t>(i)];
      const bool correct = classify_response(traj, problem, set.vocab) == ResponseOutcome::kCorrect;
      const double A = loss.advantages[static_cast<std::size_t>(i)];
      if (correct) {
        ++k;
        row.advantage_correct = A;
      } else {
        row.advantage_wrong = A;
      }
      adv_sum += A;
      adv_sq += A * A;
      adv_n += 1.0;
      rec.adv_abs_max = std::max(rec.adv_abs_max, std::abs(A));
      const double T = traj.length();
      const double w = cfg.grpo.normalize_by_length ? 1.0 / T : 1.0;
      const std::span<const TokenId> tokens(traj.tokens);
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto prefix = tokens.first(t);
        const double slope = clipped_ratio_slope(1.0, A, cfg.grpo.clip);
        const double new_p = new_probs[static_cast<std::size_t>(i)][t];
        const double ref_p = ref_probs[static_cast<std::size_t>(i)][t];
        const double kl_coef = 1.0 - ref_p / new_p;  // d k3 / d log pi
        if ((slope == 0.0 || A == 0.0) && (beta == 0.0 || kl_coef == 0.0)) continue;
        const auto g = pol.log_prob_gradient(problem.id, prefix, tokens[t]);
        if (slope != 0.0 && A != 0.0) accumulate(out.policy_gradient, pol, problem.id, prefix, g, slope * A * w / (P * G));
        if (beta != 0.0 && kl_coef != 0.0) {
          const double kl_w = cfg.kl_reduction == KlReduction::kTokenMean ? 1.0 / T : 1.0;
          accumulate(out.kl_gradient, pol, problem.id, prefix, g, -beta * kl_coef * kl_w / (P * G));
        }
      }
    }
    row.k = k;
    if (k == 0) ++out.stats.all_wrong;
    if (k == G) ++out.stats.all_correct;
    row.policy_loss = loss.policy_loss;
    row.kl = kl;
    row.total = loss.policy_loss + beta * kl;
    out.groups.push_back(row);
  }
  if (adv_n > 0) {
    rec.adv_mean = adv_sum / adv_n;
    rec.adv_std = std::sqrt(std::max(0.0, adv_sq / adv_n - rec.adv_mean * rec.adv_mean));
  }
  rec.all_correct_rate = out.stats.all_correct / P;
  rec.all_wrong_rate = out.stats.all_wrong / P;
  rec.zero_advantage_rate = rec.all_correct_rate + rec.all_wrong_rate;
  rec.policy_grad_norm = delta_norm(out.policy_gradient);
  out.stats.policy_loss = rec.policy_loss;
  out.stats.kl = rec.kl;
  check_finite(rec);
  apply_delta(pol, out.policy_gradient, cfg.actor_lr);
  apply_delta(pol, out.kl_gradient, cfg.actor_lr);
  return out;
}

// `reference` defaults to a snapshot of the starting policy.
inline TrainLog train_grpo(TabularSoftmaxPolicy& pol, const ProblemSet& set, const TrainConfig& cfg,
                           const TabularSoftmaxPolicy* reference = nullptr) {
  cfg.validate();
  if (cfg.algorithm != Algorithm::kGrpo) throw std::invalid_argument("train_grpo: config algorithm is not GRPO");
  pol.set_temperature(cfg.temperature);
  TabularSoftmaxPolicy ref = reference ? *reference : pol;
  ref.set_temperature(cfg.temperature);
  TrainLog log;
  log.algorithm = Algorithm::kGrpo;
  for (int s = 0; s < cfg.steps; ++s) {
    auto out = grpo_step(pol, ref, set, cfg, s + 1);
    log.records.push_back(out.record);
    log.group_stats.push_back(out.stats);
    for (auto& g : out.groups) log.groups.push_back(std::move(g));
  }
  return log;
}

inline TrainLog train(TabularSoftmaxPolicy& pol, ValueTable& values, const ProblemSet& set,
                      const TrainConfig& cfg, const TabularSoftmaxPolicy* reference = nullptr) {
  return cfg.algorithm == Algorithm::kPpo ? train_ppo(pol, values, set, cfg)
                                          : train_grpo(pol, set, cfg, reference);
}

// ---- dynamics statistics -------------------------------------------------

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
  double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2));
  return 0.5 * (lo + hi);
}

using RecordField = std::function<double(const StepRecord&)>;

inline double field_mean_len(const StepRecord& r) { return r.mean_len; }
inline double field_min_len(const StepRecord& r) { return r.min_len; }
inline double field_accuracy(const StepRecord& r) { return r.accuracy; }

// Median of `field` over the `window` records ending at 1-based step `end_step`.
inline double window_median(const TrainLog& log, const RecordField& field, int end_step, int window = 20) {
  if (end_step < 1 || end_step > static_cast<int>(log.records.size()))
    throw std::out_of_range("window_median: end_step out of range");
  const int begin = std::max(0, end_step - window);
  std::vector<double> v;
  for (int i = begin; i < end_step; ++i) v.push_back(field(log.records[static_cast<std::size_t>(i)]));
  return median(std::move(v));
}

inline double window_mean(const TrainLog& log, const RecordField& field, int end_step, int window = 20) {
  if (end_step < 1 || end_step > static_cast<int>(log.records.size()))
    throw std::out_of_range("window_mean: end_step out of range");
  const int begin = std::max(0, end_step - window);
  double s = 0.0;
  for (int i = begin; i < end_step; ++i) s += field(log.records[static_cast<std::size_t>(i)]);
  return s / (end_step - begin);
}

// Windowed-median series, defined from step `window` onward (index 0 = step window).
inline std::vector<double> window_median_series(const TrainLog& log, const RecordField& field, int window = 20) {
  std::vector<double> out;
  for (int s = window; s <= static_cast<int>(log.records.size()); ++s) out.push_back(window_median(log, field, s, window));
  return out;
}

// First step at which the windowed-median length is at most (1 - fraction)
// of the first window's median.
inline std::optional<int> length_reduction_step(const TrainLog& log, double fraction = 0.25, int window = 20) {
  if (static_cast<int>(log.records.size()) < window) return std::nullopt;
  const double initial = window_median(log, field_mean_len, window, window);
  for (int s = window; s <= static_cast<int>(log.records.size()); ++s)
    if (window_median(log, field_mean_len, s, window) <= (1.0 - fraction) * initial) return s;
  return std::nullopt;
}

struct PolicyEval {
  double accuracy = 0.0;
  double mean_len = 0.0;
  double mean_reward = 0.0;
};

inline PolicyEval evaluate_policy(const TabularSoftmaxPolicy& pol, const ProblemSet& set, int samples_per_problem,
                                  std::uint64_t seed, const RewardScheme& scheme = RewardScheme::ppo_ternary()) {
  PolicyEval e;
  double n = 0.0;
  for (std::size_t p = 0; p < set.size(); ++p)
    for (int i = 0; i < samples_per_problem; ++i) {
      const auto traj = sample_trajectory(pol, set.problems[p], set.vocab,
                                          derive_seed(seed, {0xe7a1, p, static_cast<std::uint64_t>(i)}));
      e.mean_len += traj.length();
      e.mean_reward += score_response(traj, set.problems[p], set.vocab, scheme);
      if (classify_response(traj, set.problems[p], set.vocab) == ResponseOutcome::kCorrect) e.accuracy += 1.0;
      n += 1.0;
    }
  if (n > 0) {
    e.accuracy /= n;
    e.mean_len /= n;
    e.mean_reward /= n;
  }
  return e;
}

// ---- two-phase procedure -------------------------------------------------

struct TwoPhaseResult {
  TrainLog log1;
  TrainLog log2;
  TabularSoftmaxPolicy policy1;
  TabularSoftmaxPolicy policy2;
  PolicyEval eval1;  // phase-1 policy on the phase-2 problems
  PolicyEval eval2;  // phase-2 policy on the phase-2 problems
};

inline TwoPhaseResult two_phase(const TabularSoftmaxPolicy& start, const ProblemSet& phase1, const ProblemSet& phase2,
                                const TrainConfig& cfg1, const TrainConfig& cfg2, int eval_samples,
                                std::uint64_t eval_seed) {
  TabularSoftmaxPolicy pol = start;
  ValueTable values;
  TrainLog log1 = train(pol, values, phase1, cfg1);
  TabularSoftmaxPolicy policy1 = pol;
  TrainLog log2 = train(pol, values, phase2, cfg2);
  TwoPhaseResult r{std::move(log1), std::move(log2), policy1, pol, {}, {}};
  r.eval1 = evaluate_policy(r.policy1, phase2, eval_samples, eval_seed);
  r.eval2 = evaluate_policy(r.policy2, phase2, eval_samples, eval_seed);
  return r;
}

// ---- lambda sweep --------------------------------------------------------

struct LambdaRun {
  double lambda = 0.0;
  TrainLog log;
  bool overflow = false;
  int overflow_step = -1;
  double peak_abs_target = 0.0;
  std::optional<int> length_reduction_step;
};

// Overflow: the critic target magnitude exceeds `overflow_factor` times the
// largest reward magnitude seen so far in the run.
inline std::vector<LambdaRun> lambda_sweep(const TabularSoftmaxPolicy& start, const ProblemSet& set,
                                           const std::vector<double>& lambdas, TrainConfig cfg,
                                           double overflow_factor = 10.0, double reduction_fraction = 0.25) {
  if (cfg.algorithm != Algorithm::kPpo) throw std::invalid_argument("lambda_sweep: PPO only");
  std::vector<LambdaRun> runs;
  for (double lam : lambdas) {
    if (!(lam > 0.0 && lam <= 1.0)) throw std::invalid_argument("lambda_sweep: lambda must be in (0,1]");
    cfg.gae.lambda = lam;
    TabularSoftmaxPolicy pol = start;
    ValueTable values;
    LambdaRun run;
    run.lambda = lam;
    run.log = train_ppo(pol, values, set, cfg);
    double max_reward = 0.0;
    for (const auto& r : run.log.records) {
      max_reward = std::max(max_reward, r.max_abs_reward);
      run.peak_abs_target = std::max(run.peak_abs_target, r.max_abs_target);
      if (!run.overflow && r.max_abs_target > overflow_factor * max_reward) {
        run.overflow = true;
        run.overflow_step = r.step;
      }
    }
    run.length_reduction_step = length_reduction_step(run.log, reduction_fraction);
    runs.push_back(std::move(run));
  }
  return runs;
}

}  // namespace lengthlab
