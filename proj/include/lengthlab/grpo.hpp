#pragma once

// Group-relative advantages, the clipped GRPO loss with a KL penalty against
// a frozen reference, the Dr.GRPO-style normalization switches, and collapse
// monitoring.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lengthlab/core.hpp"
#include "lengthlab/gae_ppo.hpp"

namespace lengthlab {

struct GrpoConfig {
  double clip = 0.2;
  double kl_weight = 0.001;
  bool normalize_by_std = true;
  bool normalize_by_length = true;

  void validate() const {
    if (!(clip > 0.0)) throw std::invalid_argument("GrpoConfig: clip must be > 0");
    if (kl_weight < 0.0) throw std::invalid_argument("GrpoConfig: kl_weight must be >= 0");
  }
};

struct GroupSample {
  std::string problem_id;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;

  int size() const { return static_cast<int>(trajectories.size()); }

  void validate() const {
    if (trajectories.size() < 2) throw std::invalid_argument("GroupSample: G must be >= 2");
    if (rewards.size() != trajectories.size())
      throw std::invalid_argument("GroupSample: rewards not aligned with trajectories");
  }
};

struct GroupAdvantage {
  std::vector<double> advantages;
  double mean = 0.0;
  double stddev = 0.0;     // population standard deviation
  bool degenerate = false; // stddev == 0: every advantage is zero
};

inline GroupAdvantage group_advantage(std::span<const double> rewards, bool normalize_by_std = true) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantage: G must be >= 2");
  const double n = static_cast<double>(rewards.size());
  GroupAdvantage out;
  out.mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - out.mean) * (r - out.mean);
  out.stddev = std::sqrt(var / n);
  out.degenerate = out.stddev == 0.0;
  out.advantages.resize(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    if (out.degenerate)
      out.advantages[i] = 0.0;
    else
      out.advantages[i] = normalize_by_std ? (rewards[i] - out.mean) / out.stddev : rewards[i] - out.mean;
  }
  return out;
}

// Population stddev of N binary rewards with k ones.
inline double binary_group_stddev(int N, int k) {
  if (N < 1 || k < 0 || k > N) throw std::invalid_argument("binary_group_stddev: need 0 <= k <= N, N >= 1");
  const double p = static_cast<double>(k) / N;
  return std::sqrt(p * (1.0 - p));
}

// Advantage of a response with binary reward r in a group of N with k correct.
inline double closed_form_advantage(int N, int k, int r) {
  if (N < 1 || k < 0 || k > N) throw std::invalid_argument("closed_form_advantage: need 0 <= k <= N, N >= 1");
  if (r != 0 && r != 1) throw std::invalid_argument("closed_form_advantage: r must be 0 or 1");
  if (k == 0 || k == N) return 0.0;
  const double Nd = N, kd = k;
  return r == 1 ? std::sqrt((Nd - kd) / kd) : -std::sqrt(kd / (Nd - kd));
}

enum class KlReduction { kTokenMean, kTokenSum };

// Per-token k3 estimator of KL(new || ref): ref/new - log(ref/new) - 1.
inline double k3_term(double new_prob, double ref_prob) {
  if (!(new_prob > 0.0) || !(ref_prob > 0.0))
    throw std::invalid_argument("kl_estimate: probabilities must be positive");
  const double x = ref_prob / new_prob;
  return x - std::log(x) - 1.0;
}

// Mean over responses of the per-response token mean (or token sum).
inline double kl_estimate(const std::vector<std::vector<double>>& new_probs,
                          const std::vector<std::vector<double>>& ref_probs,
                          KlReduction reduction = KlReduction::kTokenMean) {
  if (new_probs.size() != ref_probs.size()) throw std::invalid_argument("kl_estimate: response count mismatch");
  if (new_probs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < new_probs.size(); ++i) {
    if (new_probs[i].size() != ref_probs[i].size() || new_probs[i].empty())
      throw std::invalid_argument("kl_estimate: token count mismatch");
    double s = 0.0;
    for (std::size_t t = 0; t < new_probs[i].size(); ++t) s += k3_term(new_probs[i][t], ref_probs[i][t]);
    if (reduction == KlReduction::kTokenMean) s /= static_cast<double>(new_probs[i].size());
    total += s;
  }
  return total / static_cast<double>(new_probs.size());
}

struct GrpoLoss {
  double policy_loss = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::vector<double> advantages;
  // -w_i * sum_t min(rho A, clip(rho) A) for each response, before the 1/G.
  std::vector<double> per_response;
};

// `ref_probs` may be empty, in which case the KL term is zero.
inline GrpoLoss grpo_loss(const GroupSample& group, const std::vector<std::vector<double>>& new_probs,
                          const GrpoConfig& cfg, const std::vector<std::vector<double>>& ref_probs = {}) {
  group.validate();
  cfg.validate();
  const std::size_t G = group.trajectories.size();
  if (new_probs.size() != G) throw std::invalid_argument("grpo_loss: new_probs count mismatch");
  GrpoLoss out;
  out.advantages = group_advantage(group.rewards, cfg.normalize_by_std).advantages;
  out.per_response.resize(G);
  double sum = 0.0;
  for (std::size_t i = 0; i < G; ++i) {
    const auto& traj = group.trajectories[i];
    const std::size_t T = traj.tokens.size();
    if (new_probs[i].size() != T || traj.old_probs.size() != T || T == 0)
      throw std::invalid_argument("grpo_loss: token count mismatch");
    const double A = out.advantages[i];
    double s = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      if (!(traj.old_probs[t] > 0.0)) throw std::invalid_argument("grpo_loss: zero old probability");
      const double rho = new_probs[i][t] / traj.old_probs[t];
      s += clipped_ratio_weight(rho, A, cfg.clip) * A;
    }
    const double w = cfg.normalize_by_length ? 1.0 / static_cast<double>(T) : 1.0;
    out.per_response[i] = -w * s;
    sum += out.per_response[i];
  }
  out.policy_loss = sum / static_cast<double>(G);
  if (!ref_probs.empty()) out.kl = kl_estimate(new_probs, ref_probs, KlReduction::kTokenMean);
  out.total = out.policy_loss + cfg.kl_weight * out.kl;
  return out;
}

// Per-step summary of the groups in one training step.
struct GroupStepStats {
  int step = 0;
  int groups = 0;
  int all_correct = 0;   // sigma = 0 with k = N
  int all_wrong = 0;     // sigma = 0 with k = 0
  double policy_loss = 0.0;
  double kl = 0.0;
  double kl_weight = 0.0;
};

struct CollapseReport {
  std::vector<double> all_correct_rate;
  std::vector<double> all_wrong_rate;
  std::vector<double> zero_advantage_rate;
  std::vector<bool> kl_dominated;  // |policy_loss| < beta * kl at that step
  bool kl_dominance = false;       // some run of `window` consecutive dominated steps
  int first_dominance_step = -1;   // step at which that run completes
};

inline CollapseReport collapse_monitor(std::span<const GroupStepStats> history, int window = 5) {
  if (history.empty()) throw std::invalid_argument("collapse_monitor: empty history");
  if (window < 1) throw std::invalid_argument("collapse_monitor: window must be >= 1");
  CollapseReport rep;
  int run = 0;
  for (const auto& h : history) {
    const double g = std::max(h.groups, 1);
    rep.all_correct_rate.push_back(h.all_correct / g);
    rep.all_wrong_rate.push_back(h.all_wrong / g);
    rep.zero_advantage_rate.push_back((h.all_correct + h.all_wrong) / g);
    const bool dominated = std::abs(h.policy_loss) < h.kl_weight * h.kl;
    rep.kl_dominated.push_back(dominated);
    run = dominated ? run + 1 : 0;
    if (run >= window && !rep.kl_dominance) {
      rep.kl_dominance = true;
      rep.first_dominance_step = h.step;
    }
  }
  return rep;
}

}  // namespace lengthlab
