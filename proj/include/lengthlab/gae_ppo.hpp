#pragma once

// TD errors, generalized advantage estimation, the clipped PPO loss and the
// unweighted mean advantage S, plus the closed-form predictions and bounds
// that relate S and L to the terminal residual R.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "lengthlab/core.hpp"

namespace lengthlab {

struct GaeConfig {
  double gamma = 1.0;
  double lambda = 0.95;
  double clip = 0.2;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("GaeConfig: gamma must be in (0,1]");
    if (!(lambda > 0.0 && lambda <= 1.0)) throw std::invalid_argument("GaeConfig: lambda must be in (0,1]");
    if (!(clip > 0.0)) throw std::invalid_argument("GaeConfig: clip must be > 0");
  }
};

// delta_t = r_t + gamma * V(s_{t+1}) - V(s_t), with V(s_T) = 0.
inline std::vector<double> td_errors(std::span<const double> rewards,
                                     std::span<const double> values, double gamma = 1.0) {
  if (rewards.size() != values.size())
    throw std::invalid_argument("td_errors: rewards and values differ in length");
  const std::size_t n = rewards.size();
  std::vector<double> delta(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double next = (t + 1 < n) ? values[t + 1] : 0.0;
    delta[t] = rewards[t] + gamma * next - values[t];
  }
  return delta;
}

// Backward recursion A_t = delta_t + gamma * lambda * A_{t+1}.
inline std::vector<double> gae_advantages(std::span<const double> deltas, double lambda,
                                          double gamma = 1.0) {
  if (deltas.empty()) throw std::invalid_argument("gae_advantages: empty input");
  if (!(lambda > 0.0 && lambda <= 1.0)) throw std::invalid_argument("gae_advantages: lambda must be in (0,1]");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gae_advantages: gamma must be in (0,1]");
  std::vector<double> adv(deltas.size());
  double running = 0.0;
  for (std::size_t i = deltas.size(); i-- > 0;) {
    running = deltas[i] + gamma * lambda * running;
    adv[i] = running;
  }
  return adv;
}

// S = -(1/T) sum_t A_t.
inline double mean_advantage_S(std::span<const double> advantages) {
  if (advantages.empty()) throw std::invalid_argument("mean_advantage_S: empty input");
  double sum = 0.0;
  for (double a : advantages) sum += a;
  return -sum / static_cast<double>(advantages.size());
}

inline double clip_value(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

// Effective ratio weight alpha_t with L_t = -alpha_t * A_t. For A_t = 0 the
// weight is 1; both branches give L_t = 0 there.
inline double clipped_ratio_weight(double rho, double advantage, double clip) {
  const double c = clip_value(rho, 1.0 - clip, 1.0 + clip);
  if (advantage > 0.0) return std::min(rho, c);
  if (advantage < 0.0) return std::max(rho, c);
  return 1.0;
}

// d alpha / d rho: 1 on the unclipped branch, 0 where the clip is active.
inline double clipped_ratio_slope(double rho, double advantage, double clip) {
  if (advantage > 0.0) return rho < 1.0 + clip ? 1.0 : 0.0;
  if (advantage < 0.0) return rho > 1.0 - clip ? 1.0 : 0.0;
  return 0.0;
}

struct PpoLoss {
  double loss = 0.0;
  std::vector<double> alpha;
};

inline PpoLoss ppo_loss(const Trajectory& traj, std::span<const double> new_probs,
                        std::span<const double> advantages, double clip) {
  const std::size_t T = traj.tokens.size();
  if (T == 0) throw std::invalid_argument("ppo_loss: empty trajectory");
  if (new_probs.size() != T || advantages.size() != T || traj.old_probs.size() != T)
    throw std::invalid_argument("ppo_loss: length mismatch");
  PpoLoss out;
  out.alpha.resize(T);
  double sum = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!(traj.old_probs[t] > 0.0)) throw std::invalid_argument("ppo_loss: zero old probability");
    const double rho = new_probs[t] / traj.old_probs[t];
    if (!std::isfinite(rho) || !(rho > 0.0))
      throw std::invalid_argument("ppo_loss: ratio must be finite and positive");
    out.alpha[t] = clipped_ratio_weight(rho, advantages[t], clip);
    sum += out.alpha[t] * advantages[t];
  }
  out.loss = -sum / static_cast<double>(T);
  return out;
}

struct Theorem1Prediction {
  double S_leading = 0.0;
  double error_bound = 0.0;
};

// Leading term of S in the terminal residual R and the finite-T bound on the
// contribution of pre-terminal TD errors bounded by epsilon (gamma = 1).
inline Theorem1Prediction theorem1_prediction(double R, int T, double lambda, double epsilon) {
  if (T < 1) throw std::invalid_argument("theorem1_prediction: T must be >= 1");
  if (!(lambda > 0.0 && lambda <= 1.0))
    throw std::invalid_argument("theorem1_prediction: lambda must be in (0,1]");
  const double Td = static_cast<double>(T);
  if (lambda == 1.0) return {-R, epsilon * (Td - 1.0) / 2.0};
  const double geo = (1.0 - std::pow(lambda, Td)) / (1.0 - lambda);
  return {-R * geo / Td, epsilon * (Td - 1.0) / (Td * (1.0 - lambda))};
}

struct LossFollowsS {
  double alpha_dev = 0.0;
  double bound = 0.0;  // alpha_dev * mean |A_t|
  bool holds = false;  // |L - S| <= bound
  // Present when every A_t has the same strict sign.
  std::optional<bool> same_sign;
  double bracket_lo = 0.0;  // bracket on |L| in units of |S|
  double bracket_hi = 0.0;
  // Bracket exactly as written with rho_min / rho_max; it can fail when every
  // ratio lies outside the clip interval on one side (see bracket_lo/hi).
  std::optional<bool> literal_bracket_holds;
};

inline LossFollowsS loss_follows_S_check(double L, double S, std::span<const double> advantages,
                                         double rho_min, double rho_max, double clip) {
  if (advantages.empty()) throw std::invalid_argument("loss_follows_S_check: empty advantages");
  LossFollowsS out;
  out.alpha_dev = std::max({1.0 - rho_min, rho_max - 1.0, clip});
  double mean_abs = 0.0;
  bool all_pos = true, all_neg = true;
  for (double a : advantages) {
    mean_abs += std::abs(a);
    all_pos = all_pos && a > 0.0;
    all_neg = all_neg && a < 0.0;
  }
  mean_abs /= static_cast<double>(advantages.size());
  out.bound = out.alpha_dev * mean_abs;
  const double slack = 1e-12 * (1.0 + std::abs(L) + std::abs(S));
  out.holds = std::abs(L - S) <= out.bound + slack;

  if (all_pos || all_neg) {
    double lo = 0.0, hi = 0.0, lit_lo = 0.0, lit_hi = 0.0;
    if (all_pos) {
      lit_lo = rho_min;
      lit_hi = std::min(rho_max, 1.0 + clip);
      lo = std::min(rho_min, 1.0 + clip);
      hi = lit_hi;
    } else {
      lit_lo = 1.0 - clip;
      lit_hi = rho_max;
      lo = lit_lo;
      hi = std::max(rho_max, 1.0 - clip);
    }
    out.bracket_lo = lo;
    out.bracket_hi = hi;
    const double aS = std::abs(S), aL = std::abs(L);
    const bool sign_ok = (L > 0.0) == (S > 0.0);
    out.same_sign = sign_ok && lo * aS <= aL + slack && aL <= hi * aS + slack;
    out.literal_bracket_holds = sign_ok && lit_lo * aS <= aL + slack && aL <= lit_hi * aS + slack;
  }
  return out;
}

// Uniform-in-t threshold Phi: |R| > epsilon * Phi makes every A_t share the
// sign of R.
inline double fixed_sign_threshold(double lambda, int T) {
  if (T < 1) throw std::invalid_argument("fixed_sign_threshold: T must be >= 1");
  if (!(lambda > 0.0 && lambda <= 1.0))
    throw std::invalid_argument("fixed_sign_threshold: lambda must be in (0,1]");
  if (lambda == 1.0) return static_cast<double>(T - 1);
  const double lp = std::pow(lambda, T - 1);
  return (1.0 - lp) / ((1.0 - lambda) * lp);
}

// Regression target for V(s_t): A_t + V_old(s_t).
inline std::vector<double> value_targets(const Trajectory& traj, std::span<const double> values_old,
                                         std::span<const double> advantages) {
  if (values_old.size() != advantages.size() ||
      values_old.size() != static_cast<std::size_t>(traj.length()))
    throw std::invalid_argument("value_targets: length mismatch");
  std::vector<double> out(values_old.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = advantages[t] + values_old[t];
  return out;
}

// One gradient step on 0.5*(V - target)^2 + 0.5*kl_weight*(V - anchor)^2 per
// position, starting from values_old. The anchor is the value table at
// initialization (zero unless given), which is what pulls V toward zero.
inline std::vector<double> value_update(std::span<const double> values_old,
                                        std::span<const double> targets, double lr,
                                        double kl_weight, std::span<const double> anchor = {}) {
  if (values_old.size() != targets.size()) throw std::invalid_argument("value_update: length mismatch");
  if (!anchor.empty() && anchor.size() != values_old.size())
    throw std::invalid_argument("value_update: anchor length mismatch");
  if (!(lr > 0.0)) throw std::invalid_argument("value_update: lr must be > 0");
  if (kl_weight < 0.0) throw std::invalid_argument("value_update: kl_weight must be >= 0");
  std::vector<double> out(values_old.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = anchor.empty() ? 0.0 : anchor[i];
    const double grad = (values_old[i] - targets[i]) + kl_weight * (values_old[i] - a);
    out[i] = values_old[i] - lr * grad;
  }
  return out;
}

struct AdvantageReport {
  std::vector<double> deltas;
  std::vector<double> advantages;
  double S = 0.0;
  double L = 0.0;
  std::vector<double> alpha;
  double R = 0.0;
  double epsilon_bound = 0.0;  // max |delta_k| over k < T-1
};

// Full per-trajectory analysis. `values` are V(s_0..s_{T-1}); `new_probs`
// defaults to the trajectory's old probabilities (rho = 1).
inline AdvantageReport analyze_trajectory(const Trajectory& traj, std::span<const double> values,
                                          const GaeConfig& cfg,
                                          std::span<const double> new_probs = {}) {
  cfg.validate();
  AdvantageReport rep;
  const auto rewards = traj.reward_vector();
  rep.deltas = td_errors(rewards, values, cfg.gamma);
  rep.advantages = gae_advantages(rep.deltas, cfg.lambda, cfg.gamma);
  rep.S = mean_advantage_S(rep.advantages);
  const auto probs = new_probs.empty() ? std::span<const double>(traj.old_probs) : new_probs;
  auto loss = ppo_loss(traj, probs, rep.advantages, cfg.clip);
  rep.L = loss.loss;
  rep.alpha = std::move(loss.alpha);
  rep.R = traj.reward - values.back();
  for (std::size_t k = 0; k + 1 < rep.deltas.size(); ++k)
    rep.epsilon_bound = std::max(rep.epsilon_bound, std::abs(rep.deltas[k]));
  return rep;
}

}  // namespace lengthlab
