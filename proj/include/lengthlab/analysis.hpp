#pragma once

// Gradient-level checks of how the clipped GRPO surrogate treats response
// length: softmax gradient norms, central finite differences, the terminal
// token direction test, and the short-vs-long gradient norm comparison.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lengthlab/core.hpp"
#include "lengthlab/gae_ppo.hpp"

namespace lengthlab {

struct GradReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  double max_abs_diff = 0.0;
  double h = 0.0;
};

inline void check_distribution(std::span<const double> pi, const char* who) {
  if (pi.empty()) throw std::invalid_argument(std::string(who) + ": empty distribution");
  double s = 0.0;
  for (double p : pi) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument(std::string(who) + ": invalid probability");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument(std::string(who) + ": probabilities do not sum to 1");
}

// ||e_k - pi||_2, the norm of d log pi(k) / d z at unit temperature.
inline double softmax_grad_norm(std::span<const double> pi, TokenId k) {
  check_distribution(pi, "softmax_grad_norm");
  if (k < 0 || static_cast<std::size_t>(k) >= pi.size())
    throw std::invalid_argument("softmax_grad_norm: token out of range");
  double s = 0.0;
  for (std::size_t j = 0; j < pi.size(); ++j) {
    const double d = (j == static_cast<std::size_t>(k) ? 1.0 : 0.0) - pi[j];
    s += d * d;
  }
  return std::sqrt(s);
}

inline constexpr double kDefaultFdStep = 1e-5;

// Central differences (f(z + h e_j) - f(z - h e_j)) / 2h.
template <class Fn>
std::vector<double> finite_diff_gradient(Fn&& fn, std::span<const double> z, double h = kDefaultFdStep) {
  if (!(h >= 1e-8 && h <= 1e-3)) throw std::invalid_argument("finite_diff_gradient: h must be in [1e-8, 1e-3]");
  std::vector<double> x(z.begin(), z.end());
  std::vector<double> g(z.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double saved = x[j];
    x[j] = saved + h;
    const double fp = fn(std::span<const double>(x));
    x[j] = saved - h;
    const double fm = fn(std::span<const double>(x));
    x[j] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::domain_error("finite_diff_gradient: non-finite function value");
    g[j] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct ProlixityResult {
  double dL_dlogit_tau = 0.0;  // analytic
  double numeric_dL_dlogit_tau = 0.0;
  GradReport gradient;         // over the terminal-context logits
  double loss = 0.0;
  bool theorem_sign_ok = false;
};

// Single-response GRPO loss of `traj` as a function of the logits of the
// context where the terminal token was emitted; every earlier token is held
// fixed. The group is fixed, so `advantage` is a constant.
inline ProlixityResult prolixity_direction(const TabularSoftmaxPolicy& policy, std::string_view problem,
                                           const Trajectory& traj, const Vocab& vocab, double advantage,
                                           double clip, double h = kDefaultFdStep) {
  const int T = traj.length();
  if (T < 1 || !vocab.is_terminal(traj.tokens.back()))
    throw std::invalid_argument("prolixity_direction: trajectory must end in the terminal token");
  if (traj.old_probs.size() != traj.tokens.size())
    throw std::invalid_argument("prolixity_direction: old_probs length mismatch");
  const double old_tau = traj.old_probs.back();
  if (!(old_tau > 0.0 && old_tau < 1.0))
    throw std::invalid_argument("prolixity_direction: degenerate old terminal probability");

  const std::span<const TokenId> tokens(traj.tokens);
  double fixed = 0.0;
  for (int t = 0; t + 1 < T; ++t) {
    const auto p = policy.probs(problem, tokens.first(static_cast<std::size_t>(t)));
    const double rho = p[static_cast<std::size_t>(tokens[t])] / traj.old_probs[static_cast<std::size_t>(t)];
    fixed += clipped_ratio_weight(rho, advantage, clip) * advantage;
  }
  const auto prefix = tokens.first(static_cast<std::size_t>(T - 1));
  const auto z0 = policy.logits(problem, prefix);
  const double temp = policy.temperature();
  const auto tau = static_cast<std::size_t>(vocab.terminal());

  auto loss_of = [&](std::span<const double> z) {
    const auto p = softmax(z, temp);
    const double rho = p[tau] / old_tau;
    return -(fixed + clipped_ratio_weight(rho, advantage, clip) * advantage) / T;
  };

  const auto p0 = softmax(z0, temp);
  if (p0[tau] <= 0.0 || p0[tau] >= 1.0)
    throw std::invalid_argument("prolixity_direction: degenerate terminal probability");
  const double rho0 = p0[tau] / old_tau;
  const double coeff = -advantage / T * clipped_ratio_slope(rho0, advantage, clip) * rho0 / temp;

  ProlixityResult out;
  out.loss = loss_of(z0);
  out.gradient.h = h;
  out.gradient.analytic.resize(z0.size());
  for (std::size_t j = 0; j < z0.size(); ++j)
    out.gradient.analytic[j] = coeff * ((j == tau ? 1.0 : 0.0) - p0[j]);
  out.gradient.numeric = finite_diff_gradient(loss_of, z0, h);
  for (std::size_t j = 0; j < z0.size(); ++j)
    out.gradient.max_abs_diff =
        std::max(out.gradient.max_abs_diff, std::abs(out.gradient.analytic[j] - out.gradient.numeric[j]));
  out.dL_dlogit_tau = out.gradient.analytic[tau];
  out.numeric_dL_dlogit_tau = out.gradient.numeric[tau];
  if (advantage < 0.0)
    out.theorem_sign_ok = out.dL_dlogit_tau > 0.0;
  else if (advantage > 0.0)
    out.theorem_sign_ok = out.dL_dlogit_tau < 0.0;
  else
    out.theorem_sign_ok = out.dL_dlogit_tau == 0.0;
  return out;
}

// Two responses sharing a first-token context, with lengths T_S < T_L.
struct ConcisenessInstance {
  int T_S = 1;
  int T_L = 2;
  double rho_S = 1.0;
  double rho_L = 1.0;
  std::vector<double> pi;
  TokenId k_S = 0;
  TokenId k_L = 0;
  double kappa_tilde = 1.0;
  double clip = 0.2;
  double temperature = 1.0;  // scales both gradient norms by 1/temperature

  void validate() const {
    if (!(T_L > T_S && T_S >= 1)) throw std::invalid_argument("ConcisenessInstance: need T_L > T_S >= 1");
    if (!(rho_S < 1.0 + clip && rho_L < 1.0 + clip))
      throw std::invalid_argument("ConcisenessInstance: clipping must be inactive");
    if (!(rho_S > 0.0 && rho_L > 0.0)) throw std::invalid_argument("ConcisenessInstance: ratios must be > 0");
    if (!(kappa_tilde > 0.0)) throw std::invalid_argument("ConcisenessInstance: kappa_tilde must be > 0");
    if (!(temperature > 0.0)) throw std::invalid_argument("ConcisenessInstance: temperature must be > 0");
    check_distribution(pi, "ConcisenessInstance");
    const auto K = static_cast<TokenId>(pi.size());
    if (k_S < 0 || k_S >= K || k_L < 0 || k_L >= K)
      throw std::invalid_argument("ConcisenessInstance: token out of range");
  }
};

struct ConcisenessResult {
  double lhs = 0.0;  // rho_S f(k_S)
  double rhs = 0.0;  // (T_S / T_L) kappa_tilde rho_L f(k_L)
  bool shorter_wins = false;

  // Filled when a Jacobian is supplied.
  std::optional<double> grad_norm_S;  // (rho_S / T_S) ||J^T (e_kS - pi)|| / temperature
  std::optional<double> grad_norm_L;
  std::optional<bool> direct_shorter_wins;
  std::optional<double> implied_kappa_tilde;
  std::optional<double> condition_number;  // +inf when sigma_min = 0
  std::optional<bool> bracket_bounded;
  std::optional<bool> bracket_holds;       // implied kappa_tilde in [1/kappa, kappa]
};

inline std::vector<double> softmax_residual(std::span<const double> pi, TokenId k) {
  std::vector<double> u(pi.begin(), pi.end());
  for (double& x : u) x = -x;
  u[static_cast<std::size_t>(k)] += 1.0;
  return u;
}

// sigma_max / sigma_min of J viewed as the map v -> J^T v on R^K.
inline double jacobian_condition_number(const Eigen::MatrixXd& J) {
  if (J.cols() < J.rows()) return std::numeric_limits<double>::infinity();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(J);
  const auto& s = svd.singularValues();
  const double smax = s.maxCoeff(), smin = s.minCoeff();
  if (smin <= 0.0) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

inline ConcisenessResult conciseness_compare(const ConcisenessInstance& inst,
                                             const Eigen::MatrixXd* jacobian = nullptr) {
  inst.validate();
  ConcisenessResult out;
  const double fS = softmax_grad_norm(inst.pi, inst.k_S);
  const double fL = softmax_grad_norm(inst.pi, inst.k_L);
  const double ratio = static_cast<double>(inst.T_S) / inst.T_L;

  if (jacobian == nullptr) {
    out.lhs = inst.rho_S * fS;
    out.rhs = ratio * inst.kappa_tilde * inst.rho_L * fL;
    out.shorter_wins = out.lhs > out.rhs;
    return out;
  }

  const auto& J = *jacobian;
  if (J.rows() != static_cast<Eigen::Index>(inst.pi.size()))
    throw std::invalid_argument("conciseness_compare: Jacobian must have K rows");
  const auto uS = softmax_residual(inst.pi, inst.k_S);
  const auto uL = softmax_residual(inst.pi, inst.k_L);
  const Eigen::Map<const Eigen::VectorXd> vS(uS.data(), static_cast<Eigen::Index>(uS.size()));
  const Eigen::Map<const Eigen::VectorXd> vL(uL.data(), static_cast<Eigen::Index>(uL.size()));
  const double jS = (J.transpose() * vS).norm();
  const double jL = (J.transpose() * vL).norm();

  out.grad_norm_S = inst.rho_S / inst.T_S * jS / inst.temperature;
  out.grad_norm_L = inst.rho_L / inst.T_L * jL / inst.temperature;
  out.direct_shorter_wins = *out.grad_norm_S > *out.grad_norm_L;

  // Gain of J^T along u_L relative to u_S: the factor that turns the
  // identity-Jacobian inequality into the exact one.
  if (fS > 0.0 && fL > 0.0 && jS > 0.0) out.implied_kappa_tilde = (jL / fL) / (jS / fS);
  const double kappa = jacobian_condition_number(J);
  out.condition_number = kappa;
  out.bracket_bounded = std::isfinite(kappa);

  const double kt = out.implied_kappa_tilde.value_or(inst.kappa_tilde);
  out.lhs = inst.rho_S * fS;
  out.rhs = ratio * kt * inst.rho_L * fL;
  out.shorter_wins = out.lhs > out.rhs;
  if (out.implied_kappa_tilde && std::isfinite(kappa)) {
    const double tol = 1e-12 * kappa;
    out.bracket_holds = kt >= 1.0 / kappa - tol && kt <= kappa + tol;
  }
  return out;
}

// True when the positive-advantage min branch is clipped, so the gradient
// through this token vanishes.
inline bool clip_gate_closed(double rho, double clip) { return rho >= 1.0 + clip; }

}  // namespace lengthlab
