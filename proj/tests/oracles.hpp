#pragma once

// Independent reference computations used only by tests. These deliberately
// avoid the library's code paths: long double arithmetic, direct sums instead
// of recursions, and textbook formulas.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

inline std::vector<long double> softmax(const std::vector<double>& z, long double temperature = 1.0L) {
  long double m = z.empty() ? 0.0L : static_cast<long double>(z[0]);
  for (double x : z) m = std::max(m, static_cast<long double>(x));
  long double s = 0.0L;
  std::vector<long double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp((static_cast<long double>(z[i]) - m) / temperature);
    s += p[i];
  }
  for (auto& x : p) x /= s;
  return p;
}

// A_t = sum_{l >= 0} (gamma lambda)^l delta_{t+l}, summed forward.
inline std::vector<long double> gae_double_sum(const std::vector<double>& delta, long double lambda,
                                               long double gamma = 1.0L) {
  const std::size_t T = delta.size();
  std::vector<long double> a(T, 0.0L);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t l = 0; t + l < T; ++l) a[t] += std::pow(gamma * lambda, static_cast<long double>(l)) * delta[t + l];
  return a;
}

// S from the reindexed single sum: -(1/T) sum_k delta_k sum_{j<=k} lambda^j.
inline long double S_reindexed(const std::vector<double>& delta, long double lambda) {
  long double s = 0.0L;
  for (std::size_t k = 0; k < delta.size(); ++k) {
    long double w = 0.0L;
    for (std::size_t j = 0; j <= k; ++j) w += std::pow(lambda, static_cast<long double>(j));
    s += w * delta[k];
  }
  return -s / static_cast<long double>(delta.size());
}

// Leading term of S for constant values: -(R/T) sum_{t<T} lambda^{T-1-t}.
inline long double S_leading(long double R, int T, long double lambda) {
  long double s = 0.0L;
  for (int t = 0; t < T; ++t) s += std::pow(lambda, static_cast<long double>(T - 1 - t));
  return -R * s / T;
}

// Group advantage from explicit population mean and variance.
inline std::vector<long double> group_advantage(const std::vector<double>& r) {
  long double mu = 0.0L, var = 0.0L;
  for (double x : r) mu += x;
  mu /= r.size();
  for (double x : r) var += (x - mu) * (x - mu);
  var /= r.size();
  std::vector<long double> a(r.size(), 0.0L);
  if (var == 0.0L) return a;
  for (std::size_t i = 0; i < r.size(); ++i) a[i] = (r[i] - mu) / std::sqrt(var);
  return a;
}

// Per-sample solve probability of a uniform policy over K tokens: the first
// terminal token at position t >= 1 (0-based), preceded by the correct answer
// among the K-1 non-terminal tokens, within max_len tokens.
inline long double uniform_policy_solve_rate(int K, int max_len) {
  long double p = 0.0L;
  for (int t = 1; t < max_len; ++t)
    p += std::pow((K - 1.0L) / K, static_cast<long double>(t)) / K / (K - 1.0L);
  return p;
}

// Half-width of a binomial interval with z standard errors.
inline double binomial_halfwidth(double p, int n, double z = 4.0) {
  return z * std::sqrt(std::max(p * (1.0 - p), 1e-12) / n);
}

}  // namespace oracle
