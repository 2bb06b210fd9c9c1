#pragma once

// Domain types for the synthetic token-level problem MDP: vocabulary,
// problems, trajectories, a context-keyed tabular softmax policy, sampling,
// and reward scoring.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lengthlab/rng.hpp"

namespace lengthlab {

using TokenId = int;

// Context horizon meaning "key on the whole prefix".
inline constexpr int kFullHistory = -1;

class Vocab {
 public:
  Vocab(int size, std::vector<TokenId> answer_tokens, TokenId terminal)
      : size_(size), answers_(std::move(answer_tokens)), terminal_(terminal) {
    if (size_ < 3) throw std::invalid_argument("Vocab: size must be >= 3");
    if (terminal_ < 0 || terminal_ >= size_)
      throw std::invalid_argument("Vocab: terminal token out of range");
    std::vector<bool> seen(static_cast<std::size_t>(size_), false);
    for (TokenId a : answers_) {
      if (a < 0 || a >= size_) throw std::invalid_argument("Vocab: answer token out of range");
      if (a == terminal_) throw std::invalid_argument("Vocab: terminal token cannot be an answer");
      if (seen[static_cast<std::size_t>(a)])
        throw std::invalid_argument("Vocab: duplicate answer token");
      seen[static_cast<std::size_t>(a)] = true;
    }
    std::sort(answers_.begin(), answers_.end());
    for (TokenId t = 0; t < size_; ++t)
      if (t != terminal_ && !seen[static_cast<std::size_t>(t)]) fillers_.push_back(t);
  }

  // K = 8: fillers 0..4, answers {5, 6}, terminal 7.
  static Vocab standard() { return Vocab(8, {5, 6}, 7); }

  int size() const { return size_; }
  TokenId terminal() const { return terminal_; }
  const std::vector<TokenId>& answer_tokens() const { return answers_; }
  const std::vector<TokenId>& filler_tokens() const { return fillers_; }

  bool contains(TokenId t) const { return t >= 0 && t < size_; }
  bool is_answer(TokenId t) const {
    return std::binary_search(answers_.begin(), answers_.end(), t);
  }
  bool is_terminal(TokenId t) const { return t == terminal_; }

  bool operator==(const Vocab&) const = default;

 private:
  int size_;
  std::vector<TokenId> answers_;
  TokenId terminal_;
  std::vector<TokenId> fillers_;
};

struct Problem {
  std::string id;
  std::optional<TokenId> correct_answer;  // absent: unsolvable by construction
  int max_len = 32;

  bool solvable() const { return correct_answer.has_value(); }

  void validate(const Vocab& vocab) const {
    if (max_len < 2) throw std::invalid_argument("Problem " + id + ": max_len must be >= 2");
    if (correct_answer && !vocab.is_answer(*correct_answer))
      throw std::invalid_argument("Problem " + id + ": correct_answer is not an answer token");
  }

  bool operator==(const Problem&) const = default;
};

struct Trajectory {
  std::vector<TokenId> tokens;
  std::vector<double> old_probs;  // sampling-policy probability of each token
  double reward = 0.0;            // terminal reward
  bool terminated = false;        // terminal token emitted before max_len

  int length() const { return static_cast<int>(tokens.size()); }

  // Per-step reward vector: zero everywhere except the final step.
  std::vector<double> reward_vector() const {
    std::vector<double> r(tokens.size(), 0.0);
    if (!r.empty()) r.back() = reward;
    return r;
  }

  bool operator==(const Trajectory&) const = default;
};

struct RewardScheme {
  enum class Variant { kPpoTernary, kGrpoBinary };

  Variant variant = Variant::kPpoTernary;
  double correct = 1.0;
  double answered_wrong = -0.5;
  double no_answer = -1.0;
  double step_penalty = 0.0;  // <= 0, multiplied by the response length

  static RewardScheme ppo_ternary() { return {}; }
  static RewardScheme grpo_binary() {
    RewardScheme s;
    s.variant = Variant::kGrpoBinary;
    s.correct = 1.0;
    s.answered_wrong = 0.0;
    s.no_answer = 0.0;
    return s;
  }

  void validate() const {
    if (step_penalty > 0.0) throw std::invalid_argument("RewardScheme: step_penalty must be <= 0");
  }
};

enum class ResponseOutcome { kCorrect, kAnsweredWrong, kNoAnswer };

// A response is "boxed" when the token right before the terminal token is an
// answer token. Truncated responses never count as answered.
inline ResponseOutcome classify_response(const Trajectory& traj, const Problem& problem,
                                         const Vocab& vocab) {
  const auto& t = traj.tokens;
  if (!traj.terminated || t.size() < 2 || !vocab.is_terminal(t.back()))
    return ResponseOutcome::kNoAnswer;
  const TokenId answer = t[t.size() - 2];
  if (!vocab.is_answer(answer)) return ResponseOutcome::kNoAnswer;
  if (problem.correct_answer && *problem.correct_answer == answer)
    return ResponseOutcome::kCorrect;
  return ResponseOutcome::kAnsweredWrong;
}

inline double score_response(const Trajectory& traj, const Problem& problem, const Vocab& vocab,
                             const RewardScheme& scheme) {
  scheme.validate();
  double r = 0.0;
  switch (classify_response(traj, problem, vocab)) {
    case ResponseOutcome::kCorrect: r = scheme.correct; break;
    case ResponseOutcome::kAnsweredWrong: r = scheme.answered_wrong; break;
    case ResponseOutcome::kNoAnswer: r = scheme.no_answer; break;
  }
  return r + scheme.step_penalty * traj.length();
}

// Temperature-scaled softmax with max subtraction.
inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("softmax: temperature must be positive and finite");
  if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
  double mx = -INFINITY;
  for (double z : logits) {
    if (!std::isfinite(z)) throw std::invalid_argument("softmax: non-finite logit");
    mx = std::max(mx, z);
  }
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

// Key into the logit table: problem id (empty for the cross-problem shared
// table), position in the response, and the last `context_horizon` tokens.
struct ContextKey {
  std::string problem;
  int position = 0;
  std::vector<TokenId> history;

  auto operator<=>(const ContextKey&) const = default;
  bool operator==(const ContextKey&) const = default;
};

enum class PolicySharing {
  kPerProblem,            // one table entry per (problem, context)
  kSharedPlusPerProblem,  // logits = shared(context) + per_problem(problem, context)
};

class TabularSoftmaxPolicy {
 public:
  using Table = std::map<ContextKey, std::vector<double>>;

  explicit TabularSoftmaxPolicy(int vocab_size, double temperature = 1.0,
                                int context_horizon = kFullHistory,
                                PolicySharing sharing = PolicySharing::kPerProblem)
      : vocab_size_(vocab_size),
        temperature_(temperature),
        horizon_(context_horizon),
        sharing_(sharing),
        prior_(static_cast<std::size_t>(vocab_size), 0.0) {
    if (vocab_size_ < 1) throw std::invalid_argument("policy: vocab_size must be positive");
    if (!(temperature_ > 0.0)) throw std::invalid_argument("policy: temperature must be > 0");
    if (horizon_ < kFullHistory) throw std::invalid_argument("policy: invalid context horizon");
  }

  int vocab_size() const { return vocab_size_; }
  double temperature() const { return temperature_; }
  void set_temperature(double t) {
    if (!(t > 0.0)) throw std::invalid_argument("policy: temperature must be > 0");
    temperature_ = t;
  }
  int context_horizon() const { return horizon_; }
  PolicySharing sharing() const { return sharing_; }

  // Logits used for contexts with no table entry (zero by default).
  const std::vector<double>& prior() const { return prior_; }
  void set_prior(std::vector<double> prior) {
    check_size(prior);
    prior_ = std::move(prior);
  }

  ContextKey key(std::string_view problem, std::span<const TokenId> prefix) const {
    ContextKey k;
    k.problem = std::string(problem);
    k.position = static_cast<int>(prefix.size());
    std::size_t take = prefix.size();
    if (horizon_ != kFullHistory) take = std::min(take, static_cast<std::size_t>(horizon_));
    k.history.assign(prefix.end() - static_cast<std::ptrdiff_t>(take), prefix.end());
    return k;
  }

  // Table keys whose entries are summed for a state.
  std::vector<ContextKey> keys_for(std::string_view problem,
                                   std::span<const TokenId> prefix) const {
    std::vector<ContextKey> keys;
    if (sharing_ == PolicySharing::kSharedPlusPerProblem) keys.push_back(key("", prefix));
    keys.push_back(key(problem, prefix));
    return keys;
  }

  std::vector<double> logits(std::string_view problem, std::span<const TokenId> prefix) const {
    std::vector<double> z = prior_;
    for (const auto& k : keys_for(problem, prefix)) {
      if (auto it = table_.find(k); it != table_.end())
        for (std::size_t j = 0; j < z.size(); ++j) z[j] += it->second[j];
    }
    return z;
  }

  std::vector<double> probs(std::string_view problem, std::span<const TokenId> prefix) const {
    return softmax(logits(problem, prefix), temperature_);
  }

  // d log pi(token) / d z for each summed entry: (e_token - pi) / temperature.
  std::vector<double> log_prob_gradient(std::string_view problem, std::span<const TokenId> prefix,
                                        TokenId token) const {
    auto g = probs(problem, prefix);
    for (double& x : g) x = -x;
    g[static_cast<std::size_t>(token)] += 1.0;
    for (double& x : g) x /= temperature_;
    return g;
  }

  // Adds `delta` to every entry that feeds this state's logits.
  void add_to_logits(std::string_view problem, std::span<const TokenId> prefix,
                     std::span<const double> delta) {
    for (const auto& k : keys_for(problem, prefix)) add_to_entry(k, delta);
  }

  void add_to_entry(const ContextKey& k, std::span<const double> delta) {
    if (delta.size() != static_cast<std::size_t>(vocab_size_))
      throw std::invalid_argument("policy: delta has wrong length");
    auto& e = entry(k);
    for (std::size_t j = 0; j < e.size(); ++j) e[j] += delta[j];
  }

  std::vector<double>& entry(const ContextKey& k) {
    auto [it, inserted] = table_.try_emplace(k);
    if (inserted) it->second.assign(static_cast<std::size_t>(vocab_size_), 0.0);
    return it->second;
  }

  void set_entry(const ContextKey& k, std::vector<double> logits) {
    check_size(logits);
    for (double z : logits)
      if (!std::isfinite(z)) throw std::invalid_argument("policy: non-finite logit");
    table_[k] = std::move(logits);
  }

  const Table& table() const { return table_; }

  bool operator==(const TabularSoftmaxPolicy&) const = default;

 private:
  void check_size(const std::vector<double>& v) const {
    if (v.size() != static_cast<std::size_t>(vocab_size_))
      throw std::invalid_argument("policy: logit vector has wrong length");
  }

  int vocab_size_;
  double temperature_;
  int horizon_;
  PolicySharing sharing_;
  std::vector<double> prior_;
  Table table_;
};

// Inverse-CDF draw that never returns a zero-probability index.
inline TokenId sample_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last_positive = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = static_cast<int>(i);
    acc += probs[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  return last_positive;
}

inline Trajectory sample_trajectory(const TabularSoftmaxPolicy& policy, const Problem& problem,
                                    const Vocab& vocab, std::uint64_t seed) {
  if (policy.vocab_size() != vocab.size())
    throw std::invalid_argument("sample_trajectory: policy and vocab sizes differ");
  Rng rng(seed);
  Trajectory traj;
  traj.tokens.reserve(static_cast<std::size_t>(problem.max_len));
  while (traj.length() < problem.max_len) {
    const auto p = policy.probs(problem.id, traj.tokens);
    const TokenId k = sample_index(p, rng);
    traj.tokens.push_back(k);
    traj.old_probs.push_back(p[static_cast<std::size_t>(k)]);
    if (vocab.is_terminal(k)) {
      traj.terminated = true;
      break;
    }
  }
  return traj;
}

struct PaEstimate {
  double per_sample_rate = 0.0;  // fraction of samples solved
  int n_samples = 0;

  // Probability of at least one solve in `attempts` independent tries.
  double at_least_one(int attempts) const {
    return 1.0 - std::pow(1.0 - per_sample_rate, attempts);
  }
};

inline PaEstimate estimate_pa(const TabularSoftmaxPolicy& policy, const Problem& problem,
                              const Vocab& vocab, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("estimate_pa: n_samples must be >= 1");
  int solved = 0;
  for (int i = 0; i < n_samples; ++i) {
    const auto traj =
        sample_trajectory(policy, problem, vocab, derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    if (classify_response(traj, problem, vocab) == ResponseOutcome::kCorrect) ++solved;
  }
  return {static_cast<double>(solved) / n_samples, n_samples};
}

}  // namespace lengthlab
