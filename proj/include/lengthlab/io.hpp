#pragma once

// JSON (de)serialization of domain types and experiment configs, CSV export
// of training logs, and atomic file writes.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lengthlab/experiment.hpp"
#include "lengthlab/verify.hpp"

namespace lengthlab {

using json = nlohmann::ordered_json;

// Config error carrying the dotted path of the offending field.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Reads fields from one JSON object and rejects keys that were never read.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(child(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  template <class T>
  void require(const char* key, T& out) {
    if (!j_.contains(key)) throw ConfigError(child(key), "missing required field");
    get(key, out);
  }

  bool has(const char* key) const { return j_.contains(key); }
  void mark(const char* key) { used_.insert(key); }
  const json& at(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError(child(k), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// ---- domain types ---------------------------------------------------------

inline json to_json(const Vocab& v) {
  return {{"size", v.size()}, {"answers", v.answer_tokens()}, {"terminal", v.terminal()}};
}

inline Vocab vocab_from_json(const json& j, const std::string& path = "vocab") {
  StrictObject o(j, path);
  int size = 0, terminal = 0;
  std::vector<TokenId> answers;
  o.require("size", size);
  o.require("answers", answers);
  o.require("terminal", terminal);
  o.finish();
  try {
    return Vocab(size, answers, terminal);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

inline json to_json(const Problem& p) {
  json j{{"id", p.id}, {"correct_answer", nullptr}, {"max_len", p.max_len}};
  if (p.correct_answer) j["correct_answer"] = *p.correct_answer;
  return j;
}

inline Problem problem_from_json(const json& j, const std::string& path = "problem") {
  StrictObject o(j, path);
  Problem p;
  o.require("id", p.id);
  if (o.has("correct_answer") && !o.at("correct_answer").is_null()) {
    TokenId a = 0;
    o.get("correct_answer", a);
    p.correct_answer = a;
  }
  o.mark("correct_answer");
  o.get("max_len", p.max_len);
  o.finish();
  return p;
}

inline json to_json(const Trajectory& t) {
  return {{"tokens", t.tokens}, {"old_probs", t.old_probs}, {"reward", t.reward}, {"terminated", t.terminated}};
}

inline Trajectory trajectory_from_json(const json& j, const std::string& path = "trajectory") {
  StrictObject o(j, path);
  Trajectory t;
  o.require("tokens", t.tokens);
  o.require("old_probs", t.old_probs);
  o.get("reward", t.reward);
  o.get("terminated", t.terminated);
  o.finish();
  if (t.tokens.size() != t.old_probs.size()) throw ConfigError(path, "tokens and old_probs differ in length");
  return t;
}

inline json to_json(const TabularSoftmaxPolicy& p) {
  json entries = json::array();
  for (const auto& [k, v] : p.table())
    entries.push_back({{"problem", k.problem}, {"position", k.position}, {"history", k.history}, {"logits", v}});
  return {{"vocab_size", p.vocab_size()},
          {"temperature", p.temperature()},
          {"context_horizon", p.context_horizon()},
          {"sharing", p.sharing() == PolicySharing::kPerProblem ? "per_problem" : "shared_plus_per_problem"},
          {"prior", p.prior()},
          {"entries", entries}};
}

inline TabularSoftmaxPolicy policy_from_json(const json& j, const std::string& path = "policy") {
  StrictObject o(j, path);
  int K = 0, horizon = kFullHistory;
  double temp = 1.0;
  std::string sharing = "per_problem";
  std::vector<double> prior;
  o.require("vocab_size", K);
  o.get("temperature", temp);
  o.get("context_horizon", horizon);
  o.get("sharing", sharing);
  o.get("prior", prior);
  PolicySharing s;
  if (sharing == "per_problem") s = PolicySharing::kPerProblem;
  else if (sharing == "shared_plus_per_problem") s = PolicySharing::kSharedPlusPerProblem;
  else throw ConfigError(o.child("sharing"), "expected per_problem or shared_plus_per_problem");
  try {
    TabularSoftmaxPolicy p(K, temp, horizon, s);
    if (!prior.empty()) p.set_prior(prior);
    if (o.has("entries")) {
      const auto& arr = o.at("entries");
      if (!arr.is_array()) throw ConfigError(o.child("entries"), "expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        StrictObject e(arr[i], o.child("entries") + "[" + std::to_string(i) + "]");
        ContextKey k;
        std::vector<double> logits;
        e.get("problem", k.problem);
        e.require("position", k.position);
        e.get("history", k.history);
        e.require("logits", logits);
        e.finish();
        p.set_entry(k, std::move(logits));
      }
    }
    o.finish();
    return p;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

inline json to_json(const AdvantageReport& r) {
  return {{"deltas", r.deltas}, {"advantages", r.advantages}, {"S", r.S}, {"L", r.L},
          {"alpha", r.alpha},   {"R", r.R},                   {"epsilon_bound", r.epsilon_bound}};
}

inline json to_json(const ProblemSet& s) {
  json problems = json::array();
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto p = to_json(s.problems[i]);
    p["class"] = to_string(s.classes[i]);
    p["skill"] = s.skill[i];
    p["measured_rate"] = s.measured_rate[i];
    problems.push_back(p);
  }
  return {{"vocab", to_json(s.vocab)}, {"problems", problems}};
}

// ---- verification reports -----------------------------------------------

inline json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json to_json(const SuiteReport& r) {
  json j{{"theorem", r.theorem},
         {"instances", r.instances},
         {"failures", r.failures},
         {"max_violation", finite_or_null(r.max_violation)}};
  if (!r.properties.empty()) {
    json props = json::array();
    for (const auto& p : r.properties)
      props.push_back({{"name", p.name},
                       {"instances", p.instances},
                       {"failures", p.failures},
                       {"max_violation", finite_or_null(p.max_violation)},
                       {"informational", p.informational}});
    j["properties"] = props;
  }
  if (!r.suites.empty()) {
    json s = json::array();
    for (const auto& x : r.suites) s.push_back(to_json(x));
    j["suites"] = s;
  }
  return j;
}

// ---- experiment configs ---------------------------------------------------

inline void read_base(const json& j, const std::string& path, BaseModelConfig& b) {
  StrictObject o(j, path);
  o.get("max_len", b.max_len);
  o.get("hazard_center", b.hazard_center);
  o.get("hazard_slope", b.hazard_slope);
  o.get("format_logprob", b.format_logprob);
  o.get("stop_prob", b.stop_prob);
  o.get("occasional_skill", b.occasional_skill);
  o.get("full_skill", b.full_skill);
  o.get("skill_jitter", b.skill_jitter);
  o.finish();
  try {
    b.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

inline void read_problems(const json& j, const std::string& path, ProblemsConfig& p) {
  StrictObject o(j, path);
  o.get("n_unsolvable", p.spec.n_unsolvable);
  o.get("n_occasional", p.spec.n_occasional);
  o.get("n_full", p.spec.n_full);
  o.get("seed", p.seed);
  o.get("id_prefix", p.id_prefix);
  o.get("validation_samples", p.validation_samples);
  o.finish();
  if (p.spec.n_unsolvable < 0 || p.spec.n_occasional < 0 || p.spec.n_full < 0)
    throw ConfigError(path, "problem counts must be >= 0");
  if (p.spec.n_unsolvable + p.spec.n_occasional + p.spec.n_full == 0)
    throw ConfigError(path, "at least one problem is required");
  if (p.validation_samples < 1) throw ConfigError(o.child("validation_samples"), "must be >= 1");
}

inline void read_train(const json& j, const std::string& path, TrainConfig& t) {
  StrictObject o(j, path);
  std::string algo = "ppo", kl_red = "token_mean";
  o.get("algorithm", algo);
  if (algo == "ppo") t.algorithm = Algorithm::kPpo;
  else if (algo == "grpo") t.algorithm = Algorithm::kGrpo;
  else throw ConfigError(o.child("algorithm"), "expected ppo or grpo");
  o.get("gamma", t.gae.gamma);
  o.get("lambda", t.gae.lambda);
  o.get("clip", t.gae.clip);
  t.grpo.clip = t.gae.clip;
  o.get("kl_weight", t.grpo.kl_weight);
  o.get("normalize_by_std", t.grpo.normalize_by_std);
  o.get("normalize_by_length", t.grpo.normalize_by_length);
  o.get("kl_reduction", kl_red);
  if (kl_red == "token_mean") t.kl_reduction = KlReduction::kTokenMean;
  else if (kl_red == "token_sum") t.kl_reduction = KlReduction::kTokenSum;
  else throw ConfigError(o.child("kl_reduction"), "expected token_mean or token_sum");
  o.get("samples_per_problem", t.samples_per_problem);
  o.get("actor_lr", t.actor_lr);
  o.get("critic_lr", t.critic_lr);
  o.get("value_kl_weight", t.value_kl_weight);
  o.get("temperature", t.temperature);
  o.get("steps", t.steps);
  o.get("seed", t.seed);
  o.get("step_penalty", t.step_penalty);
  o.finish();
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

inline void read_stage(const json& j, const std::string& path, StageConfig& s) {
  StrictObject o(j, path);
  if (!o.has("problems")) throw ConfigError(o.child("problems"), "missing required field");
  read_problems(o.at("problems"), o.child("problems"), s.problems);
  if (o.has("train")) read_train(o.at("train"), o.child("train"), s.train);
  o.finish();
}

inline TrainExperiment train_experiment_from_json(const json& j) {
  TrainExperiment ex;
  StrictObject o(j, "");
  std::string kind = "train";
  o.get("experiment", kind);
  if (kind != "train") throw ConfigError("experiment", "expected \"train\"");
  if (o.has("base_model")) read_base(o.at("base_model"), "base_model", ex.base);
  if (o.has("warmup")) {
    ex.warmup.emplace();
    read_stage(o.at("warmup"), "warmup", *ex.warmup);
  }
  if (!o.has("stage")) throw ConfigError("stage", "missing required field");
  read_stage(o.at("stage"), "stage", ex.stage);
  o.finish();
  return ex;
}

inline TwoPhaseExperiment two_phase_experiment_from_json(const json& j) {
  TwoPhaseExperiment ex;
  StrictObject o(j, "");
  std::string kind = "two-phase";
  o.get("experiment", kind);
  if (kind != "two-phase") throw ConfigError("experiment", "expected \"two-phase\"");
  if (o.has("base_model")) read_base(o.at("base_model"), "base_model", ex.base);
  if (!o.has("phase1")) throw ConfigError("phase1", "missing required field");
  if (!o.has("phase2")) throw ConfigError("phase2", "missing required field");
  read_stage(o.at("phase1"), "phase1", ex.phase1);
  read_stage(o.at("phase2"), "phase2", ex.phase2);
  o.get("eval_samples", ex.eval_samples);
  o.get("eval_seed", ex.eval_seed);
  o.get("accuracy_tolerance", ex.accuracy_tolerance);
  o.finish();
  if (ex.eval_samples < 1) throw ConfigError("eval_samples", "must be >= 1");
  if (ex.accuracy_tolerance < 0.0) throw ConfigError("accuracy_tolerance", "must be >= 0");
  return ex;
}

inline SweepExperiment sweep_experiment_from_json(const json& j) {
  SweepExperiment ex;
  StrictObject o(j, "");
  std::string kind = "sweep";
  o.get("experiment", kind);
  if (kind != "sweep") throw ConfigError("experiment", "expected \"sweep\"");
  if (o.has("base_model")) read_base(o.at("base_model"), "base_model", ex.base);
  if (!o.has("stage")) throw ConfigError("stage", "missing required field");
  read_stage(o.at("stage"), "stage", ex.stage);
  o.get("lambdas", ex.lambdas);
  o.get("overflow_factor", ex.overflow_factor);
  o.get("reduction_fraction", ex.reduction_fraction);
  o.finish();
  if (ex.lambdas.empty()) throw ConfigError("lambdas", "must be non-empty");
  for (double l : ex.lambdas)
    if (!(l > 0.0 && l <= 1.0)) throw ConfigError("lambdas", "values must be in (0,1]");
  if (ex.stage.train.algorithm != Algorithm::kPpo) throw ConfigError("stage.train.algorithm", "sweep requires ppo");
  if (!(ex.overflow_factor > 0.0)) throw ConfigError("overflow_factor", "must be > 0");
  if (!(ex.reduction_fraction > 0.0 && ex.reduction_fraction < 1.0))
    throw ConfigError("reduction_fraction", "must be in (0,1)");
  return ex;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open file");
  try {
    return json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

// ---- CSV and atomic writes ------------------------------------------------

// Shortest representation that round-trips.
inline std::string fmt_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline const char* kTrainLogCsvHeader =
    "step,mean_reward,accuracy,mean_len,min_len,max_len,policy_loss,value_loss,kl,S,adv_mean,adv_std,"
    "adv_abs_max,max_abs_target,max_abs_reward,zero_advantage_rate,all_correct_rate,all_wrong_rate,"
    "policy_grad_norm";

inline std::string train_log_csv(const TrainLog& log) {
  std::ostringstream os;
  os << kTrainLogCsvHeader << '\n';
  for (const auto& r : log.records) {
    os << r.step;
    for (double x : {r.mean_reward, r.accuracy, r.mean_len}) os << ',' << fmt_double(x);
    os << ',' << r.min_len << ',' << r.max_len;
    for (double x : {r.policy_loss, r.value_loss, r.kl, r.S, r.adv_mean, r.adv_std, r.adv_abs_max,
                     r.max_abs_target, r.max_abs_reward, r.zero_advantage_rate, r.all_correct_rate,
                     r.all_wrong_rate, r.policy_grad_norm})
      os << ',' << fmt_double(x);
    os << '\n';
  }
  return os.str();
}

inline const char* kGroupCsvHeader = "step,group_id,k,N,advantage_correct,advantage_wrong,policy_loss,kl,total";

inline std::string group_csv(const TrainLog& log) {
  std::ostringstream os;
  os << kGroupCsvHeader << '\n';
  for (const auto& g : log.groups)
    os << g.step << ',' << g.group_id << ',' << g.k << ',' << g.N << ',' << fmt_double(g.advantage_correct) << ','
       << fmt_double(g.advantage_wrong) << ',' << fmt_double(g.policy_loss) << ',' << fmt_double(g.kl) << ','
       << fmt_double(g.total) << '\n';
  return os.str();
}

// Rows (N, k, sigma, A_{r=1}, A_{r=0}) for k in {1, 2, 3, N-3, N-2, N-1}.
inline std::string advantage_table_csv(const std::vector<int>& Ns) {
  std::ostringstream os;
  os << "N,k,sigma,advantage_correct,advantage_wrong\n";
  for (int N : Ns) {
    if (N < 2) throw std::invalid_argument("table: N must be >= 2");
    std::set<int> ks;
    for (int k : {1, 2, 3, N - 3, N - 2, N - 1})
      if (k >= 1 && k <= N - 1) ks.insert(k);
    for (int k : ks)
      os << N << ',' << k << ',' << fmt_double(binary_group_stddev(N, k)) << ','
         << fmt_double(closed_form_advantage(N, k, 1)) << ',' << fmt_double(closed_form_advantage(N, k, 0)) << '\n';
  }
  return os.str();
}

// Writes to a sibling temp file, then renames over the target.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace lengthlab
