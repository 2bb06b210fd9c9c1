// Command-line driver: verification suites, the advantage table, and the
// training experiments (train, two-phase, sweep).

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lengthlab/io.hpp"

namespace fs = std::filesystem;
using namespace lengthlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// LENGTHLAB_LOG: quiet, info (default) or debug.
int log_level() {
  const char* v = std::getenv("LENGTHLAB_LOG");
  if (!v) return 1;
  const std::string s(v);
  if (s == "quiet") return 0;
  if (s == "debug") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[lengthlab] " << msg << '\n';
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[lengthlab:debug] " << msg << '\n';
}

json checks_json(const CheckMap& c) {
  json j = json::object();
  for (const auto& [k, v] : c) j[k] = v;
  return j;
}

json dynamics_json(const DynamicsSummary& d) {
  return {{"steps", d.steps},
          {"len_initial", d.len_initial},
          {"len_final", d.len_final},
          {"len_peak", d.len_peak},
          {"growth_ratio", d.growth_ratio},
          {"reduction_from_peak", d.reduction_from_peak},
          {"acc_initial", d.acc_initial},
          {"acc_final", d.acc_final},
          {"min_len_initial", d.min_len_initial},
          {"min_len_final", d.min_len_final},
          {"positive_loss_fraction", d.positive_loss_fraction},
          {"reward_constant", d.reward_constant},
          {"zero_advantage_tail", d.zero_advantage_tail},
          {"abs_policy_loss_tail", d.abs_policy_loss_tail},
          {"grad_norm_initial", d.grad_norm_initial},
          {"grad_norm_tail", d.grad_norm_tail}};
}

json eval_json(const PolicyEval& e) {
  return {{"accuracy", e.accuracy}, {"mean_len", e.mean_len}, {"mean_reward", e.mean_reward}};
}

void override_seed(TrainConfig& t, const std::optional<std::uint64_t>& seed) {
  if (seed) t.seed = *seed;
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw ConfigError("--out", "output directory is required");
  fs::path p(out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw ConfigError("--out", "cannot create directory " + out);
  return p;
}

int finish(const fs::path& out, json summary, const CheckMap& checks) {
  const bool ok = all_pass(checks);
  summary["checks"] = checks_json(checks);
  summary["passed"] = ok;
  write_atomic(out / "summary.json", dump(summary));
  std::cout << dump(summary);
  for (const auto& [k, v] : checks)
    if (!v) log_info("check failed: " + k);
  return ok ? kExitOk : kExitFailure;
}

int cmd_verify(const std::string& suite, int instances, std::uint64_t seed, const std::string& out) {
  const bool known = suite == "all" || std::find(suite_names().begin(), suite_names().end(), suite) != suite_names().end();
  if (!known) {
    std::cerr << "error: unknown suite '" << suite << "' (expected theorem1, theorem2, theorem3, lemma, grpo-algebra, all)\n";
    return kExitUsage;
  }
  if (instances < 1) {
    std::cerr << "error: --instances must be >= 1\n";
    return kExitUsage;
  }
  const auto rep = run_suite(suite, instances, seed);
  const auto j = to_json(rep);
  if (!out.empty()) write_atomic(prepare_out(out) / ("verify_" + suite + ".json"), dump(j));
  std::cout << dump(j);
  return rep.passed() ? kExitOk : kExitFailure;
}

int cmd_table(const std::vector<int>& Ns, const std::string& out) {
  for (int N : Ns)
    if (N < 2) {
      std::cerr << "error: N values must be >= 2\n";
      return kExitUsage;
    }
  const auto csv = advantage_table_csv(Ns);
  if (!out.empty()) write_atomic(prepare_out(out) / "advantage_table.csv", csv);
  std::cout << csv;
  return kExitOk;
}

int cmd_train(const std::string& config, const std::string& out_dir, const std::optional<std::uint64_t>& seed) {
  auto ex = train_experiment_from_json(read_json_file(config));
  override_seed(ex.stage.train, seed);
  if (ex.warmup) override_seed(ex.warmup->train, seed);
  const auto out = prepare_out(out_dir);
  log_info(std::string("train: ") + to_string(ex.stage.train.algorithm) + ", " +
           std::to_string(ex.stage.train.steps) + " steps");
  const auto run = run_train(ex);
  write_atomic(out / "train_log.csv", train_log_csv(run.log));
  if (run.log.algorithm == Algorithm::kGrpo) write_atomic(out / "groups.csv", group_csv(run.log));
  if (run.warmup_log) write_atomic(out / "warmup_log.csv", train_log_csv(*run.warmup_log));
  write_atomic(out / "policy.json", dump(to_json(run.policy)));
  write_atomic(out / "problems.json", dump(to_json(run.set)));
  json summary{{"experiment", "train"},
               {"algorithm", to_string(run.log.algorithm)},
               {"seed", ex.stage.train.seed},
               {"steps", run.log.records.size()},
               {"dynamics", dynamics_json(summarize_dynamics(run.log))}};
  if (run.log.algorithm == Algorithm::kGrpo && !run.log.group_stats.empty()) {
    const auto c = collapse_monitor(run.log.group_stats);
    summary["collapse"] = {{"kl_dominance", c.kl_dominance}, {"first_dominance_step", c.first_dominance_step}};
  }
  log_debug("wrote " + (out / "train_log.csv").string());
  return finish(out, summary, run.checks);
}

int cmd_two_phase(const std::string& config, const std::string& out_dir, const std::optional<std::uint64_t>& seed) {
  auto ex = two_phase_experiment_from_json(read_json_file(config));
  override_seed(ex.phase1.train, seed);
  override_seed(ex.phase2.train, seed);
  const auto out = prepare_out(out_dir);
  log_info("two-phase: " + std::to_string(ex.phase1.train.steps) + " + " + std::to_string(ex.phase2.train.steps) +
           " steps");
  const auto run = run_two_phase(ex);
  write_atomic(out / "phase1_log.csv", train_log_csv(run.result.log1));
  write_atomic(out / "phase2_log.csv", train_log_csv(run.result.log2));
  write_atomic(out / "policy_phase1.json", dump(to_json(run.result.policy1)));
  write_atomic(out / "policy_phase2.json", dump(to_json(run.result.policy2)));
  json summary{{"experiment", "two-phase"},
               {"phase1", {{"dynamics", dynamics_json(run.d1)}, {"eval_on_phase2_set", eval_json(run.result.eval1)}}},
               {"phase2", {{"dynamics", dynamics_json(run.d2)}, {"eval_on_phase2_set", eval_json(run.result.eval2)}}}};
  return finish(out, summary, run.checks);
}

int cmd_sweep(const std::string& config, const std::string& out_dir, const std::optional<std::uint64_t>& seed) {
  auto ex = sweep_experiment_from_json(read_json_file(config));
  override_seed(ex.stage.train, seed);
  const auto out = prepare_out(out_dir);
  log_info("sweep: " + std::to_string(ex.lambdas.size()) + " lambda values");
  const auto run = run_sweep(ex);
  json runs = json::array();
  for (const auto& r : run.runs) {
    const std::string name = "sweep_lambda_" + fmt_double(r.lambda) + ".csv";
    write_atomic(out / name, train_log_csv(r.log));
    runs.push_back({{"lambda", r.lambda},
                    {"log", name},
                    {"overflow", r.overflow},
                    {"overflow_step", r.overflow_step},
                    {"peak_abs_target", r.peak_abs_target},
                    {"length_reduction_step", r.length_reduction_step ? json(*r.length_reduction_step) : json(nullptr)}});
  }
  json summary{{"experiment", "sweep"}, {"runs", runs}};
  return finish(out, summary, run.checks);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lengthlab: response-length dynamics of PPO and GRPO on a synthetic token MDP"};
  app.require_subcommand(1);

  std::string suite = "all", out, config;
  int instances = 1000;
  std::uint64_t verify_seed = 0;
  std::optional<std::uint64_t> seed;
  std::vector<int> Ns{8, 16, 64, 256};

  auto* verify = app.add_subcommand("verify", "Run randomized verification suites");
  verify->add_option("--suite", suite, "theorem1, theorem2, theorem3, lemma, grpo-algebra or all");
  verify->add_option("--instances", instances, "Instances per suite");
  verify->add_option("--seed", verify_seed, "Instance generator seed");
  verify->add_option("--out", out, "Also write the report into this directory");

  auto* table = app.add_subcommand("table", "Closed-form binary-group advantages and stddevs as CSV");
  table->add_option("--n", Ns, "Group sizes")->delimiter(',');
  table->add_option("--out", out, "Write advantage_table.csv into this directory");

  std::vector<CLI::App*> runs;
  for (const char* name : {"train", "two-phase", "sweep"}) {
    auto* sub = app.add_subcommand(name, std::string("Run a ") + name + " experiment from a JSON config");
    sub->add_option("--config", config, "Experiment config (JSON)")->required();
    sub->add_option("--out", out, "Output directory")->required();
    sub->add_option("--seed", seed, "Override the training seed of every stage");
    runs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (verify->parsed()) return cmd_verify(suite, instances, verify_seed, out);
    if (table->parsed()) return cmd_table(Ns, out);
    if (runs[0]->parsed()) return cmd_train(config, out, seed);
    if (runs[1]->parsed()) return cmd_two_phase(config, out, seed);
    if (runs[2]->parsed()) return cmd_sweep(config, out, seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TrainingDiverged& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitFailure;
  } catch (const ProblemSetError& e) {
    std::cerr << "problem set error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
