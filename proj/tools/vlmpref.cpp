// vlmpref command-line entry points.
//
// Exit status: 0 success, 1 configuration or input error, 2 external service
// failure (the run directory then holds a resumable checkpoint).

#include <malloc.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vlmpref/analysis.hpp"
#include "vlmpref/error.hpp"
#include "vlmpref/orchestrator.hpp"
#include "vlmpref/serialization.hpp"

namespace fs = std::filesystem;
using namespace vlmpref;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kServiceError = 2;

// Raised for invalid invocations; mapped to exit status 1.
struct UsageError : Error {
  using Error::Error;
};

void refuse_overwrite(const std::vector<fs::path>& outputs, bool force) {
  if (force) return;
  for (const auto& p : outputs)
    if (fs::exists(p)) throw UsageError("output exists (use --force): " + p.string());
}

// A single ensemble member seen as a reward model of its own.
class MemberModel final : public RewardModel {
 public:
  explicit MemberModel(const RewardNetwork& member) : member_(member) {}
  [[nodiscard]] RewardInputMode input_mode() const override { return member_.spec().mode; }
  [[nodiscard]] Eigen::VectorXd predict_batch(const Eigen::MatrixXd& inputs) const override {
    return member_.predict(inputs);
  }

 private:
  const RewardNetwork& member_;
};

RewardInputEncoder encoder_for(const RunConfig& config, const RewardModelEnsemble& ensemble,
                               std::shared_ptr<Environment> env) {
  if (ensemble.spec().mode == RewardInputMode::State)
    return RewardInputEncoder::for_states(static_cast<std::size_t>(ensemble.spec().state_dim));
  (void)config;
  return RewardInputEncoder::for_images(ensemble.spec().resolution,
                                        [env](std::span<const double> s, Resolution r) { return env->render(s, r); });
}

std::unique_ptr<SacAgentF> load_agent(const fs::path& run_dir, const Environment& env,
                                      std::optional<std::string> checkpoint) {
  if (!checkpoint) {
    std::ifstream in(run_dir / "run_state.json");
    if (!in) throw UsageError("no policy checkpoint in " + run_dir.string());
    checkpoint = json::parse(in).at("sac_checkpoint").get<std::string>();
  }
  fs::path file = *checkpoint;
  if (file.is_relative() && !fs::exists(file)) file = run_dir / file;
  if (!fs::exists(file)) throw UsageError("missing checkpoint: " + file.string());
  SacConfig sac;
  sac.state_dim = env.state_dim();
  sac.action_dim = env.action_dim();
  auto agent = std::make_unique<SacAgentF>(sac, 0);
  agent->load(file);
  return agent;
}

RunConfig run_config_of(const fs::path& run_dir) {
  if (!fs::exists(run_dir / "config.json")) throw UsageError("not a run directory: " + run_dir.string());
  auto config = load_config(run_dir / "config.json");
  config.run_dir = run_dir.string();
  return config;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config_file;
  std::string env;
  std::string provider;
  std::string goal;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::string schedule;
  std::string reward_input;
  std::string run_dir;
  std::string backend_config;
  std::optional<std::int64_t> eval_interval;
  std::optional<int> eval_episodes;
  std::optional<std::int64_t> warmup;
  std::optional<int> segment_length;
  std::optional<int> workers;
  std::optional<std::int64_t> checkpoint_interval;
  bool audit_relabel = false;
  bool pretrain = false;
  bool force = false;
  bool resume = false;
};

int run_train(const TrainArgs& a) {
  const fs::path run_dir = a.run_dir;
  RunHooks hooks;
  hooks.on_session = [](const SessionReport& s) {
    std::cerr << "session " << s.index << " at step " << s.env_steps << ": " << s.answered << "/" << s.requested
              << " answered, labels(-1/0/1)=" << s.labels.at(-1) << "/" << s.labels.at(0) << "/" << s.labels.at(1)
              << ", trainable " << s.trainable;
    if (s.training) std::cerr << ", reward acc " << s.training->final_accuracy << " after " << s.training->epochs
                              << " epochs";
    std::cerr << '\n';
  };

  std::unique_ptr<TrainingRun> run;
  if (a.resume) {
    const auto config = run_config_of(run_dir);
    run = TrainingRun::resume(run_dir, make_feedback_for(config, &std::cin, &std::cerr), hooks);
  } else {
    RunConfig config;
    if (!a.config_file.empty()) config = load_config(a.config_file);
    if (!a.env.empty()) config.env_name = a.env;
    if (!a.provider.empty()) config.provider_name = a.provider;
    if (!a.goal.empty()) config.goal_description = a.goal;
    if (a.seed) config.seed = *a.seed;
    if (a.steps) config.total_steps = *a.steps;
    if (!a.schedule.empty()) config.schedule = parse_schedule(a.schedule);
    if (!a.reward_input.empty()) config.reward_input_mode = parse_reward_input_mode(a.reward_input);
    if (!a.backend_config.empty()) config.backend_config = fs::absolute(a.backend_config).string();
    if (a.eval_interval) config.eval_interval = *a.eval_interval;
    if (a.eval_episodes) config.eval_episodes = *a.eval_episodes;
    if (a.warmup) config.warmup_steps = *a.warmup;
    if (a.segment_length) config.segment_length = *a.segment_length;
    if (a.workers) config.session_workers = *a.workers;
    if (a.checkpoint_interval) config.checkpoint_interval = *a.checkpoint_interval;
    if (a.audit_relabel) config.audit_relabel = true;
    if (a.pretrain) config.unsupervised_pretraining = true;
    config.run_dir = run_dir.string();
    if (provider_needs_goal(config.provider_name) && config.goal_description.empty())
      throw UsageError("goal required");
    config.validate();
    prepare_run_dir(run_dir, a.force);
    run = std::make_unique<TrainingRun>(config, make_feedback_for(config, &std::cin, &std::cerr), hooks);
  }

  const auto report = run->train();
  if (report.halted) {
    std::cerr << "halted at step " << report.env_steps << ": " << report.halt_reason
              << " (resume with: train --resume --run-dir " << run_dir.string() << ")\n";
    return kServiceError;
  }
  std::cout << "completed " << report.env_steps << " steps, " << report.queries_issued << " queries";
  if (!report.metrics.empty())
    std::cout << ", final eval return " << report.metrics.back().eval_return << ", success rate "
              << report.metrics.back().success_rate;
  std::cout << '\n';
  return kOk;
}

// ---------------------------------------------------------------- eval

int run_eval(const fs::path& run_dir, int episodes, std::optional<std::string> checkpoint,
             std::optional<std::uint64_t> seed, bool force) {
  const auto config = run_config_of(run_dir);
  refuse_overwrite({run_dir / "eval.json"}, force);
  auto env = make_environment(config.env_name, config);
  auto agent = load_agent(run_dir, *env, checkpoint);
  const auto result = evaluate(*agent, *env, episodes, seed.value_or(derive_seed(config.seed, 99)));
  json out{{"episodes", episodes},
           {"mean_return", result.mean_return},
           {"success_rate", result.success_rate},
           {"returns", result.returns}};
  std::ofstream(run_dir / "eval.json", std::ios::trunc) << out.dump(2) << '\n';
  std::cout << "mean return " << result.mean_return << ", success rate " << result.success_rate << '\n';
  return kOk;
}

// ---------------------------------------------------------------- analyze-labels

int run_analyze_labels(const fs::path& run_dir, int bins, bool force) {
  if (bins < 1) throw UsageError("--bins must be positive");
  if (!fs::exists(run_dir / "preferences.jsonl")) throw UsageError("missing preferences.jsonl in " + run_dir.string());
  const fs::path csv = run_dir / "plots" / "accuracy_bins.csv";
  const fs::path png = run_dir / "plots" / "accuracy_bins.png";
  refuse_overwrite({csv, png}, force);
  const auto records = PreferenceLog::load(run_dir);
  if (records.empty()) throw UsageError("no records");
  const auto report = bin_accuracy(records, bins);
  write_accuracy_csv(report, csv);
  plot_accuracy(report, png);
  const auto o = report.overall();
  std::cout << "records " << report.total << ": correct " << o.correct << ", incorrect " << o.incorrect
            << ", no preference " << o.no_preference << ", accuracy " << report.accuracy() << '\n';
  return kOk;
}

// ---------------------------------------------------------------- align

int run_align(const std::vector<fs::path>& run_dirs, int episodes, const std::string& policy_kind,
              std::optional<std::uint64_t> seed, bool force) {
  if (run_dirs.empty()) throw UsageError("--run-dir required");
  if (episodes < 1) throw UsageError("--episodes must be at least 1");
  if (policy_kind != "checkpoint" && policy_kind != "scripted") throw UsageError("--policy: checkpoint or scripted");
  const auto& primary = run_dirs.front();
  const auto config = run_config_of(primary);
  const fs::path csv = primary / "plots" / "alignment.csv";
  const fs::path png = primary / "plots" / "alignment.png";
  refuse_overwrite({csv, png}, force);

  std::vector<RewardModelEnsemble> ensembles;
  for (const auto& dir : run_dirs) {
    if (!fs::exists(dir / "reward_member_0.ckpt")) throw UsageError("missing reward checkpoints in " + dir.string());
    ensembles.push_back(RewardModelEnsemble::load(dir));
    if (ensembles.back().spec().mode != ensembles.front().spec().mode) throw UsageError("incompatible reward models");
  }
  // One run: its members are the models compared; several runs: one
  // ensemble mean per run.
  std::vector<std::unique_ptr<MemberModel>> members;
  std::vector<const RewardModel*> models;
  if (ensembles.size() == 1) {
    for (std::size_t i = 0; i < ensembles[0].size(); ++i) {
      members.push_back(std::make_unique<MemberModel>(ensembles[0].member(i)));
      models.push_back(members.back().get());
    }
  } else {
    for (const auto& e : ensembles) models.push_back(&e);
  }

  std::shared_ptr<Environment> env = make_environment(config.env_name, config);
  std::unique_ptr<SacAgentF> agent;
  Policy policy;
  if (policy_kind == "scripted") {
    policy = scripted_expert(config.env_name);
  } else {
    agent = load_agent(primary, *env, std::nullopt);
    policy = [&agent](std::span<const double> s) { return agent->select_action(s, true); };
  }

  Rng rng(seed.value_or(derive_seed(config.seed, 98)));
  std::vector<Segment> trajectory;
  std::int64_t step = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    auto state = env->reset(rng);
    trajectory.push_back({{state}, nullptr, env->progress(state), ep, step});
    while (!env->finished()) {
      const auto result = env->step(policy(state));
      state = result.next_state;
      trajectory.push_back({{state}, nullptr, result.progress, ep, ++step});
    }
    ++step;
  }
  const auto encoder = encoder_for(config, ensembles.front(), env);
  const auto curve = alignment_curve(models, trajectory, encoder);
  write_alignment_csv(curve, csv);
  plot_alignment(curve, png);
  std::cout << "trajectory length " << trajectory.size() << ", models " << models.size() << '\n';
  return kOk;
}

// ---------------------------------------------------------------- plot

int run_plot(const std::vector<fs::path>& run_dirs, std::string out_dir, bool force) {
  if (run_dirs.empty()) throw UsageError("--run-dir required");
  for (const auto& d : run_dirs)
    if (!fs::exists(d / "metrics.csv")) throw UsageError("missing metrics.csv in " + d.string());
  const fs::path out = out_dir.empty() ? run_dirs.front() / "plots" : fs::path(out_dir);
  const fs::path csv = out / "learning_curve_runs.csv";
  const fs::path png = out / "learning_curve_runs.png";
  refuse_overwrite({csv, png}, force);
  const auto curve = learning_curve(run_dirs);
  write_learning_curve_csv(curve, csv);
  plot_learning_curve(curve, png);
  std::cout << "runs " << curve.runs << ", grid points " << curve.steps.size() << '\n';
  return kOk;
}

// ---------------------------------------------------------------- cache-audit

int run_cache_audit(const fs::path& run_dir) {
  const fs::path cache = run_dir / "vlm_cache.jsonl";
  const fs::path audit = run_dir / "vlm_queries.jsonl";
  if (!fs::exists(cache) && !fs::exists(audit)) throw UsageError("no VLM cache or query log in " + run_dir.string());

  json summary;
  if (fs::exists(cache)) {
    std::ifstream in(cache);
    std::map<std::string, int> keys;
    std::size_t lines = 0, torn = 0;
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      ++lines;
      try {
        ++keys[json::parse(line).at("key").get<std::string>()];
      } catch (const std::exception&) {
        ++torn;
      }
    }
    std::size_t duplicates = 0;
    for (const auto& [k, n] : keys) duplicates += static_cast<std::size_t>(n - 1);
    summary["cache"] = {{"entries", lines}, {"unique_keys", keys.size()}, {"duplicates", duplicates}, {"torn", torn}};
  }
  if (fs::exists(audit)) {
    std::ifstream in(audit);
    std::size_t queries = 0, cached = 0, errors = 0;
    std::map<std::string, std::size_t> by_template;
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const std::exception&) {
        continue;
      }
      ++queries;
      if (j.value("cached", false)) ++cached;
      if (j.contains("error")) ++errors;
      ++by_template[j.value("template_id", std::string("unknown"))];
    }
    summary["queries"] = {{"total", queries},
                          {"cached", cached},
                          {"backend", queries - cached - errors},
                          {"errors", errors},
                          {"by_template", by_template}};
  }
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep freed network buffers in the heap instead of returning them to the OS
  // after every update.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);

  CLI::App app{"Preference-based RL with vision-language model feedback"};
  app.require_subcommand(1);

  TrainArgs t;
  auto* train = app.add_subcommand("train", "Run preference-based training");
  train->add_option("--config", t.config_file, "Base run configuration (JSON)");
  train->add_option("--env", t.env, "Environment name");
  train->add_option("--provider", t.provider, "Feedback provider, e.g. oracle, noisy-oracle:0.2, vlm2stage");
  train->add_option("--goal", t.goal, "Task goal text for VLM providers");
  train->add_option("--seed", t.seed);
  train->add_option("--steps", t.steps, "Total environment steps");
  train->add_option("--schedule", t.schedule, "M,K,N: queries per session, steps between sessions, budget");
  train->add_option("--reward-input", t.reward_input, "state or image")->check(CLI::IsMember({"state", "image"}));
  train->add_option("--run-dir", t.run_dir)->required();
  train->add_option("--backend-config", t.backend_config, "VLM backend configuration (JSON)");
  train->add_option("--eval-interval", t.eval_interval);
  train->add_option("--eval-episodes", t.eval_episodes);
  train->add_option("--warmup", t.warmup, "Random-action steps before policy updates");
  train->add_option("--segment-length", t.segment_length);
  train->add_option("--workers", t.workers, "Concurrent queries within a session");
  train->add_option("--checkpoint-interval", t.checkpoint_interval);
  train->add_flag("--audit-relabel", t.audit_relabel, "Verify replay rewards after every relabel");
  train->add_flag("--pretrain", t.pretrain, "State-entropy exploration before the first reward update");
  train->add_flag("--force", t.force, "Replace a previous run in --run-dir");
  train->add_flag("--resume", t.resume, "Continue the run in --run-dir");

  std::string run_dir, checkpoint_name, policy = "checkpoint", out_dir;
  std::vector<std::string> run_dirs;
  int episodes = 10, align_episodes = 1, bins = 10;
  std::optional<std::uint64_t> seed;
  bool force = false;

  auto* eval = app.add_subcommand("eval", "Evaluate a policy checkpoint");
  eval->add_option("--run-dir", run_dir)->required();
  eval->add_option("--episodes", episodes);
  eval->add_option("--checkpoint", checkpoint_name, "Checkpoint file (default: latest)");
  eval->add_option("--seed", seed);
  eval->add_flag("--force", force);

  auto* labels = app.add_subcommand("analyze-labels", "Label accuracy by task-progress difference");
  labels->add_option("--run-dir", run_dir)->required();
  labels->add_option("--bins", bins);
  labels->add_flag("--force", force);

  auto* align = app.add_subcommand("align", "Learned reward against task progress along a trajectory");
  align->add_option("--run-dir", run_dirs, "One or more run directories")->required();
  align->add_option("--episodes", align_episodes);
  align->add_option("--policy", policy, "checkpoint or scripted");
  align->add_option("--seed", seed);
  align->add_flag("--force", force);

  auto* plot = app.add_subcommand("plot", "Learning curves across runs");
  plot->add_option("--run-dir", run_dirs)->required();
  plot->add_option("--out", out_dir, "Output directory (default: first run's plots/)");
  plot->add_flag("--force", force);

  auto* audit = app.add_subcommand("cache-audit", "Summarize the VLM cache and query log");
  audit->add_option("--run-dir", run_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  auto paths = [&] {
    std::vector<fs::path> out;
    for (const auto& d : run_dirs) out.emplace_back(d);
    return out;
  };

  try {
    if (*train) return run_train(t);
    if (*eval)
      return run_eval(run_dir, episodes, checkpoint_name.empty() ? std::nullopt : std::optional(checkpoint_name), seed,
                      force);
    if (*labels) return run_analyze_labels(run_dir, bins, force);
    if (*align) return run_align(paths(), align_episodes, policy, seed, force);
    if (*plot) return run_plot(paths(), out_dir, force);
    if (*audit) return run_cache_audit(run_dir);
  } catch (const ProviderUnavailable& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kServiceError;
  } catch (const CredentialRejected& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kServiceError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kConfigError;
}
