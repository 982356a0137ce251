#include "vlmpref/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "vlmpref/analysis.hpp"
#include "vlmpref/error.hpp"

namespace vlmpref {

using nlohmann::json;

namespace {

constexpr const char* kMetricsHeader =
    "step,eval_return,success_rate,train_return,critic_loss,actor_loss,alpha,entropy,queries_issued,preferences,"
    "trainable";

// Streams of derive_seed.
enum : std::uint64_t {
  kEnvStream = 1,
  kActionStream,
  kFeedbackStream,
  kAgentStream,
  kRewardStream,
  kExploreStream,
  kEvalStream,
  kSessionStream = 1000,
};

std::string rng_state(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  if (!in) throw Error("corrupt generator state");
}

json session_json(const SessionReport& s) {
  json j{{"index", s.index},
         {"env_steps", s.env_steps},
         {"deferred", s.deferred},
         {"requested", s.requested},
         {"answered", s.answered},
         {"failed", s.failed},
         {"labels", {{"-1", s.labels.at(-1)}, {"0", s.labels.at(0)}, {"1", s.labels.at(1)}}},
         {"trainable", s.trainable},
         {"relabeled", s.relabeled}};
  if (s.training) {
    j["epochs"] = s.training->epochs;
    j["loss"] = s.training->final_loss;
    j["accuracy"] = s.training->final_accuracy;
    j["records"] = s.training->num_records;
  }
  if (s.stale_rewards) j["stale_rewards"] = *s.stale_rewards;
  if (!s.last_error.empty()) j["error"] = s.last_error;
  return j;
}

const std::vector<std::string> kArtifacts{"config.json",  "metrics.csv",     "preferences.jsonl", "scores.jsonl",
                                          "vlm_queries.jsonl", "reward_report.json", "run_state.json"};

bool is_run_artifact(const std::filesystem::path& p) {
  const auto name = p.filename().string();
  if (std::find(kArtifacts.begin(), kArtifacts.end(), name) != kArtifacts.end()) return true;
  if (name == "images" || name == "plots") return true;
  const auto ext = p.extension().string();
  return ext == ".ckpt" && (name.starts_with("sac_") || name.starts_with("reward_member_"));
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

void prepare_run_dir(const std::filesystem::path& run_dir, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(run_dir) && !fs::is_directory(run_dir)) throw Error("run directory is a file: " + run_dir.string());
  if (!fs::exists(run_dir)) return;
  std::vector<fs::path> previous;
  for (const auto& entry : fs::directory_iterator(run_dir))
    if (is_run_artifact(entry.path())) previous.push_back(entry.path());
  if (previous.empty()) return;
  if (!force) throw Error("run directory holds a previous run (use --force): " + run_dir.string());
  for (const auto& p : previous) fs::remove_all(p);
}

// ---------------------------------------------------------------- construction

TrainingRun::TrainingRun(RunConfig config, FeedbackSource source, RunHooks hooks)
    : TrainingRun(ResumeTag{}, std::move(config), std::move(source), std::move(hooks)) {
  std::filesystem::remove(run_dir_ / "preferences.jsonl");
  std::filesystem::remove(run_dir_ / "scores.jsonl");
  save_config(config_, run_dir_ / "config.json");
  metrics_out_.open(run_dir_ / "metrics.csv", std::ios::trunc);
  if (!metrics_out_) throw Error("cannot write metrics.csv");
  metrics_out_ << kMetricsHeader << '\n' << std::flush;
  preference_log_ = std::make_unique<PreferenceLog>(run_dir_);
  if (kind_ == FeedbackKind::Score) scores_out_.open(run_dir_ / "scores.jsonl", std::ios::trunc);
  write_reward_report();
}

TrainingRun::TrainingRun(ResumeTag, RunConfig config, FeedbackSource source, RunHooks hooks)
    : config_(std::move(config)),
      source_(std::move(source)),
      hooks_(std::move(hooks)),
      run_dir_(config_.run_dir),
      replay_(config_.replay_capacity),
      images_(config_.image_buffer_capacity) {
  config_.validate();
  const int set = (source_.preference ? 1 : 0) + (source_.score ? 1 : 0) + (source_.direct ? 1 : 0);
  if (set != 1) throw Error("feedback source must hold exactly one provider");
  kind_ = source_.preference ? FeedbackKind::Preference
          : source_.score    ? FeedbackKind::Score
                             : FeedbackKind::Direct;
  std::filesystem::create_directories(run_dir_ / "plots");
  build();
}

TrainingRun::~TrainingRun() = default;

void TrainingRun::build() {
  env_ = make_environment(config_.env_name, config_);
  eval_env_ = make_environment(config_.env_name, config_);
  env_rng_.seed(derive_seed(config_.seed, kEnvStream));
  action_rng_.seed(derive_seed(config_.seed, kActionStream));
  feedback_rng_.seed(derive_seed(config_.seed, kFeedbackStream));
  explore_rng_.seed(derive_seed(config_.seed, kExploreStream));

  SacConfig sac;
  sac.state_dim = env_->state_dim();
  sac.action_dim = env_->action_dim();
  sac.discount = config_.discount;
  agent_ = std::make_unique<SacAgentF>(sac, derive_seed(config_.seed, kAgentStream));

  RewardNetworkSpec spec;
  if (config_.reward_input_mode == RewardInputMode::State) {
    spec = RewardNetworkSpec::for_states(env_->state_dim());
    encoder_ = RewardInputEncoder::for_states(static_cast<std::size_t>(env_->state_dim()));
  } else {
    spec = RewardNetworkSpec::for_images(config_.reward_resolution);
    const Environment* renderer = eval_env_.get();  // render() only reads its arguments
    encoder_ = RewardInputEncoder::for_images(
        config_.reward_resolution, [renderer](std::span<const double> s, Resolution r) { return renderer->render(s, r); });
  }
  reward_ = std::make_unique<RewardModelEnsemble>(spec, config_.ensemble_size, derive_seed(config_.seed, kRewardStream),
                                                  config_.reward_learning_rate);
}

// ---------------------------------------------------------------- data collection

void TrainingRun::begin_episode() {
  state_ = env_->reset(env_rng_);
  window_.assign(1, state_);
  episode_return_ = 0.0;
}

double TrainingRun::exploration_reward(const Vector& next_state) {
  // Distance to the k-th nearest neighbour among a sample of stored states.
  constexpr std::size_t kNeighbours = 5, kSample = 256;
  if (replay_.size() < kNeighbours) return 0.0;
  std::uniform_int_distribution<std::size_t> pick(0, replay_.size() - 1);
  const std::size_t n = std::min(kSample, replay_.size());
  std::vector<double> dist;
  dist.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& other = replay_[pick(explore_rng_)].next_state;
    double d = 0.0;
    for (std::size_t k = 0; k < other.size(); ++k) d += (other[k] - next_state[k]) * (other[k] - next_state[k]);
    dist.push_back(std::sqrt(d));
  }
  std::nth_element(dist.begin(), dist.begin() + kNeighbours - 1, dist.end());
  return std::log1p(dist[kNeighbours - 1]);
}

double TrainingRun::stored_reward(const Vector& state, const StepResult& step,
                                  const std::shared_ptr<const RgbImage>& image) {
  if (kind_ == FeedbackKind::Direct) return source_.direct->reward(step, *env_);
  if (config_.unsupervised_pretraining && !reward_trained_) return exploration_reward(step.next_state);
  Transition probe;
  probe.state = state;
  probe.reward_image = image;
  return reward_->predict_batch(encoder_.encode(probe))(0);
}

Transition TrainingRun::collect_step() {
  if (state_.empty()) begin_episode();

  Vector action;
  if (env_steps_ < config_.warmup_steps) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    action.resize(static_cast<std::size_t>(env_->action_dim()));
    for (auto& a : action) a = u(action_rng_);
  } else {
    action = agent_->select_action(state_, false);
  }

  const StepResult step = env_->step(action);
  std::shared_ptr<const RgbImage> reward_image;
  if (config_.reward_input_mode == RewardInputMode::Image)
    reward_image = std::make_shared<const RgbImage>(encoder_.render(state_));

  Transition t;
  t.state = state_;
  t.action = action;
  t.next_state = step.next_state;
  t.reward = stored_reward(state_, step, reward_image);
  t.done = step.terminated;
  t.step_index = env_steps_;
  t.reward_image = std::move(reward_image);
  validate(t);
  replay_.push(t);
  ++env_steps_;

  window_.push_back(step.next_state);
  if (window_.size() > static_cast<std::size_t>(config_.segment_length)) window_.erase(window_.begin());
  if (window_.size() == static_cast<std::size_t>(config_.segment_length)) {
    Segment seg;
    seg.states = window_;
    seg.image = std::make_shared<const PngImage>(encode_png(env_->render(step.next_state, config_.render_resolution)));
    seg.progress = step.progress;
    seg.source_episode = episode_;
    seg.source_step = env_steps_;
    images_.push(std::move(seg));
  }

  episode_return_ += step.gt_reward;
  if (step.done) {
    last_train_return_ = episode_return_;
    ++episode_;
    state_.clear();
  } else {
    state_ = step.next_state;
  }
  if (hooks_.on_step) hooks_.on_step(t, action);
  return t;
}

// ---------------------------------------------------------------- feedback

namespace {

// Runs job(i) for i in [0, n) on up to `workers` threads; the first exception
// is rethrown once all threads have joined.
void parallel_for(int n, int workers, const std::function<void(int)>& job) {
  workers = std::clamp(workers, 1, std::max(1, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

void TrainingRun::run_preference_queries(SessionReport& report, int count) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (int i = 0; i < count; ++i) pairs.push_back(sample_pair_indices(images_, feedback_rng_));

  std::vector<std::optional<LabelResult>> results(pairs.size());
  std::vector<std::string> timestamps(pairs.size());
  std::vector<std::string> errors(pairs.size());
  parallel_for(count, config_.session_workers, [&](int i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      timestamps[k] = iso8601_now();
      results[k] = source_.preference->label(images_[pairs[k].first], images_[pairs[k].second]);
    } catch (const ProviderUnavailable& e) {
      errors[k] = e.what();
    } catch (const CredentialRejected& e) {
      errors[k] = e.what();
    }
  });

  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (!results[k]) {
      ++report.failed;
      report.last_error = errors[k];
      continue;
    }
    PreferenceRecord record;
    record.first = images_[pairs[k].first];
    record.second = images_[pairs[k].second];
    record.label = results[k]->label;
    record.provider_name = source_.preference->name();
    record.raw_response = results[k]->raw_response;
    record.query_timestamp = timestamps[k];
    preference_log_->append(record);
    preferences_.append(std::move(record));
    ++report.labels[results[k]->label];
    ++report.answered;
  }
}

void TrainingRun::run_score_queries(SessionReport& report, int count) {
  std::uniform_int_distribution<std::size_t> pick(0, images_.size() - 1);
  std::vector<std::size_t> chosen;
  for (int i = 0; i < count; ++i) chosen.push_back(pick(feedback_rng_));

  std::vector<std::optional<double>> results(chosen.size());
  std::vector<bool> answered(chosen.size(), false);
  std::vector<std::string> errors(chosen.size());
  parallel_for(count, config_.session_workers, [&](int i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      results[k] = source_.score->score(images_[chosen[k]]);
      answered[k] = true;
    } catch (const ProviderUnavailable& e) {
      errors[k] = e.what();
    } catch (const CredentialRejected& e) {
      errors[k] = e.what();
    }
  });

  for (std::size_t k = 0; k < chosen.size(); ++k) {
    if (!answered[k]) {
      ++report.failed;
      report.last_error = errors[k];
      continue;
    }
    ++report.answered;
    const auto& seg = images_[chosen[k]];
    json line{{"source_episode", seg.source_episode},
              {"source_step", seg.source_step},
              {"states", seg.states},
              {"score", results[k] ? json(*results[k]) : json(nullptr)}};
    if (seg.progress) line["progress"] = *seg.progress;
    scores_out_ << line.dump() << '\n' << std::flush;
    if (!results[k]) {
      ++report.labels[-1];
      continue;
    }
    scores_.push_back({seg, *results[k]});
  }
}

SessionReport TrainingRun::feedback_session() {
  if (kind_ == FeedbackKind::Direct) throw Error("direct reward sources have no feedback sessions");
  const auto& schedule = config_.schedule;
  SessionReport report;
  report.index = session_count_;
  report.env_steps = env_steps_;
  if (queries_issued_ >= schedule.total_query_budget) return report;
  if (images_.size() < 2) {
    report.deferred = true;
    return report;
  }
  ++session_count_;
  report.requested = std::min(schedule.queries_per_session, schedule.total_query_budget - queries_issued_);

  if (kind_ == FeedbackKind::Preference)
    run_preference_queries(report, report.requested);
  else
    run_score_queries(report, report.requested);
  queries_issued_ += report.answered;
  if (report.answered == 0) {
    // Nothing new to learn from; the caller decides whether to halt.
    sessions_.push_back(report);
    write_reward_report();
    if (hooks_.on_session) hooks_.on_session(report);
    return report;
  }

  RewardTrainOptions options;
  options.max_epochs = schedule.reward_update_epochs;
  options.batch_size = config_.reward_batch_size;
  options.early_stop_accuracy = config_.early_stop_accuracy;
  options.seed = derive_seed(config_.seed, kSessionStream + static_cast<std::uint64_t>(report.index));

  if (kind_ == FeedbackKind::Preference) {
    const auto trainable = preferences_.trainable_view();
    report.trainable = trainable.size();
    options.audit = [](const PreferenceRecord& r) {
      if (!is_valid_label(r.label) || r.label == -1) throw Error("discarded record reached reward training");
    };
    if (!trainable.empty()) report.training = train_reward(*reward_, trainable, encoder_, options);
  } else {
    report.trainable = scores_.size();
    if (!scores_.empty()) report.training = train_reward_scores(*reward_, scores_, encoder_, options);
  }

  if (report.training) {
    reward_trained_ = true;
    report.relabeled = relabel_all(replay_, *reward_, encoder_);
    if (config_.audit_relabel) report.stale_rewards = count_stale_rewards(replay_, *reward_, encoder_);
  }
  sessions_.push_back(report);
  write_reward_report();
  if (hooks_.on_session) hooks_.on_session(report);
  return report;
}

// ---------------------------------------------------------------- loop

MetricsRow TrainingRun::evaluate_now() {
  MetricsRow row;
  row.step = env_steps_;
  const auto result = evaluate(*agent_, *eval_env_, config_.eval_episodes, derive_seed(config_.seed, kEvalStream));
  row.eval_return = result.mean_return;
  row.success_rate = result.success_rate;
  row.train_return = last_train_return_;
  row.losses = last_losses_;
  row.queries_issued = queries_issued_;
  row.preferences = kind_ == FeedbackKind::Score ? scores_.size() : preferences_.size();
  row.trainable = kind_ == FeedbackKind::Score ? scores_.size() : preferences_.trainable_view().size();
  return row;
}

void TrainingRun::append_metrics(const MetricsRow& row) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%d,%zu,%zu",
                static_cast<long long>(row.step), row.eval_return, row.success_rate, row.train_return,
                row.losses.critic, row.losses.actor, row.losses.alpha, row.losses.entropy, row.queries_issued,
                row.preferences, row.trainable);
  metrics_out_ << buf << '\n' << std::flush;
  metrics_.push_back(row);
}

TrainReport TrainingRun::train() {
  TrainReport report;
  const auto& schedule = config_.schedule;
  auto finish = [&] {
    report.env_steps = env_steps_;
    report.queries_issued = queries_issued_;
    report.sessions = sessions_;
    report.metrics = metrics_;
  };

  while (env_steps_ < config_.total_steps) {
    collect_step();

    if (kind_ != FeedbackKind::Direct && env_steps_ % schedule.session_interval_steps == 0 &&
        queries_issued_ < schedule.total_query_budget) {
      const auto session = feedback_session();
      if (session.requested > 0 && session.failed == session.requested) {
        checkpoint();
        write_run_state(true, session.last_error);
        finish();
        report.halted = true;
        report.halt_reason = session.last_error;
        return report;
      }
    }

    if (env_steps_ >= config_.warmup_steps &&
        replay_.size() >= static_cast<std::size_t>(agent_->config().batch_size)) {
      for (int k = 0; k < schedule.policy_update_steps; ++k) last_losses_ = agent_->update(replay_);
    }

    if (config_.eval_interval > 0 && env_steps_ % config_.eval_interval == 0) append_metrics(evaluate_now());
    if (config_.checkpoint_interval > 0 && env_steps_ % config_.checkpoint_interval == 0) checkpoint();
  }

  checkpoint();
  write_run_state(false, {});
  write_plots();
  finish();
  report.completed = true;
  return report;
}

// ---------------------------------------------------------------- persistence

void TrainingRun::checkpoint() {
  agent_->save(run_dir_ / ("sac_" + std::to_string(env_steps_) + ".ckpt"));
  if (kind_ != FeedbackKind::Direct) reward_->save(run_dir_);
  write_run_state(false, {});
}

void TrainingRun::write_reward_report() const {
  json sessions(prior_sessions_);
  for (const auto& s : sessions_) sessions.push_back(session_json(s));
  std::ofstream out(run_dir_ / "reward_report.json", std::ios::trunc);
  out << json{{"sessions", sessions}}.dump(2) << '\n';
}

void TrainingRun::write_run_state(bool halted, const std::string& reason) const {
  json state{{"env_steps", env_steps_},
             {"episode", episode_},
             {"queries_issued", queries_issued_},
             {"sessions", session_count_},
             {"reward_trained", reward_trained_},
             {"last_train_return", last_train_return_},
             {"sac_checkpoint", "sac_" + std::to_string(env_steps_) + ".ckpt"},
             {"completed", !halted && env_steps_ >= config_.total_steps},
             {"halted", halted},
             {"rng",
              {{"env", rng_state(env_rng_)},
               {"action", rng_state(action_rng_)},
               {"feedback", rng_state(feedback_rng_)},
               {"explore", rng_state(explore_rng_)}}}};
  if (halted) state["halt_reason"] = reason;
  std::ofstream out(run_dir_ / "run_state.json", std::ios::trunc);
  out << state.dump(2) << '\n';
}

void TrainingRun::write_plots() const {
  RunCurve run;
  for (const auto& m : metrics_) {
    run.steps.push_back(static_cast<double>(m.step));
    run.returns.push_back(m.eval_return);
    run.success.push_back(m.success_rate);
  }
  LearningCurve curve;
  curve.runs = 1;
  if (!run.steps.empty()) curve = learning_curve(std::span<const RunCurve>(&run, 1));
  write_learning_curve_csv(curve, run_dir_ / "plots" / "learning_curve.csv");
  plot_learning_curve(curve, run_dir_ / "plots" / "learning_curve.png");
}

std::unique_ptr<TrainingRun> TrainingRun::resume(const std::filesystem::path& run_dir, FeedbackSource source,
                                                 RunHooks hooks) {
  auto config = load_config(run_dir / "config.json");
  config.run_dir = run_dir.string();
  std::ifstream in(run_dir / "run_state.json");
  if (!in) throw Error("no resumable state in " + run_dir.string());
  const auto state = json::parse(in);

  std::unique_ptr<TrainingRun> run(new TrainingRun(ResumeTag{}, config, std::move(source), std::move(hooks)));
  run->env_steps_ = state.at("env_steps").get<std::int64_t>();
  run->replay_offset_ = run->env_steps_;
  run->episode_ = state.at("episode").get<std::int64_t>();
  run->queries_issued_ = state.at("queries_issued").get<int>();
  run->session_count_ = state.at("sessions").get<int>();
  run->reward_trained_ = state.at("reward_trained").get<bool>();
  run->last_train_return_ = state.at("last_train_return").get<double>();
  const auto& rng = state.at("rng");
  set_rng_state(run->env_rng_, rng.at("env").get<std::string>());
  set_rng_state(run->action_rng_, rng.at("action").get<std::string>());
  set_rng_state(run->feedback_rng_, rng.at("feedback").get<std::string>());
  set_rng_state(run->explore_rng_, rng.at("explore").get<std::string>());

  run->agent_->load(run_dir / state.at("sac_checkpoint").get<std::string>());
  if (run->kind_ != FeedbackKind::Direct)
    run->reward_ = std::make_unique<RewardModelEnsemble>(
        RewardModelEnsemble::load(run_dir, config.reward_learning_rate));

  if (run->kind_ == FeedbackKind::Preference) {
    for (auto& r : PreferenceLog::load(run_dir)) run->preferences_.append(std::move(r));
  } else if (run->kind_ == FeedbackKind::Score && std::filesystem::exists(run_dir / "scores.jsonl")) {
    for (const auto& j : read_jsonl(run_dir / "scores.jsonl")) {
      if (j.at("score").is_null()) continue;
      ScoredSegment s;
      s.segment.states = j.at("states").get<std::vector<Vector>>();
      s.segment.source_episode = j.at("source_episode").get<std::int64_t>();
      s.segment.source_step = j.at("source_step").get<std::int64_t>();
      if (j.contains("progress")) s.segment.progress = j.at("progress").get<double>();
      s.score = j.at("score").get<double>();
      run->scores_.push_back(std::move(s));
    }
  }
  if (std::ifstream report(run_dir / "reward_report.json"); report) {
    const auto previous = json::parse(report);
    for (const auto& s : previous.at("sessions")) run->prior_sessions_.push_back(s);
  }

  run->metrics_out_.open(run_dir / "metrics.csv", std::ios::app);
  if (!run->metrics_out_) throw Error("cannot append to metrics.csv");
  run->preference_log_ = std::make_unique<PreferenceLog>(run_dir);
  if (run->kind_ == FeedbackKind::Score) run->scores_out_.open(run_dir / "scores.jsonl", std::ios::app);
  return run;
}

// ---------------------------------------------------------------- factories

FeedbackSource make_feedback_for(const RunConfig& config, std::istream* input, std::ostream* output) {
  ProviderContext ctx;
  ctx.config = config;
  ctx.input = input;
  ctx.output = output;
  const std::filesystem::path run_dir = config.run_dir;
  const std::string backend_file = config.backend_config;
  ctx.client = [backend_file, run_dir]() -> std::shared_ptr<VlmClient> {
    if (backend_file.empty()) throw Error("backend config required");
    return make_client(load_backend_config(backend_file), run_dir);
  };
  if (!backend_file.empty()) {
    std::ifstream in(backend_file);
    if (!in) throw Error("cannot read backend config: " + backend_file);
    const auto j = json::parse(in);
    if (j.contains("embedding_endpoint")) {
      ctx.embedder = std::make_shared<HttpEmbedder>(j.at("embedding_endpoint").get<std::string>(),
                                                    j.value("credential_env", std::string("VLM_API_KEY")));
    }
  }
  return make_feedback(config.provider_name, ctx);
}

TrainReport train(const RunConfig& config) {
  TrainingRun run(config, make_feedback_for(config));
  return run.train();
}

}  // namespace vlmpref
