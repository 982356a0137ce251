#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vlmpref/core.hpp"
#include "vlmpref/envsim.hpp"
#include "vlmpref/feedback.hpp"
#include "vlmpref/rewardmodel.hpp"
#include "vlmpref/sac.hpp"
#include "vlmpref/serialization.hpp"

namespace vlmpref {

struct SessionReport {
  int index = 0;
  std::int64_t env_steps = 0;
  bool deferred = false;       // fewer than two observations
  int requested = 0;           // min(M, N - issued)
  int answered = 0;            // queries that produced a record or score
  int failed = 0;              // provider unavailable for that pair
  std::map<int, std::size_t> labels{{-1, 0}, {0, 0}, {1, 0}};
  std::size_t trainable = 0;   // trainable records after the session
  std::optional<RewardTrainReport> training;
  std::size_t relabeled = 0;
  std::optional<std::size_t> stale_rewards;  // set when relabel auditing is on
  std::string last_error;
};

struct MetricsRow {
  std::int64_t step = 0;
  double eval_return = 0.0;
  double success_rate = 0.0;
  double train_return = 0.0;  // last finished training episode, ground truth
  SacLosses losses;
  int queries_issued = 0;
  std::size_t preferences = 0;
  std::size_t trainable = 0;
};

struct TrainReport {
  bool completed = false;
  bool halted = false;
  std::string halt_reason;
  std::int64_t env_steps = 0;
  int queries_issued = 0;
  std::vector<SessionReport> sessions;
  std::vector<MetricsRow> metrics;
};

struct RunHooks {
  // After every collected step: the stored transition and the emitted action.
  std::function<void(const Transition&, const Vector&)> on_step;
  std::function<void(const SessionReport&)> on_session;
};

enum class FeedbackKind { Preference, Score, Direct };

// Independent generator for one role (environment, actions, feedback, ...).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// One training run: environment, agent, reward ensemble and buffers, driven
// step by step. Everything but wall-clock timestamps is a function of the
// seed when the feedback source is deterministic.
class TrainingRun {
 public:
  // Creates the run directory skeleton and writes config.json.
  TrainingRun(RunConfig config, FeedbackSource source, RunHooks hooks = {});
  // Continues a halted or checkpointed run. Replay and observation buffers
  // restart empty; networks, optimizer state, preferences and counters are
  // restored.
  static std::unique_ptr<TrainingRun> resume(const std::filesystem::path& run_dir, FeedbackSource source,
                                             RunHooks hooks = {});

  ~TrainingRun();
  TrainingRun(const TrainingRun&) = delete;
  TrainingRun& operator=(const TrainingRun&) = delete;

  // One environment step: act, store the transition and the observation.
  Transition collect_step();
  // Queries min(M, N - issued) pairs, trains the reward and relabels.
  SessionReport feedback_session();
  // Runs until config.total_steps. Provider failure halts the run with a
  // checkpoint on disk (report.halted).
  TrainReport train();

  // Writes sac_{step}.ckpt, reward members and run_state.json.
  void checkpoint();

  [[nodiscard]] const RunConfig& config() const { return config_; }
  [[nodiscard]] FeedbackKind feedback_kind() const { return kind_; }
  [[nodiscard]] std::int64_t env_steps() const { return env_steps_; }
  [[nodiscard]] int queries_issued() const { return queries_issued_; }
  [[nodiscard]] const ReplayBuffer& replay() const { return replay_; }
  [[nodiscard]] const ImageBuffer& images() const { return images_; }
  [[nodiscard]] const PreferenceBuffer& preferences() const { return preferences_; }
  [[nodiscard]] const std::vector<ScoredSegment>& scores() const { return scores_; }
  [[nodiscard]] RewardModelEnsemble& reward() { return *reward_; }
  [[nodiscard]] const RewardInputEncoder& encoder() const { return encoder_; }
  [[nodiscard]] SacAgentF& agent() { return *agent_; }
  [[nodiscard]] Environment& env() { return *env_; }
  [[nodiscard]] const std::vector<SessionReport>& sessions() const { return sessions_; }
  // Transitions pushed before a resume, so that env_steps = offset + pushed.
  [[nodiscard]] std::int64_t replay_offset() const { return replay_offset_; }

 private:
  struct ResumeTag {};
  TrainingRun(ResumeTag, RunConfig config, FeedbackSource source, RunHooks hooks);

  void build();
  void begin_episode();
  [[nodiscard]] double stored_reward(const Vector& state, const StepResult& step,
                                     const std::shared_ptr<const RgbImage>& image);
  [[nodiscard]] double exploration_reward(const Vector& next_state);
  void run_preference_queries(SessionReport& report, int count);
  void run_score_queries(SessionReport& report, int count);
  MetricsRow evaluate_now();
  void append_metrics(const MetricsRow& row);
  void write_reward_report() const;
  void write_run_state(bool halted, const std::string& reason) const;
  void write_plots() const;

  RunConfig config_;
  FeedbackSource source_;
  FeedbackKind kind_;
  RunHooks hooks_;
  std::filesystem::path run_dir_;

  std::unique_ptr<Environment> env_;
  std::unique_ptr<Environment> eval_env_;
  std::unique_ptr<SacAgentF> agent_;
  std::unique_ptr<RewardModelEnsemble> reward_;
  RewardInputEncoder encoder_;
  ReplayBuffer replay_;
  ImageBuffer images_;
  PreferenceBuffer preferences_;
  std::vector<ScoredSegment> scores_;
  std::unique_ptr<PreferenceLog> preference_log_;
  std::ofstream metrics_out_;
  std::ofstream scores_out_;

  Rng env_rng_, action_rng_, feedback_rng_, explore_rng_;
  std::int64_t env_steps_ = 0;
  std::int64_t replay_offset_ = 0;
  std::int64_t episode_ = 0;
  int queries_issued_ = 0;
  int session_count_ = 0;
  bool reward_trained_ = false;
  Vector state_;
  std::vector<Vector> window_;  // last segment_length states of this episode
  double episode_return_ = 0.0;
  double last_train_return_ = 0.0;
  SacLosses last_losses_;
  std::vector<SessionReport> sessions_;
  std::vector<json> prior_sessions_;  // reported before a resume
  std::vector<MetricsRow> metrics_;
};

// Refuses a directory holding a previous run unless `force`; with `force`
// the previous artifacts are removed except the VLM response cache.
void prepare_run_dir(const std::filesystem::path& run_dir, bool force);

// Builds the feedback source from config.provider_name; VLM providers get a
// client from config.backend_config logging into the run directory.
FeedbackSource make_feedback_for(const RunConfig& config, std::istream* input = nullptr,
                                 std::ostream* output = nullptr);

TrainReport train(const RunConfig& config);

}  // namespace vlmpref
