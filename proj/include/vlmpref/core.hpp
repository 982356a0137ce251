#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vlmpref/image.hpp"

namespace vlmpref {

using Vector = std::vector<double>;
using Rng = std::mt19937_64;

enum class RewardInputMode { State, Image };

std::string to_string(RewardInputMode mode);
RewardInputMode parse_reward_input_mode(std::string_view text);

// One environment step as stored in the replay buffer. `reward` is the
// learned reward of `state`; it is rewritten on every relabel.
struct Transition {
  Vector state;
  Vector action;
  Vector next_state;
  double reward = 0.0;
  bool done = false;  // true terminal; time-limit truncation is not stored as done
  std::int64_t step_index = 0;
  // Reward-model input image of `state`, only kept in image mode.
  std::shared_ptr<const RgbImage> reward_image;
};

// Throws if an action component leaves [-1, 1] or the reward is not finite.
void validate(const Transition& t);

struct Segment {
  std::vector<Vector> states;
  std::shared_ptr<const PngImage> image;
  std::optional<double> progress;
  std::int64_t source_episode = 0;
  std::int64_t source_step = 0;
};

bool operator==(const Segment& a, const Segment& b);

inline constexpr bool is_valid_label(int label) { return label == -1 || label == 0 || label == 1; }

struct PreferenceRecord {
  Segment first;
  Segment second;
  int label = -1;
  std::string provider_name;
  std::optional<std::string> raw_response;
  std::string query_timestamp;

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

// Fixed-capacity ring of transitions. Index 0 is the oldest live entry.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(Transition t);

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t capacity() const { return capacity_; }
  [[nodiscard]] bool empty() const { return entries_.empty(); }
  [[nodiscard]] std::size_t total_pushed() const { return pushed_; }
  [[nodiscard]] std::size_t cursor() const { return cursor_; }

  Transition& operator[](std::size_t i) { return entries_[physical(i)]; }
  const Transition& operator[](std::size_t i) const { return entries_[physical(i)]; }

 private:
  [[nodiscard]] std::size_t physical(std::size_t i) const {
    return entries_.size() < capacity_ ? i : (cursor_ + i) % capacity_;
  }

  std::size_t capacity_;
  std::vector<Transition> entries_;
  std::size_t cursor_ = 0;
  std::size_t pushed_ = 0;
};

class ImageBuffer {
 public:
  explicit ImageBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  void push(Segment segment);

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t capacity() const { return capacity_; }
  const Segment& operator[](std::size_t i) const { return entries_[i]; }

 private:
  std::size_t capacity_;
  std::deque<Segment> entries_;
};

// Append-only store of labeled pairs. append() is safe to call from several
// threads; reads must not race with appends.
class PreferenceBuffer {
 public:
  PreferenceBuffer() = default;
  PreferenceBuffer(const PreferenceBuffer&) = delete;
  PreferenceBuffer& operator=(const PreferenceBuffer&) = delete;

  void append(PreferenceRecord record);

  [[nodiscard]] std::size_t size() const;
  [[nodiscard]] std::size_t count(int label) const;
  [[nodiscard]] std::map<int, std::size_t> counts() const;
  [[nodiscard]] const std::deque<PreferenceRecord>& records() const { return entries_; }
  // Records with label != -1, in append order.
  [[nodiscard]] std::vector<const PreferenceRecord*> trainable_view() const;

 private:
  mutable std::mutex mutex_;
  std::deque<PreferenceRecord> entries_;
  std::map<int, std::size_t> counts_{{-1, 0}, {0, 0}, {1, 0}};
};

struct FeedbackSchedule {
  int queries_per_session = 50;       // M
  int session_interval_steps = 5000;  // K
  int total_query_budget = 10000;     // N
  int reward_update_epochs = 200;     // N_r
  int policy_update_steps = 1;        // N_pi

  void validate() const;
  friend bool operator==(const FeedbackSchedule&, const FeedbackSchedule&) = default;
};

// Parses "M,K,N".
FeedbackSchedule parse_schedule(std::string_view text);

struct RunConfig {
  std::string env_name = "cartpole";
  std::string goal_description;
  std::string provider_name = "oracle";
  FeedbackSchedule schedule;
  std::uint64_t seed = 0;
  double discount = 0.99;
  int segment_length = 1;
  RewardInputMode reward_input_mode = RewardInputMode::State;
  Resolution render_resolution{128, 128};
  Resolution reward_resolution{84, 84};
  std::string run_dir = "runs/default";

  std::int64_t total_steps = 150000;
  std::int64_t eval_interval = 10000;
  int eval_episodes = 10;
  std::int64_t warmup_steps = 1000;
  std::size_t replay_capacity = 1000000;
  std::size_t image_buffer_capacity = 0;
  std::int64_t checkpoint_interval = 0;  // 0: final checkpoint only
  int ensemble_size = 3;
  double reward_learning_rate = 3e-4;
  int reward_batch_size = 128;
  double early_stop_accuracy = 0.97;
  double tie_epsilon = 1e-6;
  int session_workers = 1;
  std::string backend_config;
  bool unsupervised_pretraining = false;
  bool audit_relabel = false;

  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Anything that maps reward inputs (one column per sample) to scalar rewards.
class RewardModel {
 public:
  virtual ~RewardModel() = default;
  [[nodiscard]] virtual RewardInputMode input_mode() const = 0;
  [[nodiscard]] virtual Eigen::VectorXd predict_batch(const Eigen::MatrixXd& inputs) const = 0;
};

using StateRenderer = std::function<RgbImage(std::span<const double> state, Resolution res)>;

// Turns states, transitions and segments into reward-model input columns.
// Image inputs are channel-major (C x H x W) and scaled to [0, 1].
class RewardInputEncoder {
 public:
  static RewardInputEncoder for_states(std::size_t state_dim);
  static RewardInputEncoder for_images(Resolution res, StateRenderer renderer);

  [[nodiscard]] RewardInputMode mode() const { return mode_; }
  [[nodiscard]] std::size_t dim() const { return dim_; }
  [[nodiscard]] Resolution resolution() const { return res_; }

  [[nodiscard]] RgbImage render(std::span<const double> state) const;
  [[nodiscard]] Eigen::VectorXd encode_state(std::span<const double> state) const;
  [[nodiscard]] Eigen::VectorXd encode_image(const RgbImage& image) const;
  [[nodiscard]] Eigen::VectorXd encode(const Transition& t) const;
  // One column per state of the segment.
  [[nodiscard]] Eigen::MatrixXd encode_segment(const Segment& s) const;

 private:
  RewardInputMode mode_ = RewardInputMode::State;
  std::size_t dim_ = 0;
  Resolution res_{};
  StateRenderer renderer_;
};

// Rewrites every replay reward with the model's prediction; returns the count.
std::size_t relabel_all(ReplayBuffer& buffer, const RewardModel& reward, const RewardInputEncoder& encoder);

// Number of transitions evaluated per forward pass during relabeling.
inline constexpr std::size_t kRelabelChunk = 256;

// Recomputes predictions with the relabel chunking and counts entries whose
// stored reward differs bitwise.
std::size_t count_stale_rewards(const ReplayBuffer& buffer, const RewardModel& reward,
                                const RewardInputEncoder& encoder);

std::pair<std::size_t, std::size_t> sample_pair_indices(const ImageBuffer& buffer, Rng& rng);
std::pair<Segment, Segment> sample_pair(const ImageBuffer& buffer, Rng& rng);

// Current UTC time, e.g. 2024-05-01T12:00:00.123Z.
std::string iso8601_now();

}  // namespace vlmpref
