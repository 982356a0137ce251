#include "vlmpref/core.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <cstdio>

#include "vlmpref/error.hpp"

namespace vlmpref {

std::string to_string(RewardInputMode mode) {
  return mode == RewardInputMode::State ? "state" : "image";
}

RewardInputMode parse_reward_input_mode(std::string_view text) {
  if (text == "state") return RewardInputMode::State;
  if (text == "image") return RewardInputMode::Image;
  throw Error("unknown reward input mode: " + std::string(text));
}

void validate(const Transition& t) {
  for (double a : t.action) {
    if (!(a >= -1.0 && a <= 1.0)) throw Error("action out of range");
  }
  if (!std::isfinite(t.reward)) throw Error("reward not finite");
}

bool operator==(const Segment& a, const Segment& b) {
  const bool images_equal = (!a.image && !b.image) || (a.image && b.image && *a.image == *b.image);
  return images_equal && a.states == b.states && a.progress == b.progress &&
         a.source_episode == b.source_episode && a.source_step == b.source_step;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw Error("replay capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  if (entries_.size() < capacity_) {
    entries_.push_back(std::move(t));
  } else {
    entries_[cursor_] = std::move(t);
  }
  cursor_ = (cursor_ + 1) % capacity_;
  ++pushed_;
}

void ImageBuffer::push(Segment segment) {
  if (!segment.image) throw Error("segment has no image");
  entries_.push_back(std::move(segment));
  if (capacity_ > 0 && entries_.size() > capacity_) entries_.pop_front();
}

void PreferenceBuffer::append(PreferenceRecord record) {
  if (!is_valid_label(record.label)) throw Error("invalid label");
  std::lock_guard lock(mutex_);
  ++counts_[record.label];
  entries_.push_back(std::move(record));
}

std::size_t PreferenceBuffer::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

std::size_t PreferenceBuffer::count(int label) const {
  std::lock_guard lock(mutex_);
  auto it = counts_.find(label);
  return it == counts_.end() ? 0 : it->second;
}

std::map<int, std::size_t> PreferenceBuffer::counts() const {
  std::lock_guard lock(mutex_);
  return counts_;
}

std::vector<const PreferenceRecord*> PreferenceBuffer::trainable_view() const {
  std::lock_guard lock(mutex_);
  std::vector<const PreferenceRecord*> out;
  out.reserve(entries_.size());
  for (const auto& r : entries_) {
    if (r.label != -1) out.push_back(&r);
  }
  return out;
}

void FeedbackSchedule::validate() const {
  if (queries_per_session <= 0) throw Error("schedule: M must be positive");
  if (session_interval_steps <= 0) throw Error("schedule: K must be positive");
  if (total_query_budget < queries_per_session) throw Error("schedule: N must be at least M");
  if (reward_update_epochs <= 0) throw Error("schedule: reward update epochs must be positive");
  if (policy_update_steps <= 0) throw Error("schedule: policy update steps must be positive");
}

FeedbackSchedule parse_schedule(std::string_view text) {
  FeedbackSchedule s;
  int* fields[] = {&s.queries_per_session, &s.session_interval_steps, &s.total_query_budget};
  std::size_t start = 0;
  for (int i = 0; i < 3; ++i) {
    const auto comma = text.find(',', start);
    if ((i < 2) == (comma == std::string_view::npos)) throw Error("schedule must be M,K,N");
    const auto token = text.substr(start, comma == std::string_view::npos ? text.size() - start : comma - start);
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), *fields[i]);
    if (ec != std::errc{} || ptr != token.data() + token.size()) throw Error("schedule must be M,K,N");
    start = comma + 1;
  }
  s.validate();
  return s;
}

void RunConfig::validate() const {
  schedule.validate();
  if (!(discount > 0.0 && discount < 1.0)) throw Error("discount must lie in (0, 1)");
  if (segment_length < 1) throw Error("segment length must be at least 1");
  if (render_resolution.width <= 0 || render_resolution.height <= 0) throw Error("invalid render resolution");
  if (reward_resolution.width <= 0 || reward_resolution.height <= 0) throw Error("invalid reward resolution");
  if (total_steps < 0) throw Error("total steps must be non-negative");
  if (eval_interval <= 0) throw Error("eval interval must be positive");
  if (eval_episodes < 1) throw Error("eval episodes must be at least 1");
  if (ensemble_size < 1) throw Error("ensemble size must be at least 1");
  if (replay_capacity == 0) throw Error("replay capacity must be positive");
  if (session_workers < 1) throw Error("session workers must be at least 1");
}

RewardInputEncoder RewardInputEncoder::for_states(std::size_t state_dim) {
  RewardInputEncoder e;
  e.mode_ = RewardInputMode::State;
  e.dim_ = state_dim;
  return e;
}

RewardInputEncoder RewardInputEncoder::for_images(Resolution res, StateRenderer renderer) {
  RewardInputEncoder e;
  e.mode_ = RewardInputMode::Image;
  e.res_ = res;
  e.dim_ = static_cast<std::size_t>(res.width) * res.height * 3;
  e.renderer_ = std::move(renderer);
  return e;
}

RgbImage RewardInputEncoder::render(std::span<const double> state) const {
  if (!renderer_) throw Error("input mode mismatch");
  return renderer_(state, res_);
}

Eigen::VectorXd RewardInputEncoder::encode_state(std::span<const double> state) const {
  if (mode_ == RewardInputMode::Image) return encode_image(render(state));
  if (state.size() != dim_) throw Error("state dimension mismatch");
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim_));
  for (std::size_t i = 0; i < dim_; ++i) v[static_cast<Eigen::Index>(i)] = state[i];
  return v;
}

Eigen::VectorXd RewardInputEncoder::encode_image(const RgbImage& image) const {
  if (mode_ != RewardInputMode::Image) throw Error("input mode mismatch");
  if (image.resolution() != res_) throw Error("image resolution mismatch");
  const std::size_t plane = static_cast<std::size_t>(res_.width) * res_.height;
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim_));
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      v[static_cast<Eigen::Index>(c * plane + p)] = image.pixels[p * 3 + c] / 255.0;
    }
  }
  return v;
}

Eigen::VectorXd RewardInputEncoder::encode(const Transition& t) const {
  if (mode_ == RewardInputMode::Image && t.reward_image) return encode_image(*t.reward_image);
  return encode_state(t.state);
}

Eigen::MatrixXd RewardInputEncoder::encode_segment(const Segment& s) const {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(dim_), static_cast<Eigen::Index>(s.states.size()));
  for (std::size_t t = 0; t < s.states.size(); ++t) m.col(static_cast<Eigen::Index>(t)) = encode_state(s.states[t]);
  return m;
}

namespace {

Eigen::VectorXd predict_chunk(const ReplayBuffer& buffer, std::size_t begin, std::size_t end,
                              const RewardModel& reward, const RewardInputEncoder& encoder) {
  Eigen::MatrixXd inputs(static_cast<Eigen::Index>(encoder.dim()), static_cast<Eigen::Index>(end - begin));
  for (std::size_t i = begin; i < end; ++i) inputs.col(static_cast<Eigen::Index>(i - begin)) = encoder.encode(buffer[i]);
  return reward.predict_batch(inputs);
}

}  // namespace

std::size_t relabel_all(ReplayBuffer& buffer, const RewardModel& reward, const RewardInputEncoder& encoder) {
  if (reward.input_mode() != encoder.mode()) throw Error("input mode mismatch");
  for (std::size_t begin = 0; begin < buffer.size(); begin += kRelabelChunk) {
    const std::size_t end = std::min(buffer.size(), begin + kRelabelChunk);
    const Eigen::VectorXd r = predict_chunk(buffer, begin, end, reward, encoder);
    for (std::size_t i = begin; i < end; ++i) buffer[i].reward = r[static_cast<Eigen::Index>(i - begin)];
  }
  return buffer.size();
}

std::size_t count_stale_rewards(const ReplayBuffer& buffer, const RewardModel& reward,
                                const RewardInputEncoder& encoder) {
  std::size_t stale = 0;
  for (std::size_t begin = 0; begin < buffer.size(); begin += kRelabelChunk) {
    const std::size_t end = std::min(buffer.size(), begin + kRelabelChunk);
    const Eigen::VectorXd r = predict_chunk(buffer, begin, end, reward, encoder);
    for (std::size_t i = begin; i < end; ++i) {
      if (buffer[i].reward != r[static_cast<Eigen::Index>(i - begin)]) ++stale;
    }
  }
  return stale;
}

std::pair<std::size_t, std::size_t> sample_pair_indices(const ImageBuffer& buffer, Rng& rng) {
  if (buffer.size() < 2) throw Error("insufficient observations");
  std::uniform_int_distribution<std::size_t> first(0, buffer.size() - 1);
  std::uniform_int_distribution<std::size_t> other(0, buffer.size() - 2);
  const std::size_t i = first(rng);
  std::size_t j = other(rng);
  if (j >= i) ++j;
  return {i, j};
}

std::pair<Segment, Segment> sample_pair(const ImageBuffer& buffer, Rng& rng) {
  const auto [i, j] = sample_pair_indices(buffer, rng);
  return {buffer[i], buffer[j]};
}

std::string iso8601_now() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto millis =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(millis));
  return buf;
}

}  // namespace vlmpref
