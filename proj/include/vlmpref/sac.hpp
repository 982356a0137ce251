#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "vlmpref/core.hpp"
#include "vlmpref/envsim.hpp"
#include "vlmpref/nn.hpp"

namespace vlmpref {

struct SacConfig {
  int state_dim = 0;
  int action_dim = 0;
  std::vector<int> hidden{256, 256};
  double discount = 0.99;
  double tau = 0.005;
  int batch_size = 256;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double init_alpha = 0.1;
  bool learn_alpha = true;
  std::optional<double> target_entropy;  // default: -action_dim
  double log_std_min = -5.0;
  double log_std_max = 2.0;

  [[nodiscard]] double entropy_target() const { return target_entropy.value_or(-static_cast<double>(action_dim)); }
};

// Columns are samples.
template <class S>
struct SacBatch {
  nn::Mat<S> states;
  nn::Mat<S> actions;
  nn::Mat<S> rewards;   // 1 x B
  nn::Mat<S> next_states;
  nn::Mat<S> not_done;  // 1 x B, 0 where the transition ended in a true terminal
};

template <class S>
SacBatch<S> make_batch(const ReplayBuffer& replay, std::span<const std::size_t> indices);

struct SacLosses {
  double critic = 0.0;
  double actor = 0.0;
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double entropy = 0.0;  // batch estimate of -log pi
};

// Soft actor-critic with twin critics, target critics and a learned entropy
// temperature. The actor is a tanh-squashed Gaussian.
template <class S>
class SacAgent {
 public:
  SacAgent(SacConfig config, std::uint64_t seed);

  [[nodiscard]] const SacConfig& config() const { return config_; }

  // Action in [-1, 1]^action_dim; the tanh of the mean when deterministic.
  Vector select_action(std::span<const double> state, bool deterministic);

  // One critic step, one actor step, one temperature step, then a soft
  // target update. Throws "warmup incomplete" while replay < batch size.
  SacLosses update(const ReplayBuffer& replay);
  SacLosses update_on(const SacBatch<S>& batch);

  // r + gamma * not_done * (min target Q(s', a') - alpha * log pi(a'|s')).
  nn::Mat<S> critic_target(const SacBatch<S>& batch);
  // Same with the next-action noise supplied (one column per sample).
  nn::Mat<S> critic_target(const SacBatch<S>& batch, const nn::Mat<S>& noise);

  // Loss pieces with explicit targets / noise. With `backprop`, gradients
  // are accumulated into the networks (callers zero them first).
  S critic_loss(const SacBatch<S>& batch, const nn::Mat<S>& targets, bool backprop);
  S actor_loss(const nn::Mat<S>& states, const nn::Mat<S>& noise, bool backprop, S* entropy = nullptr);
  // d alpha_loss / d log_alpha for a given batch entropy estimate.
  [[nodiscard]] double alpha_gradient(double entropy) const;

  void soft_update_targets();

  [[nodiscard]] double alpha() const { return std::exp(log_alpha_); }
  void set_log_alpha(double v) { log_alpha_ = v; }
  [[nodiscard]] double log_alpha() const { return log_alpha_; }

  nn::Sequential<S>& actor() { return actor_; }
  nn::Sequential<S>& critic(int i) { return i == 0 ? q1_ : q2_; }
  nn::Sequential<S>& target_critic(int i) { return i == 0 ? q1_target_ : q2_target_; }
  Rng& rng() { return rng_; }
  [[nodiscard]] std::int64_t updates() const { return updates_; }

  void save(const std::filesystem::path& file) const;
  void load(const std::filesystem::path& file);

 private:
  struct Policy {
    nn::Mat<S> mean, log_std, raw_log_std, std, pre_tanh, action, log_prob;  // log_prob: 1 x B
  };
  Policy policy(const nn::Mat<S>& states, const nn::Mat<S>& noise, bool keep);
  nn::Mat<S> min_target_q(const nn::Mat<S>& states, const nn::Mat<S>& actions);
  nn::Mat<S> gaussian_noise(Eigen::Index cols);

  SacConfig config_;
  nn::Sequential<S> actor_;
  nn::Sequential<S> q1_, q2_, q1_target_, q2_target_;
  nn::Adam<S> actor_opt_, q1_opt_, q2_opt_;
  double log_alpha_;
  nn::Adam<double> alpha_opt_;
  Rng rng_;
  std::int64_t updates_ = 0;
};

using SacAgentF = SacAgent<float>;

struct EvalResult {
  double mean_return = 0.0;
  double success_rate = 0.0;
  std::vector<double> returns;
};

// Rolls out `policy` for `episodes` episodes from resets drawn with `seed`;
// returns are ground-truth benchmark returns.
EvalResult evaluate_policy(const Policy& policy, Environment& env, int episodes, std::uint64_t seed);

template <class S>
EvalResult evaluate(SacAgent<S>& agent, Environment& env, int episodes, std::uint64_t seed) {
  return evaluate_policy([&](std::span<const double> s) { return agent.select_action(s, true); }, env, episodes,
                         seed);
}

}  // namespace vlmpref
