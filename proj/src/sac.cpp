#include "vlmpref/sac.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "vlmpref/error.hpp"

namespace vlmpref {

using nn::Mat;

template <class S>
SacBatch<S> make_batch(const ReplayBuffer& replay, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("empty batch");
  const auto b = static_cast<Eigen::Index>(indices.size());
  const auto& first = replay[indices[0]];
  const auto sd = static_cast<Eigen::Index>(first.state.size());
  const auto ad = static_cast<Eigen::Index>(first.action.size());
  SacBatch<S> out;
  out.states.resize(sd, b);
  out.actions.resize(ad, b);
  out.rewards.resize(1, b);
  out.next_states.resize(sd, b);
  out.not_done.resize(1, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto& t = replay[indices[static_cast<std::size_t>(j)]];
    for (Eigen::Index i = 0; i < sd; ++i) {
      out.states(i, j) = static_cast<S>(t.state[static_cast<std::size_t>(i)]);
      out.next_states(i, j) = static_cast<S>(t.next_state[static_cast<std::size_t>(i)]);
    }
    for (Eigen::Index i = 0; i < ad; ++i) out.actions(i, j) = static_cast<S>(t.action[static_cast<std::size_t>(i)]);
    out.rewards(0, j) = static_cast<S>(t.reward);
    out.not_done(0, j) = t.done ? S(0) : S(1);
  }
  return out;
}

namespace {

template <class S>
Mat<S> softplus(const Mat<S>& x) {
  return x.unaryExpr([](S v) { return v > S(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); });
}

template <class S>
Mat<S> stack(const Mat<S>& top, const Mat<S>& bottom) {
  Mat<S> out(top.rows() + bottom.rows(), top.cols());
  out << top, bottom;
  return out;
}

}  // namespace

template <class S>
SacAgent<S>::SacAgent(SacConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      actor_opt_(config_.actor_lr),
      q1_opt_(config_.critic_lr),
      q2_opt_(config_.critic_lr),
      log_alpha_(std::log(config_.init_alpha)),
      alpha_opt_(config_.alpha_lr),
      rng_(seed) {
  if (config_.state_dim <= 0 || config_.action_dim <= 0) throw Error("invalid agent dimensions");
  if (!(config_.init_alpha > 0.0)) throw Error("initial temperature must be positive");
  actor_ = nn::make_mlp<S>(config_.state_dim, config_.hidden, 2 * config_.action_dim, false, rng_);
  q1_ = nn::make_mlp<S>(config_.state_dim + config_.action_dim, config_.hidden, 1, false, rng_);
  q2_ = nn::make_mlp<S>(config_.state_dim + config_.action_dim, config_.hidden, 1, false, rng_);
  q1_target_ = q1_;
  q2_target_ = q2_;
}

template <class S>
Mat<S> SacAgent<S>::gaussian_noise(Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat<S> eps(config_.action_dim, cols);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<S>(n(rng_));
  return eps;
}

template <class S>
typename SacAgent<S>::Policy SacAgent<S>::policy(const Mat<S>& states, const Mat<S>& noise, bool keep) {
  const Eigen::Index d = config_.action_dim;
  const Mat<S> out = keep ? actor_.forward(states, true) : actor_.predict(states);
  Policy p;
  p.mean = out.topRows(d);
  p.raw_log_std = out.bottomRows(d);
  const S lo = static_cast<S>(config_.log_std_min), hi = static_cast<S>(config_.log_std_max);
  p.log_std = (lo + S(0.5) * (hi - lo) * (p.raw_log_std.array().tanh() + S(1))).matrix();
  p.std = p.log_std.array().exp().matrix();
  p.pre_tanh = p.mean + p.std.cwiseProduct(noise);
  p.action = p.pre_tanh.array().tanh().matrix();
  // log N(u; mean, std) - log|d tanh(u)/du|, with the Jacobian term
  // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)).
  const S half_log_2pi = static_cast<S>(0.5 * std::log(2.0 * std::numbers::pi));
  const Mat<S> squash = (S(2) * (static_cast<S>(std::numbers::ln2) - p.pre_tanh.array() -
                                 softplus<S>((S(-2) * p.pre_tanh).eval()).array()))
                            .matrix();
  p.log_prob = (S(-0.5) * noise.array().square() - p.log_std.array() - half_log_2pi - squash.array())
                   .matrix()
                   .colwise()
                   .sum();
  return p;
}

template <class S>
Vector SacAgent<S>::select_action(std::span<const double> state, bool deterministic) {
  if (static_cast<int>(state.size()) != config_.state_dim) throw Error("state dimension mismatch");
  Mat<S> x(config_.state_dim, 1);
  for (int i = 0; i < config_.state_dim; ++i) x(i, 0) = static_cast<S>(state[static_cast<std::size_t>(i)]);
  Mat<S> a;
  if (deterministic) {
    a = actor_.predict(x).topRows(config_.action_dim).array().tanh().matrix();
  } else {
    a = policy(x, gaussian_noise(1), false).action;
  }
  Vector out(static_cast<std::size_t>(config_.action_dim));
  for (int i = 0; i < config_.action_dim; ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(a(i, 0));
  return out;
}

template <class S>
Mat<S> SacAgent<S>::min_target_q(const Mat<S>& states, const Mat<S>& actions) {
  const Mat<S> x = stack(states, actions);
  return q1_target_.predict(x).cwiseMin(q2_target_.predict(x));
}

template <class S>
Mat<S> SacAgent<S>::critic_target(const SacBatch<S>& batch, const Mat<S>& noise) {
  const auto next = policy(batch.next_states, noise, false);
  const S alpha = static_cast<S>(this->alpha());
  const Mat<S> soft_value = min_target_q(batch.next_states, next.action) - alpha * next.log_prob;
  return batch.rewards + static_cast<S>(config_.discount) * batch.not_done.cwiseProduct(soft_value);
}

template <class S>
Mat<S> SacAgent<S>::critic_target(const SacBatch<S>& batch) {
  return critic_target(batch, gaussian_noise(batch.states.cols()));
}

template <class S>
S SacAgent<S>::critic_loss(const SacBatch<S>& batch, const Mat<S>& targets, bool backprop) {
  const Mat<S> x = stack(batch.states, batch.actions);
  const S n = static_cast<S>(x.cols());
  const Mat<S> e1 = q1_.forward(x, backprop) - targets;
  const Mat<S> e2 = q2_.forward(x, backprop) - targets;
  if (backprop) {
    q1_.backward((S(2) / n) * e1);
    q2_.backward((S(2) / n) * e2);
  }
  return e1.squaredNorm() / n + e2.squaredNorm() / n;
}

template <class S>
S SacAgent<S>::actor_loss(const Mat<S>& states, const Mat<S>& noise, bool backprop, S* entropy) {
  const Eigen::Index d = config_.action_dim;
  const S n = static_cast<S>(states.cols());
  const S alpha = static_cast<S>(this->alpha());
  const auto p = policy(states, noise, backprop);
  const Mat<S> x = stack(states, p.action);
  const Mat<S> q1 = q1_.forward(x, backprop);
  const Mat<S> q2 = q2_.forward(x, backprop);
  const Mat<S> qmin = q1.cwiseMin(q2);
  if (entropy) *entropy = -p.log_prob.mean();
  const S loss = (alpha * p.log_prob - qmin).sum() / n;
  if (!backprop) return loss;

  // d loss / d action through whichever critic is the minimum
  const Mat<S> pick1 = (q1.array() <= q2.array()).select(Mat<S>::Constant(1, q1.cols(), -S(1) / n), S(0));
  const Mat<S> pick2 = (q1.array() > q2.array()).select(Mat<S>::Constant(1, q1.cols(), -S(1) / n), S(0));
  const Mat<S> dx = q1_.backward(pick1, false) + q2_.backward(pick2, false);
  const Mat<S> d_action = dx.bottomRows(d);

  // log pi depends on u through the squash term (d/du = 2a) and on log_std
  // directly (-1); u = mean + std * noise.
  const Mat<S> d_pre = ((alpha / n) * S(2) * p.action.array() +
                        d_action.array() * (S(1) - p.action.array().square()))
                           .matrix();
  const Mat<S> d_log_std = (-(alpha / n) + d_pre.array() * p.std.array() * noise.array()).matrix();
  const S lo = static_cast<S>(config_.log_std_min), hi = static_cast<S>(config_.log_std_max);
  const Mat<S> d_raw =
      (d_log_std.array() * S(0.5) * (hi - lo) * (S(1) - p.raw_log_std.array().tanh().square())).matrix();
  actor_.backward(stack(d_pre, d_raw));
  return loss;
}

template <class S>
double SacAgent<S>::alpha_gradient(double entropy) const {
  return alpha() * (entropy - config_.entropy_target());
}

template <class S>
void SacAgent<S>::soft_update_targets() {
  const S tau = static_cast<S>(config_.tau);
  auto blend = [tau](nn::Sequential<S>& online, nn::Sequential<S>& target) {
    auto on = online.params();
    auto tg = target.params();
    for (std::size_t i = 0; i < on.size(); ++i) {
      for (Eigen::Index k = 0; k < on[i].size; ++k) {
        tg[i].value[k] = (S(1) - tau) * tg[i].value[k] + tau * on[i].value[k];
      }
    }
  };
  blend(q1_, q1_target_);
  blend(q2_, q2_target_);
}

template <class S>
SacLosses SacAgent<S>::update_on(const SacBatch<S>& batch) {
  SacLosses out;
  const Mat<S> targets = critic_target(batch);
  q1_.zero_grad();
  q2_.zero_grad();
  out.critic = static_cast<double>(critic_loss(batch, targets, true));
  q1_opt_.step(q1_.params());
  q2_opt_.step(q2_.params());

  actor_.zero_grad();
  S entropy = 0;
  out.actor = static_cast<double>(actor_loss(batch.states, gaussian_noise(batch.states.cols()), true, &entropy));
  actor_opt_.step(actor_.params());
  out.entropy = static_cast<double>(entropy);

  if (config_.learn_alpha) {
    double grad = alpha_gradient(out.entropy);
    out.alpha_loss = grad;
    alpha_opt_.step({{&log_alpha_, &grad, 1}});
  }
  out.alpha = alpha();
  soft_update_targets();
  ++updates_;
  return out;
}

template <class S>
SacLosses SacAgent<S>::update(const ReplayBuffer& replay) {
  const auto b = static_cast<std::size_t>(config_.batch_size);
  if (replay.size() < b) throw Error("warmup incomplete");
  std::uniform_int_distribution<std::size_t> pick(0, replay.size() - 1);
  std::vector<std::size_t> idx(b);
  for (auto& i : idx) i = pick(rng_);
  return update_on(make_batch<S>(replay, idx));
}

namespace {

constexpr char kSacMagic[8] = {'V', 'P', 'S', 'A', 'C', '0', '0', '1'};

}  // namespace

template <class S>
void SacAgent<S>::save(const std::filesystem::path& file) const {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write agent checkpoint");
  out.write(kSacMagic, sizeof kSacMagic);
  const std::int32_t dims[3] = {config_.state_dim, config_.action_dim, static_cast<std::int32_t>(sizeof(S))};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  for (const auto* net : {&actor_, &q1_, &q2_, &q1_target_, &q2_target_}) nn::write_params<S>(out, net->flat_params());
  actor_opt_.save(out);
  q1_opt_.save(out);
  q2_opt_.save(out);
  alpha_opt_.save(out);
  out.write(reinterpret_cast<const char*>(&log_alpha_), sizeof log_alpha_);
  out.write(reinterpret_cast<const char*>(&updates_), sizeof updates_);
  std::ostringstream rng_state;
  rng_state << rng_;
  const std::string s = rng_state.str();
  const std::uint64_t len = s.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(s.data(), static_cast<std::streamsize>(len));
}

template <class S>
void SacAgent<S>::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("missing agent checkpoint");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kSacMagic)) throw Error("not an agent checkpoint");
  std::int32_t dims[3];
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  if (dims[0] != config_.state_dim || dims[1] != config_.action_dim || dims[2] != static_cast<int>(sizeof(S))) {
    throw Error("agent checkpoint does not match configuration");
  }
  for (auto* net : {&actor_, &q1_, &q2_, &q1_target_, &q2_target_}) net->set_flat_params(nn::read_params<S>(in));
  actor_opt_.load(in);
  q1_opt_.load(in);
  q2_opt_.load(in);
  alpha_opt_.load(in);
  in.read(reinterpret_cast<char*>(&log_alpha_), sizeof log_alpha_);
  in.read(reinterpret_cast<char*>(&updates_), sizeof updates_);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("truncated checkpoint");
  std::istringstream rng_state(s);
  rng_state >> rng_;
}

EvalResult evaluate_policy(const Policy& policy, Environment& env, int episodes, std::uint64_t seed) {
  if (episodes < 1) throw Error("episodes must be at least 1");
  Rng rng(seed);
  EvalResult r;
  int successes = 0;
  for (int e = 0; e < episodes; ++e) {
    Vector s = env.reset(rng);
    double ret = 0.0;
    bool success = false;
    while (true) {
      const auto step = env.step(policy(s));
      ret += step.gt_reward;
      success = success || step.success;
      s = step.next_state;
      if (step.done) break;
    }
    r.returns.push_back(ret);
    successes += success ? 1 : 0;
  }
  double sum = 0.0;
  for (double v : r.returns) sum += v;
  r.mean_return = sum / episodes;
  r.success_rate = static_cast<double>(successes) / episodes;
  return r;
}

template SacBatch<float> make_batch<float>(const ReplayBuffer&, std::span<const std::size_t>);
template SacBatch<double> make_batch<double>(const ReplayBuffer&, std::span<const std::size_t>);
template class SacAgent<float>;
template class SacAgent<double>;

}  // namespace vlmpref
