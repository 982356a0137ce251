#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "vlmpref/envsim.hpp"
#include "vlmpref/error.hpp"
#include "vlmpref/sac.hpp"

using namespace vlmpref;
using nn::Mat;

namespace {

SacConfig tiny_config(int state_dim = 3, int action_dim = 2) {
  SacConfig c;
  c.state_dim = state_dim;
  c.action_dim = action_dim;
  c.hidden = {8, 8};
  c.batch_size = 16;
  return c;
}

SacBatch<double> random_batch(const SacConfig& c, int n, Rng& rng, double done_fraction = 0.0) {
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u(-1.0, 1.0), coin(0.0, 1.0);
  SacBatch<double> b;
  b.states = Mat<double>(c.state_dim, n);
  b.next_states = Mat<double>(c.state_dim, n);
  b.actions = Mat<double>(c.action_dim, n);
  b.rewards = Mat<double>(1, n);
  b.not_done = Mat<double>(1, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < c.state_dim; ++i) {
      b.states(i, j) = n01(rng);
      b.next_states(i, j) = n01(rng);
    }
    for (int i = 0; i < c.action_dim; ++i) b.actions(i, j) = u(rng);
    b.rewards(0, j) = n01(rng);
    b.not_done(0, j) = coin(rng) < done_fraction ? 0.0 : 1.0;
  }
  return b;
}

Mat<double> gaussian(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> n01;
  Mat<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
  return m;
}

// Largest relative error between the accumulated gradient of `net` and central
// differences of `loss` over every parameter.
template <class LossFn>
double finite_difference_error(nn::Sequential<double>& net, const Eigen::VectorXd& analytic, LossFn&& loss) {
  auto p = net.flat_params();
  const double eps = 1e-6;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double keep = p[k];
    p[k] = keep + eps;
    net.set_flat_params(p);
    const double up = loss();
    p[k] = keep - eps;
    net.set_flat_params(p);
    const double down = loss();
    p[k] = keep;
    net.set_flat_params(p);
    const double numeric = (up - down) / (2.0 * eps);
    const double scale = std::max({std::abs(analytic[k]), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic[k] - numeric) / scale);
  }
  return worst;
}

Transition transition(const Vector& s, const Vector& a, double r, bool done) {
  Transition t;
  t.state = s;
  t.action = a;
  t.next_state = s;
  t.reward = r;
  t.done = done;
  return t;
}

}  // namespace

TEST_CASE("actions stay in the unit box") {
  SacAgentF agent(tiny_config(4, 3), 1);
  Rng rng(5);
  std::normal_distribution<double> wide(0.0, 100.0);
  for (int i = 0; i < 1000; ++i) {
    const Vector s{wide(rng), wide(rng), wide(rng), wide(rng)};
    for (bool det : {false, true})
      for (double a : agent.select_action(s, det)) {
        CHECK(a >= -1.0);
        CHECK(a <= 1.0);
      }
  }
  CHECK_THROWS_AS(agent.select_action(Vector{0.0}, true), Error);
}

TEST_CASE("deterministic actions repeat") {
  SacAgentF agent(tiny_config(), 2);
  const Vector s{0.3, -0.1, 2.0};
  CHECK(agent.select_action(s, true) == agent.select_action(s, true));
  CHECK(agent.select_action(s, false) != agent.select_action(s, false));
}

TEST_CASE("fresh agent acts near zero on average") {
  SacConfig c;
  c.state_dim = 4;
  c.action_dim = 2;
  SacAgentF agent(c, 3);
  Rng rng(8);
  std::normal_distribution<double> n01;
  double sum[2] = {0.0, 0.0};
  for (int i = 0; i < 1000; ++i) {
    const auto a = agent.select_action(Vector{n01(rng), n01(rng), n01(rng), n01(rng)}, false);
    sum[0] += a[0];
    sum[1] += a[1];
  }
  CHECK(std::abs(sum[0] / 1000.0) < 0.2);
  CHECK(std::abs(sum[1] / 1000.0) < 0.2);
}

TEST_CASE("Bellman targets") {
  Rng rng(4);
  SUBCASE("no discount") {
    auto c = tiny_config();
    c.discount = 0.0;
    SacAgent<double> agent(c, 1);
    const auto b = random_batch(c, 32, rng);
    CHECK(agent.critic_target(b) == b.rewards);
  }
  SUBCASE("terminal transitions") {
    auto c = tiny_config();
    SacAgent<double> agent(c, 1);
    const auto b = random_batch(c, 64, rng, 0.5);
    const auto y = agent.critic_target(b);
    int terminals = 0;
    for (Eigen::Index j = 0; j < b.rewards.cols(); ++j) {
      if (b.not_done(0, j) == 0.0) {
        ++terminals;
        CHECK(y(0, j) == b.rewards(0, j));
      } else {
        CHECK(y(0, j) != b.rewards(0, j));
      }
    }
    CHECK(terminals > 0);
  }
  SUBCASE("equal twin targets") {
    auto c = tiny_config();
    c.discount = 0.9;
    SacAgent<double> agent(c, 1);
    agent.target_critic(1) = agent.target_critic(0);
    agent.set_log_alpha(-400.0);  // entropy bonus underflows to zero
    const auto b = random_batch(c, 8, rng);
    const Mat<double> zero = Mat<double>::Zero(c.action_dim, 8);
    const auto y = agent.critic_target(b, zero);
    for (Eigen::Index j = 0; j < 8; ++j) {
      const Vector s(b.next_states.col(j).data(), b.next_states.col(j).data() + c.state_dim);
      const auto a = agent.select_action(s, true);  // zero noise gives the mode
      Mat<double> x(c.state_dim + c.action_dim, 1);
      x << b.next_states.col(j), Eigen::Map<const Eigen::VectorXd>(a.data(), c.action_dim);
      const double q = agent.target_critic(0).predict(x)(0, 0);
      CHECK(y(0, j) == doctest::Approx(b.rewards(0, j) + 0.9 * q).epsilon(1e-12));
    }
  }
}

TEST_CASE("soft target update") {
  auto c = tiny_config();
  c.tau = 0.05;
  SacAgent<double> agent(c, 1);
  Rng rng(2);
  // move the online critics away from their targets first
  for (int i = 0; i < 2; ++i) {
    auto p = agent.critic(i).flat_params();
    agent.critic(i).set_flat_params(p + 0.3 * gaussian(static_cast<int>(p.size()), 1, rng).col(0));
  }
  const Eigen::VectorXd before_all[2] = {agent.target_critic(0).flat_params(), agent.target_critic(1).flat_params()};
  agent.soft_update_targets();
  for (int i = 0; i < 2; ++i) {
    const Eigen::VectorXd& before = before_all[i];
    const Eigen::VectorXd online = agent.critic(i).flat_params();
    const Eigen::VectorXd after = agent.target_critic(i).flat_params();
    for (Eigen::Index k = 0; k < after.size(); ++k) {
      CHECK(after[k] - before[k] == doctest::Approx(0.05 * (online[k] - before[k])).epsilon(1e-9));
      CHECK(std::abs(after[k] - online[k]) == doctest::Approx(0.95 * std::abs(before[k] - online[k])).epsilon(1e-9));
    }
  }
}

TEST_CASE("a full update moves targets by tau toward the new online critics") {
  auto c = tiny_config();
  SacAgent<double> agent(c, 1);
  Rng rng(6);
  const auto b = random_batch(c, 16, rng);
  const Eigen::VectorXd before = agent.target_critic(0).flat_params();
  const auto losses = agent.update_on(b);
  const Eigen::VectorXd online = agent.critic(0).flat_params();
  const Eigen::VectorXd after = agent.target_critic(0).flat_params();
  CHECK((after - (before + c.tau * (online - before))).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(std::isfinite(losses.critic));
  CHECK(std::isfinite(losses.actor));
  CHECK(losses.alpha > 0.0);
  CHECK(agent.updates() == 1);
}

TEST_CASE("gradients match finite differences") {
  auto c = tiny_config(3, 2);
  c.hidden = {6, 6};
  SacAgent<double> agent(c, 11);
  Rng rng(12);
  const auto b = random_batch(c, 5, rng);
  SUBCASE("critic") {
    const auto targets = agent.critic_target(b);
    agent.critic(0).zero_grad();
    agent.critic(1).zero_grad();
    agent.critic_loss(b, targets, true);
    for (int i = 0; i < 2; ++i) {
      const Eigen::VectorXd g = agent.critic(i).flat_grads();
      CHECK(finite_difference_error(agent.critic(i), g, [&] { return agent.critic_loss(b, targets, false); }) <
            1e-3);
    }
  }
  SUBCASE("actor") {
    agent.set_log_alpha(std::log(0.3));
    const auto noise = gaussian(c.action_dim, 5, rng);
    agent.actor().zero_grad();
    agent.actor_loss(b.states, noise, true);
    const Eigen::VectorXd g = agent.actor().flat_grads();
    CHECK(finite_difference_error(agent.actor(), g, [&] { return agent.actor_loss(b.states, noise, false); }) <
          1e-3);
  }
}

TEST_CASE("temperature moves toward the target entropy") {
  auto c = tiny_config(3, 1);
  SacAgent<double> agent(c, 3);
  const double target = c.entropy_target();
  CHECK(target == -1.0);
  CHECK(agent.alpha_gradient(target + 0.5) > 0.0);
  CHECK(agent.alpha_gradient(target - 0.5) < 0.0);
  CHECK(agent.alpha_gradient(target) == 0.0);

  // a fresh squashed Gaussian has entropy well above -1
  Rng rng(1);
  const auto b = random_batch(c, 16, rng);
  const double before = agent.alpha();
  const auto losses = agent.update_on(b);
  CHECK(losses.entropy > target);
  CHECK(agent.alpha() < before);

  // and an entropy target above anything reachable pushes it up
  auto greedy = c;
  greedy.target_entropy = 50.0;
  SacAgent<double> other(greedy, 3);
  const double start = other.alpha();
  other.update_on(b);
  CHECK(other.alpha() > start);
}

TEST_CASE("critic loss shrinks on zero rewards") {
  auto c = tiny_config(3, 1);
  c.hidden = {32, 32};
  c.learn_alpha = false;
  c.init_alpha = 1e-12;
  c.batch_size = 64;
  SacAgent<double> agent(c, 21);
  Rng rng(22);
  auto b = random_batch(c, 64, rng);
  b.rewards.setZero();
  const double initial = agent.critic_loss(b, agent.critic_target(b), false);
  REQUIRE(initial > 0.0);
  for (int i = 0; i < 500; ++i) agent.update_on(b);
  const double final_loss = agent.critic_loss(b, agent.critic_target(b), false);
  CHECK(final_loss < 0.1 * initial);
}

TEST_CASE("update needs a full batch") {
  auto c = tiny_config(1, 1);
  SacAgentF agent(c, 1);
  ReplayBuffer replay(100);
  for (int i = 0; i < c.batch_size - 1; ++i) replay.push(transition({0.1 * i}, {0.0}, 0.0, false));
  CHECK_THROWS_WITH_AS(agent.update(replay), "warmup incomplete", Error);
  replay.push(transition({1.0}, {0.5}, 1.0, true));
  CHECK_NOTHROW(agent.update(replay));
}

TEST_CASE("replay batches") {
  ReplayBuffer replay(10);
  replay.push(transition({1.0, 2.0}, {0.5}, 0.25, false));
  replay.push(transition({3.0, 4.0}, {-0.5}, -1.0, true));
  const std::vector<std::size_t> idx{1, 0, 1};
  const auto b = make_batch<double>(replay, idx);
  CHECK(b.states.cols() == 3);
  CHECK(b.states(0, 0) == 3.0);
  CHECK(b.actions(0, 1) == 0.5);
  CHECK(b.rewards(0, 0) == -1.0);
  CHECK(b.not_done(0, 0) == 0.0);
  CHECK(b.not_done(0, 1) == 1.0);
}

TEST_CASE("evaluation") {
  auto env = make_environment("cartpole");
  const Policy idle = [](std::span<const double>) { return Vector{0.0}; };
  const auto r = evaluate_policy(idle, *env, 5, 3);
  CHECK(r.returns.size() == 5);
  for (double v : r.returns) CHECK(v >= 10.0);
  CHECK(r.success_rate >= 0.0);
  CHECK(r.success_rate <= 1.0);

  SacConfig c;
  c.state_dim = 4;
  c.action_dim = 1;
  SacAgentF agent(c, 1);
  const auto a = evaluate(agent, *env, 1, 77);
  const auto b = evaluate(agent, *env, 1, 77);
  CHECK(a.mean_return == b.mean_return);
  CHECK(a.success_rate == b.success_rate);

  auto expert = make_environment("ballpush2d");
  const auto e = evaluate_policy(scripted_expert("ballpush2d"), *expert, 10, 5);
  CHECK(e.success_rate == 1.0);
  CHECK_THROWS_AS(evaluate_policy(idle, *env, 0, 1), Error);
}

TEST_CASE("checkpoints restore the agent") {
  testing::TempDir dir("sac");
  auto c = tiny_config();
  SacAgentF agent(c, 5);
  Rng rng(3);
  ReplayBuffer replay(100);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 40; ++i) replay.push(transition({u(rng), u(rng), u(rng)}, {u(rng), u(rng)}, u(rng), false));
  for (int i = 0; i < 5; ++i) agent.update(replay);
  agent.save(dir.path() / "sac_5.ckpt");

  SacAgentF restored(c, 99);
  restored.load(dir.path() / "sac_5.ckpt");
  const Vector s{0.2, 0.4, -0.9};
  CHECK(restored.select_action(s, true) == agent.select_action(s, true));
  CHECK(restored.alpha() == agent.alpha());
  CHECK(restored.updates() == agent.updates());
  // optimizer moments and generator state come back too
  agent.update(replay);
  restored.update(replay);
  CHECK(restored.select_action(s, true) == agent.select_action(s, true));

  SacAgentF wrong(tiny_config(2, 2), 1);
  CHECK_THROWS_AS(wrong.load(dir.path() / "sac_5.ckpt"), Error);
}
