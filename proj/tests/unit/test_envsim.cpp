#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "vlmpref/envsim.hpp"
#include "vlmpref/error.hpp"

using namespace vlmpref;

TEST_CASE("registry") {
  const auto names = environment_names();
  CHECK(std::find(names.begin(), names.end(), "cartpole") != names.end());
  CHECK(std::find(names.begin(), names.end(), "ballpush2d") != names.end());
  CHECK_THROWS_AS(make_environment("mujoco"), Error);
}

TEST_CASE("cartpole reset") {
  auto env = make_environment("cartpole");
  Rng a(0), b(0);
  CHECK(env->reset(a) == make_environment("cartpole")->reset(b));
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    for (double v : env->reset(rng)) {
      CHECK(v >= -0.05);
      CHECK(v <= 0.05);
    }
  }
}

TEST_CASE("cartpole step") {
  CartPoleContinuous env;
  SUBCASE("equilibrium stays put") {
    env.set_state(Vector{0, 0, 0, 0});
    const auto r = env.step(Vector{0.0});
    CHECK(r.next_state == Vector{0, 0, 0, 0});
    CHECK_FALSE(r.done);
    CHECK(r.gt_reward == 1.0);
  }
  SUBCASE("full push from rest matches hand integration") {
    // One 0.02 s step of the classic equations with F = 10 N, worked out by hand:
    // temp = 10/1.1, theta_acc = -temp / (0.5 (4/3 - 0.1/1.1)) = -14.634146...,
    // x_acc = temp + 0.05 * 14.634146 / 1.1 = 9.756098...
    env.set_state(Vector{0, 0, 0, 0});
    const auto s = env.step(Vector{1.0}).next_state;
    CHECK(s[1] == doctest::Approx(0.19512195).epsilon(1e-6));
    CHECK(s[0] == doctest::Approx(0.00390244).epsilon(1e-5));
    CHECK(s[3] == doctest::Approx(-0.29268293).epsilon(1e-6));
    CHECK(s[2] == doctest::Approx(-0.00585366).epsilon(1e-5));
  }
  SUBCASE("actions outside [-1, 1] are rejected") {
    env.set_state(Vector{0, 0, 0, 0});
    CHECK_THROWS_AS(env.step(Vector{1.5}), Error);
  }
  SUBCASE("horizon and finished episodes") {
    env.set_state(Vector{0, 0, 0, 0});
    int steps = 0;
    while (!env.finished()) {
      env.step(Vector{0.0});
      ++steps;
    }
    CHECK(steps == CartPoleContinuous::kHorizon);
    CHECK_THROWS_WITH_AS(env.step(Vector{0.0}), "episode finished", Error);
  }
}

TEST_CASE("cartpole terminates on the step the pole crosses the threshold") {
  Rng rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    CartPoleContinuous env;
    env.reset(rng);
    while (!env.finished()) {
      const auto r = env.step(Vector{u(rng)});
      const bool out = std::abs(r.next_state[2]) > CartPoleContinuous::kThetaMax ||
                       std::abs(r.next_state[0]) > CartPoleContinuous::kXMax;
      CHECK(r.terminated == out);
      if (out) CHECK(r.done);
    }
  }
}

TEST_CASE("cartpole progress") {
  CartPoleContinuous env;
  CHECK(env.progress(Vector{0, 0, 0, 0}) == 1.0);
  CHECK(env.progress(Vector{0, 0, CartPoleContinuous::kThetaMax, 0}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(env.progress(Vector{CartPoleContinuous::kXMax, 0, CartPoleContinuous::kThetaMax, 0}) == 0.0);
  CHECK(env.progress(Vector{0.1, 0, 0.05, 0}) > env.progress(Vector{0.1, 0, 0.1, 0}));
}

TEST_CASE("cartpole rendering") {
  CartPoleContinuous env;
  const Vector s{0.3, 0.0, -0.1, 0.0};
  const auto a = env.render(s, {128, 128});
  CHECK(a == env.render(s, {128, 128}));
  CHECK(a.pixels.size() == 128u * 128u * 3u);
  const auto b = env.render(s, {60, 40});
  CHECK(b.pixels.size() == 60u * 40u * 3u);

  // Upright pole: brown pixels form a column centred on the cart.
  const auto img = env.render(Vector{0, 0, 0, 0}, {128, 128});
  const Color brown{139, 69, 19};
  int count = 0, min_x = 1000, max_x = -1;
  double sum_x = 0.0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (img.at(x, y) == brown) {
        ++count;
        sum_x += x + 0.5;
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
      }
  REQUIRE(count > 0);
  CHECK(sum_x / count == doctest::Approx(64.0).epsilon(0.01));
  CHECK(max_x - min_x <= 6);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < 64; ++x) CHECK((img.at(x, y) == brown) == (img.at(127 - x, y) == brown));
}

TEST_CASE("ballpush reset keeps objects apart") {
  BallPush2D env;
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const auto s = env.reset(rng);
    const double sep = 2.0 * BallPush2D::kContactRadius;
    CHECK(std::hypot(s[0] - s[2], s[1] - s[3]) >= sep);
    CHECK(std::hypot(s[0] - s[4], s[1] - s[5]) >= sep);
    CHECK(std::hypot(s[2] - s[4], s[3] - s[5]) >= sep);
  }
}

TEST_CASE("ballpush dynamics") {
  BallPush2D env;
  SUBCASE("no contact, no ball motion") {
    env.set_state(Vector{0.1, 0.1, 0.8, 0.8, 0.5, 0.5});
    Rng rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 3; ++i) {
      const auto r = env.step(Vector{u(rng), u(rng)});
      CHECK(r.next_state[2] == 0.8);
      CHECK(r.next_state[3] == 0.8);
    }
  }
  SUBCASE("contact pushes the ball away from the robot") {
    env.set_state(Vector{0.45, 0.5, 0.52, 0.5, 0.9, 0.5});
    const auto r = env.step(Vector{1.0, 0.0});
    CHECK(r.next_state[2] > 0.52);
    CHECK(r.next_state[3] == doctest::Approx(0.5));
    CHECK(r.progress > -0.38);
  }
  SUBCASE("positions stay in the unit square") {
    Rng rng(9);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    env.reset(rng);
    while (!env.finished()) {
      const auto r = env.step(Vector{u(rng), u(rng)});
      for (int k = 0; k < 6; ++k) {
        CHECK(r.next_state[k] >= 0.0);
        CHECK(r.next_state[k] <= 1.0);
      }
      CHECK(r.gt_reward == doctest::Approx(-BallPush2D::goal_distance(r.next_state)));
    }
  }
  SUBCASE("progress") {
    CHECK(env.progress(Vector{0.1, 0.1, 0.5, 0.5, 0.5, 0.5}) == 0.0);
    CHECK(env.progress(Vector{0.1, 0.1, 0.5, 0.6, 0.5, 0.5}) > env.progress(Vector{0.1, 0.1, 0.5, 0.7, 0.5, 0.5}));
  }
}

TEST_CASE("ballpush rendering: ball at goal is centred on the goal disc") {
  BallPush2D env;
  const auto img = env.render(Vector{0.1, 0.1, 0.4, 0.6, 0.4, 0.6}, {128, 128});
  CHECK(img == env.render(Vector{0.1, 0.1, 0.4, 0.6, 0.4, 0.6}, {128, 128}));
  auto centre = [&](Color c) {
    double sx = 0, sy = 0;
    int n = 0;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        if (img.at(x, y) == c) {
          sx += x + 0.5;
          sy += y + 0.5;
          ++n;
        }
    REQUIRE(n > 0);
    return std::pair{sx / n, sy / n};
  };
  const auto ball = centre({245, 245, 245});
  // the goal disc is partly covered by the ball; its visible ring is still centred
  const auto goal = centre({250, 220, 40});
  CHECK(std::abs(ball.first - goal.first) <= 1.0);
  CHECK(std::abs(ball.second - goal.second) <= 1.0);
  CHECK(ball.first == doctest::Approx(0.4 * 128).epsilon(0.02));
}

TEST_CASE("scripted experts") {
  SUBCASE("cartpole expert balances") {
    auto env = make_environment("cartpole");
    auto policy = scripted_expert("cartpole");
    Rng rng(3);
    auto s = env->reset(rng);
    int steps = 0;
    while (!env->finished()) {
      s = env->step(policy(s)).next_state;
      ++steps;
    }
    CHECK(steps == 200);
  }
  SUBCASE("ballpush expert drives the ball to the goal monotonically") {
    auto env = make_environment("ballpush2d");
    auto policy = scripted_expert("ballpush2d");
    Rng rng(4);
    for (int ep = 0; ep < 5; ++ep) {
      auto s = env->reset(rng);
      double last = env->progress(s);
      bool success = false;
      while (!env->finished()) {
        const auto r = env->step(policy(s));
        s = r.next_state;
        CHECK(r.progress >= last - 1e-12);
        last = r.progress;
        success = success || r.success;
      }
      CHECK(success);
    }
  }
  CHECK_THROWS_AS(scripted_expert("unknown"), Error);
}

TEST_CASE("do-nothing policy on cartpole survives the early steps") {
  auto env = make_environment("cartpole");
  Rng rng(0);
  for (int ep = 0; ep < 20; ++ep) {
    env->reset(rng);
    int steps = 0;
    while (!env->finished()) {
      env->step(Vector{0.0});
      ++steps;
    }
    CHECK(steps >= 10);
  }
}
