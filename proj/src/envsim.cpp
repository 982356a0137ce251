#include "vlmpref/envsim.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include "vlmpref/error.hpp"

namespace vlmpref {

namespace {

void check_action(std::span<const double> action, int dim) {
  if (static_cast<int>(action.size()) != dim) throw Error("action dimension mismatch");
  for (double a : action) {
    if (!(a >= -1.0 && a <= 1.0)) throw Error("action out of range");
  }
}

constexpr Color kWhite{255, 255, 255};
constexpr Color kBlack{0, 0, 0};
constexpr Color kBrown{139, 69, 19};
constexpr Color kTrack{128, 128, 128};
constexpr Color kGrass{70, 140, 70};
constexpr Color kGoal{250, 220, 40};
constexpr Color kBall{245, 245, 245};
constexpr Color kRobot{200, 30, 30};

}  // namespace

// ---------------------------------------------------------------- cart-pole

Vector CartPoleContinuous::integrate(std::span<const double> s, double force) {
  constexpr double total_mass = kCartMass + kPoleMass;
  constexpr double polemass_length = kPoleMass * kHalfLength;
  const double x = s[0], x_dot = s[1], theta = s[2], theta_dot = s[3];
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double temp = (force + polemass_length * theta_dot * theta_dot * sin_t) / total_mass;
  const double theta_acc = (kGravity * sin_t - cos_t * temp) /
                           (kHalfLength * (4.0 / 3.0 - kPoleMass * cos_t * cos_t / total_mass));
  const double x_acc = temp - polemass_length * theta_acc * cos_t / total_mass;
  // semi-implicit Euler: velocities first, positions from the new velocities
  const double new_x_dot = x_dot + kTau * x_acc;
  const double new_theta_dot = theta_dot + kTau * theta_acc;
  return {x + kTau * new_x_dot, new_x_dot, theta + kTau * new_theta_dot, new_theta_dot};
}

Vector CartPoleContinuous::reset(Rng& rng) {
  std::uniform_real_distribution<double> dist(-0.05, 0.05);
  for (auto& v : state_) v = dist(rng);
  steps_ = 0;
  finished_ = false;
  return state_;
}

StepResult CartPoleContinuous::step(std::span<const double> action) {
  if (finished_) throw Error("episode finished");
  check_action(action, 1);
  state_ = integrate(state_, action[0] * kForceMag);
  ++steps_;

  StepResult r;
  r.next_state = state_;
  r.terminated = std::abs(state_[0]) > kXMax || std::abs(state_[2]) > kThetaMax;
  const bool truncated = !r.terminated && steps_ >= kHorizon;
  r.done = r.terminated || truncated;
  r.gt_reward = 1.0;
  r.success = truncated;
  r.progress = progress(state_);
  finished_ = r.done;
  return r;
}

double CartPoleContinuous::progress(std::span<const double> s) const {
  const double p = 1.0 - (std::abs(s[2]) / kThetaMax + std::abs(s[0]) / kXMax) / 2.0;
  return std::clamp(p, 0.0, 1.0);
}

void CartPoleContinuous::set_state(std::span<const double> s) {
  if (s.size() != 4) throw Error("state dimension mismatch");
  state_.assign(s.begin(), s.end());
  steps_ = 0;
  finished_ = false;
}

RgbImage CartPoleContinuous::render(std::span<const double> s, Resolution res) const {
  const double w = res.width, h = res.height;
  const double scale = w / (2.0 * kXMax);
  const double ground = 0.75 * h;
  const double cx = w / 2.0 + s[0] * scale;
  const double cart_half_w = 0.25 * scale, cart_half_h = 0.15 * scale;
  const double pole_len = 2.0 * kHalfLength * scale;
  const double pole_half_w = std::max(1.0, 0.05 * scale);

  Canvas canvas(res.width, res.height, kWhite);
  canvas.fill_rect(0.0, ground - 0.5, w, ground + 0.5, kTrack);
  canvas.fill_rect(cx - cart_half_w, ground - cart_half_h, cx + cart_half_w, ground + cart_half_h, kBlack);
  const double top = ground - cart_half_h;
  canvas.draw_line(cx, top, cx + pole_len * std::sin(s[2]), top - pole_len * std::cos(s[2]), pole_half_w,
                   kBrown);
  return std::move(canvas).take();
}

// ---------------------------------------------------------------- ball push

double BallPush2D::goal_distance(std::span<const double> s) { return std::hypot(s[2] - s[4], s[3] - s[5]); }

Vector BallPush2D::reset(Rng& rng) {
  std::uniform_real_distribution<double> coord(kSpawnMargin, 1.0 - kSpawnMargin);
  const double min_sep = 2.0 * kContactRadius;
  while (true) {
    for (auto& v : state_) v = coord(rng);
    const double rb = std::hypot(state_[0] - state_[2], state_[1] - state_[3]);
    const double rg = std::hypot(state_[0] - state_[4], state_[1] - state_[5]);
    const double bg = goal_distance(state_);
    if (rb >= min_sep && rg >= min_sep && bg >= min_sep) break;
  }
  steps_ = 0;
  finished_ = false;
  return state_;
}

StepResult BallPush2D::step(std::span<const double> action) {
  if (finished_) throw Error("episode finished");
  check_action(action, 2);
  auto& s = state_;
  s[0] = std::clamp(s[0] + kRobotSpeed * action[0], 0.0, 1.0);
  s[1] = std::clamp(s[1] + kRobotSpeed * action[1], 0.0, 1.0);

  const double dx = s[2] - s[0], dy = s[3] - s[1];
  const double dist = std::hypot(dx, dy);
  if (dist < kContactRadius) {
    double ux = 1.0, uy = 0.0;
    if (dist > 1e-12) {
      ux = dx / dist;
      uy = dy / dist;
    } else if (const double an = std::hypot(action[0], action[1]); an > 0.0) {
      ux = action[0] / an;
      uy = action[1] / an;
    }
    const double overlap = kContactRadius - dist;
    s[2] = std::clamp(s[2] + ux * overlap, 0.0, 1.0);
    s[3] = std::clamp(s[3] + uy * overlap, 0.0, 1.0);
  }
  ++steps_;

  StepResult r;
  r.next_state = s;
  const double d = goal_distance(s);
  r.gt_reward = -d;
  r.progress = -d;
  r.success = d < kSuccessRadius;
  r.terminated = false;
  r.done = steps_ >= kHorizon;
  finished_ = r.done;
  return r;
}

double BallPush2D::progress(std::span<const double> s) const { return -goal_distance(s); }

void BallPush2D::set_state(std::span<const double> s) {
  if (s.size() != 6) throw Error("state dimension mismatch");
  state_.assign(s.begin(), s.end());
  steps_ = 0;
  finished_ = false;
}

RgbImage BallPush2D::render(std::span<const double> s, Resolution res) const {
  const double w = res.width, h = res.height;
  auto px = [&](double x) { return x * w; };
  auto py = [&](double y) { return (1.0 - y) * h; };
  const double unit = std::min(w, h);
  Canvas canvas(res.width, res.height, kGrass);
  canvas.fill_disc(px(s[4]), py(s[5]), kSuccessRadius * unit, kGoal);
  canvas.fill_disc(px(s[2]), py(s[3]), 0.5 * kContactRadius * unit, kBall);
  canvas.fill_disc(px(s[0]), py(s[1]), 0.5 * kContactRadius * unit, kRobot);
  return std::move(canvas).take();
}

// ---------------------------------------------------------------- registry

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, EnvironmentFactory>& registry() {
  static std::map<std::string, EnvironmentFactory> r{
      {"cartpole", [](const RunConfig&) { return std::make_unique<CartPoleContinuous>(); }},
      {"ballpush2d", [](const RunConfig&) { return std::make_unique<BallPush2D>(); }},
  };
  return r;
}

}  // namespace

void register_environment(const std::string& name, EnvironmentFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

std::unique_ptr<Environment> make_environment(const std::string& name, const RunConfig& config) {
  EnvironmentFactory factory;
  {
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(name);
    if (it == registry().end()) throw Error("unknown environment: " + name);
    factory = it->second;
  }
  return factory(config);
}

std::vector<std::string> environment_names() {
  std::lock_guard lock(registry_mutex());
  std::vector<std::string> names;
  for (const auto& [name, _] : registry()) names.push_back(name);
  return names;
}

Policy scripted_expert(const std::string& env_name) {
  if (env_name == "cartpole") {
    return [](std::span<const double> s) {
      const double force = 1.0 * s[0] + 1.5 * s[1] + 18.0 * s[2] + 3.0 * s[3];
      return Vector{std::clamp(force / CartPoleContinuous::kForceMag, -1.0, 1.0)};
    };
  }
  if (env_name == "ballpush2d") {
    // Walks around the ball at a safe radius until it is behind it (seen from
    // the goal), then steps into it so that each contact moves the ball
    // straight at the goal, never past it.
    return [](std::span<const double> s) {
      constexpr double contact = BallPush2D::kContactRadius, speed = BallPush2D::kRobotSpeed;
      const double rx = s[0], ry = s[1], bx = s[2], by = s[3], gx = s[4], gy = s[5];
      const double gd = std::hypot(gx - bx, gy - by);
      if (gd < 1e-9) return Vector{0.0, 0.0};
      const double ux = (gx - bx) / gd, uy = (gy - by) / gd;
      auto toward = [&](double tx, double ty) {
        const double dx = tx - rx, dy = ty - ry, d = std::hypot(dx, dy);
        if (d < 1e-12) return Vector{0.0, 0.0};
        const double k = std::min(1.0, d / speed) / d;
        return Vector{std::clamp(dx * k, -1.0, 1.0), std::clamp(dy * k, -1.0, 1.0)};
      };

      const double push = std::min(speed - 0.01, gd);
      const double tx = bx - ux * (contact - push), ty = by - uy * (contact - push);
      if (std::hypot(tx - rx, ty - ry) <= speed) return Vector{(tx - rx) / speed, (ty - ry) / speed};

      // approach point just outside contact, behind the ball
      const double px = bx - ux * (contact + 0.005), py = by - uy * (contact + 0.005);
      const double sx = px - rx, sy = py - ry, len2 = sx * sx + sy * sy;
      const double t = len2 > 0.0 ? std::clamp(((bx - rx) * sx + (by - ry) * sy) / len2, 0.0, 1.0) : 0.0;
      if (std::hypot(rx + t * sx - bx, ry + t * sy - by) >= contact + 0.002) return toward(px, py);

      const double here = std::atan2(ry - by, rx - bx), target = std::atan2(-uy, -ux);
      double diff = std::remainder(target - here, 2.0 * std::numbers::pi);
      diff = std::clamp(diff, -0.5, 0.5);
      const double radius = contact + 0.03;
      return toward(bx + radius * std::cos(here + diff), by + radius * std::sin(here + diff));
    };
  }
  throw Error("no scripted expert for environment: " + env_name);
}

}  // namespace vlmpref
