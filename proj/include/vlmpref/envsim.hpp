#pragma once

#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "vlmpref/core.hpp"
#include "vlmpref/image.hpp"

namespace vlmpref {

struct StepResult {
  Vector next_state;
  double gt_reward = 0.0;  // benchmark reward; never shown to the learner
  bool done = false;       // episode over (terminated or truncated)
  bool terminated = false; // true terminal, cuts bootstrapping
  bool success = false;
  double progress = 0.0;
};

// Episodic environment with actions normalized to [-1, 1]^action_dim.
class Environment {
 public:
  virtual ~Environment() = default;

  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual int state_dim() const = 0;
  [[nodiscard]] virtual int action_dim() const = 0;
  [[nodiscard]] virtual int horizon() const = 0;
  [[nodiscard]] virtual std::string goal_description() const = 0;

  virtual Vector reset(Rng& rng) = 0;
  virtual StepResult step(std::span<const double> action) = 0;
  [[nodiscard]] virtual RgbImage render(std::span<const double> state, Resolution res) const = 0;
  [[nodiscard]] virtual double progress(std::span<const double> state) const = 0;

  [[nodiscard]] virtual const Vector& state() const = 0;
  virtual void set_state(std::span<const double> state) = 0;
  [[nodiscard]] virtual int steps_taken() const = 0;
  [[nodiscard]] virtual bool finished() const = 0;
};

// Cart-pole with a signed continuous force: force = action * force_mag.
// State is (x, x_dot, theta, theta_dot).
class CartPoleContinuous final : public Environment {
 public:
  static constexpr double kGravity = 9.8;
  static constexpr double kCartMass = 1.0;
  static constexpr double kPoleMass = 0.1;
  static constexpr double kHalfLength = 0.5;
  static constexpr double kForceMag = 10.0;
  static constexpr double kTau = 0.02;
  static constexpr double kXMax = 2.4;
  static constexpr double kThetaMax = 12.0 * std::numbers::pi / 180.0;
  static constexpr int kHorizon = 200;

  [[nodiscard]] std::string name() const override { return "cartpole"; }
  [[nodiscard]] int state_dim() const override { return 4; }
  [[nodiscard]] int action_dim() const override { return 1; }
  [[nodiscard]] int horizon() const override { return kHorizon; }
  [[nodiscard]] std::string goal_description() const override {
    return "balance the brown pole on the black cart to be upright";
  }

  Vector reset(Rng& rng) override;
  StepResult step(std::span<const double> action) override;
  [[nodiscard]] RgbImage render(std::span<const double> state, Resolution res) const override;
  [[nodiscard]] double progress(std::span<const double> state) const override;

  [[nodiscard]] const Vector& state() const override { return state_; }
  void set_state(std::span<const double> state) override;
  [[nodiscard]] int steps_taken() const override { return steps_; }
  [[nodiscard]] bool finished() const override { return finished_; }

  // One integration step of the equations of motion; no bookkeeping.
  static Vector integrate(std::span<const double> state, double force);

 private:
  Vector state_ = Vector(4, 0.0);
  int steps_ = 0;
  bool finished_ = false;
};

// Planar pushing: a disc robot pushes a ball toward a goal in the unit square.
// State is (robot_x, robot_y, ball_x, ball_y, goal_x, goal_y).
class BallPush2D final : public Environment {
 public:
  static constexpr double kContactRadius = 0.06;
  static constexpr double kSuccessRadius = 0.05;
  static constexpr double kRobotSpeed = 0.05;
  static constexpr double kSpawnMargin = 0.1;
  static constexpr int kHorizon = 100;

  [[nodiscard]] std::string name() const override { return "ballpush2d"; }
  [[nodiscard]] int state_dim() const override { return 6; }
  [[nodiscard]] int action_dim() const override { return 2; }
  [[nodiscard]] int horizon() const override { return kHorizon; }
  [[nodiscard]] std::string goal_description() const override {
    return "move the soccer ball into the goal";
  }

  Vector reset(Rng& rng) override;
  StepResult step(std::span<const double> action) override;
  [[nodiscard]] RgbImage render(std::span<const double> state, Resolution res) const override;
  [[nodiscard]] double progress(std::span<const double> state) const override;

  [[nodiscard]] const Vector& state() const override { return state_; }
  void set_state(std::span<const double> state) override;
  [[nodiscard]] int steps_taken() const override { return steps_; }
  [[nodiscard]] bool finished() const override { return finished_; }

  static double goal_distance(std::span<const double> state);

 private:
  Vector state_ = Vector(6, 0.5);
  int steps_ = 0;
  bool finished_ = false;
};

using EnvironmentFactory = std::function<std::unique_ptr<Environment>(const RunConfig&)>;

// Built-ins: "cartpole", "ballpush2d". Plugins may register more.
void register_environment(const std::string& name, EnvironmentFactory factory);
std::unique_ptr<Environment> make_environment(const std::string& name, const RunConfig& config = {});
std::vector<std::string> environment_names();

// Hand-written controllers used to roll out expert trajectories.
using Policy = std::function<Vector(std::span<const double> state)>;
Policy scripted_expert(const std::string& env_name);

}  // namespace vlmpref
