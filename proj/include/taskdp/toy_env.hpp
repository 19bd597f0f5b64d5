#pragma once
// Deterministic planar articulated-lid environments.
//
// An object is a hinged lid: a segment of a given length anchored at the
// hinge, opening by angle theta from its closed direction (counterclockwise),
// with a handle partway along the lid. The agent is a point end-effector
// that moves by a bounded step each tick and may toggle a grasp. While the
// grasp holds, hand motion projected on the lid's tangent rotates the lid
// and the hand rides the handle arc. Two categories differ by the closed
// direction: lid_up lies along +x and opens upward, lid_sideways lies along
// +y (the same geometry rotated a quarter turn).
//
// All dynamics are pure functions of (state, action, object, params); the
// only randomness is in reset() and split sampling.

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "taskdp/ltl.hpp"
#include "taskdp/rng.hpp"

namespace taskdp::env {

using Vec2 = Eigen::Vector2d;

enum class Category { kLidUp, kLidSideways };

std::string to_string(Category category);
Category category_from_string(const std::string& name);

struct ArticulatedObject {
  Vec2 hinge = Vec2::Zero();  // within [0, 0.5]^2
  double lid_length = 0.5;    // within [0.3, 0.8]
  double handle_frac = 0.75;  // handle distance along the lid, in [0.5, 1]
  double theta_max = 1.5;     // within [pi/3, 2*pi/3]
  Category category = Category::kLidUp;

  double handle_radius() const { return handle_frac * lid_length; }
  void validate() const;  // throws std::invalid_argument
  bool operator==(const ArticulatedObject& other) const;
};

struct EnvParams {
  double d_approach = 0.15;  // label threshold for toilet_approached
  double d_grasp = 0.05;     // grasp engagement radius
  double a_max = 0.05;       // per-step end-effector motion bound
  int horizon = 200;
  double w_reach = 0.01;
  double w_articulation = 0.5;
  double w_mpr = 0.005;
  double theta_goal_frac = 0.8;  // lid_opened at theta >= frac * theta_max
  double workspace = 2.0;        // end-effector clamp box half-width

  double theta_goal(const ArticulatedObject& object) const {
    return theta_goal_frac * object.theta_max;
  }
};

struct EnvState {
  Vec2 eff = Vec2::Zero();
  bool grasp = false;
  double theta = 0.0;
  int steps = 0;
};

struct Action {
  Vec2 delta = Vec2::Zero();  // clamped to [-a_max, a_max]^2 by step()
  double grasp_toggle = -1.0;  // > 0 requests/holds a grasp
};

struct StepResult {
  EnvState state;
  double reach_raw = 0.0;         // -distance(end effector, handle)
  double articulation_raw = 0.0;  // signed lid rotation this step
  ltl::Label label;
  bool terminal = false;  // horizon exhausted
};

// Unit direction of the lid and its derivative with respect to theta.
Vec2 lid_dir(const ArticulatedObject& object, double theta);
Vec2 lid_tangent(const ArticulatedObject& object, double theta);
Vec2 handle_position(const ArticulatedObject& object, double theta);

// The three propositions the labeling function can emit, sorted.
const std::vector<std::string>& propositions();

ltl::Label label(const EnvState& state, const ArticulatedObject& object,
                 const EnvParams& params);
bool success(const EnvState& state, const ArticulatedObject& object,
             const EnvParams& params);

// Closed lid, no grasp, end effector in the far start box [-1.9, -1.7]^2.
EnvState reset(const ArticulatedObject& object, Rng& rng);

// Advances one tick. Throws std::logic_error on a terminal state.
StepResult step(const EnvState& state, const Action& action,
                const ArticulatedObject& object, const EnvParams& params);

// r_env = w_reach * reach + w_articulation * dtheta + w_mpr * mpr. The
// manipulation-prior term is supplied by the caller because it depends on
// the affordance model, not the environment.
double compose_reward(const StepResult& result, double mpr_value,
                      const EnvParams& params);

// (eff.x, eff.y, grasp flag, lid angle) — what the agent knows about
// itself and the joint it is driving.
Eigen::Vector4d proprioception(const EnvState& state);

struct ObjectSplit {
  std::vector<ArticulatedObject> seen;
  std::vector<ArticulatedObject> unseen;
  std::vector<ArticulatedObject> transfer;  // flipped category
};

// Seen and unseen draws come from disjoint sub-ranges of lid length and
// hinge position; transfer reuses the unseen ranges with the category
// flipped to lid_sideways.
ObjectSplit make_splits(std::size_t n_seen, std::size_t n_unseen,
                        std::uint64_t seed);

// Uniform draw over the full legal parameter ranges, both categories.
// Domain randomization for perception pretraining; policy training must
// stick to split objects.
ArticulatedObject random_object(Rng& rng);

void save_splits(const ObjectSplit& split, const std::string& path);
ObjectSplit load_splits(const std::string& path);

// Hand-written controller that solves any valid object: approach the
// handle, grasp, then push along the tangent. Used as a dynamics oracle and
// for generating segmentation scenes with plausible hand placements.
Action scripted_policy_action(const EnvState& state,
                              const ArticulatedObject& object,
                              const EnvParams& params);

}  // namespace taskdp::env
