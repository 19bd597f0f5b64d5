#include "taskdp/toy_env.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace taskdp::env {

namespace {

double clamp(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

Vec2 clamp_box(const Vec2& v, double bound) {
  return {clamp(v.x(), -bound, bound), clamp(v.y(), -bound, bound)};
}

}  // namespace

std::string to_string(Category category) {
  switch (category) {
    case Category::kLidUp:
      return "lid_up";
    case Category::kLidSideways:
      return "lid_sideways";
  }
  throw std::logic_error("unknown category");
}

Category category_from_string(const std::string& name) {
  if (name == "lid_up") return Category::kLidUp;
  if (name == "lid_sideways") return Category::kLidSideways;
  throw std::invalid_argument("unknown category: " + name);
}

bool ArticulatedObject::operator==(const ArticulatedObject& other) const {
  return hinge.x() == other.hinge.x() && hinge.y() == other.hinge.y() &&
         lid_length == other.lid_length &&
         handle_frac == other.handle_frac && theta_max == other.theta_max &&
         category == other.category;
}

void ArticulatedObject::validate() const {
  constexpr double kPi = std::numbers::pi;
  if (lid_length < 0.3 || lid_length > 0.8) {
    throw std::invalid_argument("lid length " + std::to_string(lid_length) +
                                " outside [0.3, 0.8]");
  }
  if (handle_frac < 0.5 || handle_frac > 1.0) {
    throw std::invalid_argument("handle fraction outside [0.5, 1]");
  }
  if (theta_max < kPi / 3.0 || theta_max > 2.0 * kPi / 3.0) {
    throw std::invalid_argument("theta_max outside [pi/3, 2*pi/3]");
  }
  if (hinge.x() < 0.0 || hinge.x() > 0.5 || hinge.y() < 0.0 ||
      hinge.y() > 0.5) {
    throw std::invalid_argument("hinge outside [0, 0.5]^2");
  }
}

Vec2 lid_dir(const ArticulatedObject& object, double theta) {
  // lid_sideways is lid_up rotated a quarter turn counterclockwise.
  if (object.category == Category::kLidUp) {
    return {std::cos(theta), std::sin(theta)};
  }
  return {-std::sin(theta), std::cos(theta)};
}

Vec2 lid_tangent(const ArticulatedObject& object, double theta) {
  if (object.category == Category::kLidUp) {
    return {-std::sin(theta), std::cos(theta)};
  }
  return {-std::cos(theta), -std::sin(theta)};
}

Vec2 handle_position(const ArticulatedObject& object, double theta) {
  return object.hinge + object.handle_radius() * lid_dir(object, theta);
}

const std::vector<std::string>& propositions() {
  static const std::vector<std::string> props = {
      "lid_grasped", "lid_opened", "toilet_approached"};
  return props;
}

ltl::Label label(const EnvState& state, const ArticulatedObject& object,
                 const EnvParams& params) {
  ltl::Label out;
  const double dist =
      (state.eff - handle_position(object, state.theta)).norm();
  if (dist < params.d_approach) out.insert("toilet_approached");
  if (state.grasp) out.insert("lid_grasped");
  if (state.theta >= params.theta_goal(object)) out.insert("lid_opened");
  return out;
}

bool success(const EnvState& state, const ArticulatedObject& object,
             const EnvParams& params) {
  return state.theta >= params.theta_goal(object);
}

EnvState reset(const ArticulatedObject& object, Rng& rng) {
  object.validate();
  EnvState state;
  state.eff.x() = rng.uniform(-1.9, -1.7);
  state.eff.y() = rng.uniform(-1.9, -1.7);
  return state;
}

StepResult step(const EnvState& state, const Action& action,
                const ArticulatedObject& object, const EnvParams& params) {
  if (state.steps >= params.horizon) {
    throw std::logic_error("step on a terminal environment state");
  }
  const Vec2 delta = {clamp(action.delta.x(), -params.a_max, params.a_max),
                      clamp(action.delta.y(), -params.a_max, params.a_max)};
  const bool want_grasp = action.grasp_toggle > 0.0;

  StepResult result;
  result.state = state;
  result.state.steps = state.steps + 1;

  if (state.grasp && want_grasp) {
    // The hand holds the handle: motion along the arc tangent rotates the
    // lid by arc length / radius, and the hand rides the handle.
    const double along = delta.dot(lid_tangent(object, state.theta));
    const double target =
        clamp(state.theta + along / object.handle_radius(), 0.0,
              object.theta_max);
    result.articulation_raw = target - state.theta;
    result.state.theta = target;
    result.state.eff = handle_position(object, target);
    result.state.grasp = true;
  } else {
    result.state.eff = clamp_box(state.eff + delta, params.workspace);
    result.state.theta = state.theta;
    const Vec2 handle = handle_position(object, state.theta);
    result.state.grasp =
        want_grasp && (result.state.eff - handle).norm() < params.d_grasp;
    if (result.state.grasp) result.state.eff = handle;  // snap on engage
  }

  result.reach_raw =
      -(result.state.eff -
        handle_position(object, result.state.theta)).norm();
  result.label = label(result.state, object, params);
  result.terminal = result.state.steps >= params.horizon;
  return result;
}

double compose_reward(const StepResult& result, double mpr_value,
                      const EnvParams& params) {
  return params.w_reach * result.reach_raw +
         params.w_articulation * result.articulation_raw +
         params.w_mpr * mpr_value;
}

Eigen::Vector4d proprioception(const EnvState& state) {
  return {state.eff.x(), state.eff.y(), state.grasp ? 1.0 : 0.0,
          state.theta};
}

// ═══════════════════════════════════════════════════════════════════════════
// Object splits
// ═══════════════════════════════════════════════════════════════════════════

namespace {

ArticulatedObject draw_object(Rng& rng, double lid_lo, double lid_hi,
                              double hinge_lo, double hinge_hi,
                              Category category) {
  constexpr double kPi = std::numbers::pi;
  ArticulatedObject object;
  object.lid_length = rng.uniform(lid_lo, lid_hi);
  object.hinge.x() = rng.uniform(hinge_lo, hinge_hi);
  object.hinge.y() = rng.uniform(hinge_lo, hinge_hi);
  object.handle_frac = rng.uniform(0.5, 1.0);
  object.theta_max = rng.uniform(kPi / 3.0, 2.0 * kPi / 3.0);
  object.category = category;
  object.validate();
  return object;
}

nlohmann::json object_to_json(const ArticulatedObject& object) {
  return {{"hinge", {object.hinge.x(), object.hinge.y()}},
          {"lid_length", object.lid_length},
          {"handle_frac", object.handle_frac},
          {"theta_max", object.theta_max},
          {"category", to_string(object.category)}};
}

ArticulatedObject object_from_json(const nlohmann::json& j) {
  ArticulatedObject object;
  object.hinge.x() = j.at("hinge").at(0).get<double>();
  object.hinge.y() = j.at("hinge").at(1).get<double>();
  object.lid_length = j.at("lid_length").get<double>();
  object.handle_frac = j.at("handle_frac").get<double>();
  object.theta_max = j.at("theta_max").get<double>();
  object.category = category_from_string(j.at("category").get<std::string>());
  object.validate();
  return object;
}

}  // namespace

ObjectSplit make_splits(std::size_t n_seen, std::size_t n_unseen,
                        std::uint64_t seed) {
  if (n_seen == 0 || n_unseen == 0) {
    throw std::invalid_argument("splits need at least one object each");
  }
  // Disjoint sub-ranges guarantee no seen/unseen parameter collision: lid
  // length [0.3, 0.55) vs [0.55, 0.8), hinge [0, 0.25)^2 vs [0.25, 0.5)^2
  // (uniform draws exclude the upper bound).
  Rng rng(seed);
  ObjectSplit split;
  for (std::size_t i = 0; i < n_seen; ++i) {
    split.seen.push_back(
        draw_object(rng, 0.3, 0.55, 0.0, 0.25, Category::kLidUp));
  }
  for (std::size_t i = 0; i < n_unseen; ++i) {
    split.unseen.push_back(
        draw_object(rng, 0.55, 0.8, 0.25, 0.5, Category::kLidUp));
  }
  for (std::size_t i = 0; i < n_unseen; ++i) {
    split.transfer.push_back(
        draw_object(rng, 0.55, 0.8, 0.25, 0.5, Category::kLidSideways));
  }
  return split;
}

ArticulatedObject random_object(Rng& rng) {
  const Category category =
      rng.uniform() < 0.5 ? Category::kLidUp : Category::kLidSideways;
  return draw_object(rng, 0.3, 0.8, 0.0, 0.5, category);
}

void save_splits(const ObjectSplit& split, const std::string& path) {
  nlohmann::json j;
  for (const auto& [name, list] :
       {std::pair{"seen", &split.seen}, {"unseen", &split.unseen},
        {"transfer", &split.transfer}}) {
    nlohmann::json arr = nlohmann::json::array();
    for (const ArticulatedObject& object : *list) {
      arr.push_back(object_to_json(object));
    }
    j[name] = std::move(arr);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open splits file for writing: " + path);
  }
  out << j.dump(2) << "\n";
}

ObjectSplit load_splits(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open splits file: " + path);
  }
  nlohmann::json j;
  in >> j;
  ObjectSplit split;
  for (const auto& [name, list] :
       {std::pair{"seen", &split.seen}, {"unseen", &split.unseen},
        {"transfer", &split.transfer}}) {
    for (const nlohmann::json& item : j.at(name)) {
      list->push_back(object_from_json(item));
    }
  }
  return split;
}

// ═══════════════════════════════════════════════════════════════════════════
// Scripted controller
// ═══════════════════════════════════════════════════════════════════════════

Action scripted_policy_action(const EnvState& state,
                              const ArticulatedObject& object,
                              const EnvParams& params) {
  Action action;
  if (state.grasp) {
    action.delta = params.a_max * lid_tangent(object, state.theta);
    action.grasp_toggle = 1.0;
    return action;
  }
  const Vec2 handle = handle_position(object, state.theta);
  const Vec2 to_handle = handle - state.eff;
  action.delta = {clamp(to_handle.x(), -params.a_max, params.a_max),
                  clamp(to_handle.y(), -params.a_max, params.a_max)};
  const Vec2 after = clamp_box(state.eff + action.delta, params.workspace);
  action.grasp_toggle =
      (after - handle).norm() < params.d_grasp ? 1.0 : -1.0;
  return action;
}

}  // namespace taskdp::env
