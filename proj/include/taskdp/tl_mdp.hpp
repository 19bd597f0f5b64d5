#pragma once
// Product of a labeled environment with a temporal-logic task.
//
// The environment owns its own state and dynamics; this module tracks the
// task formula alongside it. After each environment transition the formula
// is progressed through the label of the state that was *reached*, and the
// environment reward is passed through unchanged unless that progression
// resolves the task: completing it adds a one-time bonus, falsifying it
// subtracts the same amount. An episode of the product ends when either the
// environment terminates (e.g. step horizon) or the formula has resolved to
// the True/False literal.

#include <stdexcept>

#include "taskdp/ltl.hpp"

namespace taskdp::tl_mdp {

struct RewardConfig {
  double task_bonus = 1.0;  // must be positive
};

// One already-executed environment transition, as seen by the product.
struct EnvStep {
  double env_reward = 0.0;
  ltl::Label label;      // label of the state reached by this step
  bool terminal = false; // environment-side termination (horizon etc.)
};

struct TaskState {
  ltl::Formula formula;
  bool env_terminal = false;

  bool terminal() const { return env_terminal || formula.is_terminal(); }
};

struct RewardOutcome {
  double reward = 0.0;
  ltl::Formula next_formula;
};

// Progresses `phi` through `label` and composes the step reward:
//   env_reward + task_bonus   if the progression resolves to True
//   env_reward - task_bonus   if it resolves to False
//   env_reward                otherwise.
// The bonus can fire at most once per episode because True and False are
// absorbing and the episode ends on them. Throws std::logic_error when phi
// is already resolved and std::invalid_argument when the bonus is not
// positive. Pure: depends only on the arguments, never on history.
RewardOutcome augment_reward(const ltl::Formula& phi, const ltl::Label& label,
                             double env_reward, const RewardConfig& cfg);

struct StepOutcome {
  double reward = 0.0;
  bool done = false;
};

// Applies an environment transition to the task state.
StepOutcome apply(TaskState& state, const EnvStep& env_step, const RewardConfig& cfg);

// Convenience wrapper for environments exposing `EnvStep step(action)`:
// advances the environment, then the task state. Mutates only the given
// environment and task state.
template <typename Env, typename Action>
StepOutcome step(TaskState& state, const Action& action, Env& env,
                 const RewardConfig& cfg) {
  if (state.terminal()) {
    throw std::logic_error("step() called on a terminal task state");
  }
  const EnvStep env_step = env.step(action);
  return apply(state, env_step, cfg);
}

}  // namespace taskdp::tl_mdp
