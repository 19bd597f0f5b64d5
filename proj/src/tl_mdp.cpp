#include "taskdp/tl_mdp.hpp"

#include <cmath>

namespace taskdp::tl_mdp {

RewardOutcome augment_reward(const ltl::Formula& phi, const ltl::Label& label,
                             double env_reward, const RewardConfig& cfg) {
  if (!(cfg.task_bonus > 0.0)) {
    throw std::invalid_argument("task bonus must be positive");
  }
  if (phi.is_terminal()) {
    throw std::logic_error("augment_reward() on an already-resolved task formula");
  }
  if (!std::isfinite(env_reward)) {
    throw std::invalid_argument("environment reward must be finite");
  }
  RewardOutcome out;
  out.next_formula = ltl::progress(phi, label);
  out.reward = env_reward;
  if (out.next_formula.is_true()) {
    out.reward += cfg.task_bonus;
  } else if (out.next_formula.is_false()) {
    out.reward -= cfg.task_bonus;
  }
  return out;
}

StepOutcome apply(TaskState& state, const EnvStep& env_step, const RewardConfig& cfg) {
  if (state.terminal()) {
    throw std::logic_error("apply() called on a terminal task state");
  }
  RewardOutcome r = augment_reward(state.formula, env_step.label, env_step.env_reward, cfg);
  state.formula = r.next_formula;
  state.env_terminal = env_step.terminal;
  return {r.reward, state.terminal()};
}

}  // namespace taskdp::tl_mdp
