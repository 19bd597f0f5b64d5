#pragma once
// Run configuration: one JSON-backed struct drives perception pretraining,
// policy training, evaluation, and the ablation grid. Missing keys fall
// back to the defaults below; unknown keys are rejected so typos surface
// instead of silently reverting a field to its default.

#include <cstdint>
#include <string>
#include <vector>

#include "taskdp/perception.hpp"
#include "taskdp/task_encoder.hpp"
#include "taskdp/toy_env.hpp"

namespace taskdp::cfg {

struct TrainConfig {
  // task: the temporal goal and its resolution bonus.
  std::string formula = "F(toilet_approached & F(lid_grasped & F lid_opened))";
  double r_phi = 1.0;
  bool use_ltl = true;  // false zeroes the task embedding and drops r_phi

  // env: dynamics thresholds and dense reward weights.
  env::EnvParams env_params;

  // split: disjoint seen/unseen object draws plus the flipped-category set.
  std::size_t n_seen = 3;
  std::size_t n_unseen = 3;
  std::uint64_t split_seed = 97;

  // perception: scene synthesis and the frozen segmentation backbone.
  std::size_t seg_feature_dim = 64;
  perc::SceneConfig scene;
  int pretrain_objects = 64;
  int pretrain_scenes_per_object = 30;
  int pretrain_epochs = 24;
  double pretrain_lr = 1e-3;
  std::string seg_checkpoint;  // when set, loaded instead of pretraining

  // encoder: the task-embedding transformer, trained through the critic.
  enc::EncoderConfig encoder;
  double encoder_lr = 1e-3;

  // planner: affordance scoring, consensus contact point, and refits.
  bool use_affordance = true;  // false drops o_MP and the proximity reward
  std::size_t cp_feature_dim = 32;
  double cp_local_radius = 0.15;
  int cp_top_k = 8;
  double cp_temperature = 0.1;
  double cp_gate = 0.3;  // refit only above this pooled success rate
  double cp_refit_lr = 1e-3;
  int cp_refit_steps = 25;
  std::size_t cp_window = 20;
  double mpr_eps = 0.05;

  // policy: denoising schedule, network sizes, and update coefficients.
  std::size_t diffusion_steps = 10;
  double beta_min = 1e-4;
  double beta_max = 0.2;
  std::size_t policy_hidden = 64;
  std::size_t critic_hidden = 64;
  std::size_t step_embed_dim = 16;
  double gamma = 0.99;
  double polyak = 0.995;
  double improve_rate = 0.05;  // decays linearly to zero over the run
  double policy_lr = 1e-3;
  double critic_lr = 1e-3;

  // replay: buffer geometry and the tick cadence.
  std::size_t buffer_capacity = 100000;
  std::size_t batch_size = 256;
  std::size_t warmup_steps = 1000;

  // run: budget, evaluation cadence, and the seed grid.
  std::uint64_t total_env_steps = 60000;
  std::uint64_t eval_every = 10000;
  std::size_t eval_episodes = 12;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  bool emit_svg = false;

  // Flattened observation width under the current ablation flags:
  // vision + task embedding + (contact point) + proprioception.
  std::size_t observation_dim() const;

  // Throws std::invalid_argument on out-of-range fields or a task formula
  // that does not parse or names propositions the environment cannot emit.
  void validate() const;
};

// Canonical JSON round-trip: sorted keys, two-space indent, grouped
// sub-objects (task/env/split/perception/encoder/planner/policy/replay/run).
std::string to_json_text(const TrainConfig& config);
TrainConfig config_from_json_text(const std::string& text);

// File variants of the above. Loading validates; saving writes the
// canonical form with a trailing newline.
TrainConfig load_config(const std::string& path);
void save_config(const TrainConfig& config, const std::string& path);

}  // namespace taskdp::cfg
