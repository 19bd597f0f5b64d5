#include "taskdp/config.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "taskdp/ltl.hpp"

namespace taskdp::cfg {

namespace {

using nlohmann::json;

// ───────────────────────────────────────────────────────────────────────────
// Strict readers
// ───────────────────────────────────────────────────────────────────────────

void expect_keys(const json& j, const std::string& group,
                 const std::set<std::string>& known) {
  if (!j.is_object()) {
    throw std::invalid_argument("config section '" + group +
                                "' is not an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) {
      throw std::invalid_argument("unknown config key '" + group + "." + key +
                                  "'");
    }
  }
}

template <typename T>
void read(const json& j, const std::string& group, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config key '" + group + "." + key +
                                "' has the wrong type: " + e.what());
  }
}

void read_vec2(const json& j, const std::string& group, const char* key,
               env::Vec2& out) {
  if (!j.contains(key)) return;
  std::vector<double> pair;
  read(j, group, key, pair);
  if (pair.size() != 2) {
    throw std::invalid_argument("config key '" + group + "." + key +
                                "' must hold exactly two numbers");
  }
  out = env::Vec2(pair[0], pair[1]);
}

// ───────────────────────────────────────────────────────────────────────────
// Section parsers
// ───────────────────────────────────────────────────────────────────────────

void parse_task(const json& j, TrainConfig& c) {
  expect_keys(j, "task", {"formula", "r_phi", "use_ltl"});
  read(j, "task", "formula", c.formula);
  read(j, "task", "r_phi", c.r_phi);
  read(j, "task", "use_ltl", c.use_ltl);
}

void parse_env(const json& j, TrainConfig& c) {
  expect_keys(j, "env",
              {"d_approach", "d_grasp", "a_max", "horizon", "w_reach",
               "w_articulation", "w_mpr", "theta_goal_frac", "workspace"});
  read(j, "env", "d_approach", c.env_params.d_approach);
  read(j, "env", "d_grasp", c.env_params.d_grasp);
  read(j, "env", "a_max", c.env_params.a_max);
  read(j, "env", "horizon", c.env_params.horizon);
  read(j, "env", "w_reach", c.env_params.w_reach);
  read(j, "env", "w_articulation", c.env_params.w_articulation);
  read(j, "env", "w_mpr", c.env_params.w_mpr);
  read(j, "env", "theta_goal_frac", c.env_params.theta_goal_frac);
  read(j, "env", "workspace", c.env_params.workspace);
}

void parse_split(const json& j, TrainConfig& c) {
  expect_keys(j, "split", {"n_seen", "n_unseen", "seed"});
  read(j, "split", "n_seen", c.n_seen);
  read(j, "split", "n_unseen", c.n_unseen);
  read(j, "split", "seed", c.split_seed);
}

void parse_scene(const json& j, perc::SceneConfig& s) {
  expect_keys(j, "perception.scene",
              {"functional_points", "rest_points", "hand_points", "arm_points",
               "handle_cluster", "jitter", "hand_radius", "mount",
               "scene_bound", "occlusion"});
  read(j, "perception.scene", "functional_points", s.functional_points);
  read(j, "perception.scene", "rest_points", s.rest_points);
  read(j, "perception.scene", "hand_points", s.hand_points);
  read(j, "perception.scene", "arm_points", s.arm_points);
  read(j, "perception.scene", "handle_cluster", s.handle_cluster);
  read(j, "perception.scene", "jitter", s.jitter);
  read(j, "perception.scene", "hand_radius", s.hand_radius);
  read_vec2(j, "perception.scene", "mount", s.mount);
  read(j, "perception.scene", "scene_bound", s.scene_bound);
  read(j, "perception.scene", "occlusion", s.occlusion);
}

void parse_perception(const json& j, TrainConfig& c) {
  expect_keys(j, "perception",
              {"feature_dim", "scene", "objects", "scenes_per_object",
               "epochs", "learning_rate", "checkpoint"});
  read(j, "perception", "feature_dim", c.seg_feature_dim);
  if (j.contains("scene")) parse_scene(j.at("scene"), c.scene);
  read(j, "perception", "objects", c.pretrain_objects);
  read(j, "perception", "scenes_per_object", c.pretrain_scenes_per_object);
  read(j, "perception", "epochs", c.pretrain_epochs);
  read(j, "perception", "learning_rate", c.pretrain_lr);
  read(j, "perception", "checkpoint", c.seg_checkpoint);
}

void parse_encoder(const json& j, TrainConfig& c) {
  expect_keys(j, "encoder",
              {"model_dim", "heads", "layers", "ff_dim", "max_tokens",
               "learning_rate"});
  read(j, "encoder", "model_dim", c.encoder.model_dim);
  read(j, "encoder", "heads", c.encoder.heads);
  read(j, "encoder", "layers", c.encoder.layers);
  read(j, "encoder", "ff_dim", c.encoder.ff_dim);
  read(j, "encoder", "max_tokens", c.encoder.max_tokens);
  read(j, "encoder", "learning_rate", c.encoder_lr);
}

void parse_planner(const json& j, TrainConfig& c) {
  expect_keys(j, "planner",
              {"use_affordance", "feature_dim", "local_radius", "top_k",
               "temperature", "gate", "refit_lr", "refit_steps", "window",
               "mpr_eps"});
  read(j, "planner", "use_affordance", c.use_affordance);
  read(j, "planner", "feature_dim", c.cp_feature_dim);
  read(j, "planner", "local_radius", c.cp_local_radius);
  read(j, "planner", "top_k", c.cp_top_k);
  read(j, "planner", "temperature", c.cp_temperature);
  read(j, "planner", "gate", c.cp_gate);
  read(j, "planner", "refit_lr", c.cp_refit_lr);
  read(j, "planner", "refit_steps", c.cp_refit_steps);
  read(j, "planner", "window", c.cp_window);
  read(j, "planner", "mpr_eps", c.mpr_eps);
}

void parse_policy(const json& j, TrainConfig& c) {
  expect_keys(j, "policy",
              {"diffusion_steps", "beta_min", "beta_max", "policy_hidden",
               "critic_hidden", "step_embed_dim", "gamma", "polyak",
               "improve_rate", "policy_lr", "critic_lr"});
  read(j, "policy", "diffusion_steps", c.diffusion_steps);
  read(j, "policy", "beta_min", c.beta_min);
  read(j, "policy", "beta_max", c.beta_max);
  read(j, "policy", "policy_hidden", c.policy_hidden);
  read(j, "policy", "critic_hidden", c.critic_hidden);
  read(j, "policy", "step_embed_dim", c.step_embed_dim);
  read(j, "policy", "gamma", c.gamma);
  read(j, "policy", "polyak", c.polyak);
  read(j, "policy", "improve_rate", c.improve_rate);
  read(j, "policy", "policy_lr", c.policy_lr);
  read(j, "policy", "critic_lr", c.critic_lr);
}

void parse_replay(const json& j, TrainConfig& c) {
  expect_keys(j, "replay", {"capacity", "batch_size", "warmup_steps"});
  read(j, "replay", "capacity", c.buffer_capacity);
  read(j, "replay", "batch_size", c.batch_size);
  read(j, "replay", "warmup_steps", c.warmup_steps);
}

void parse_run(const json& j, TrainConfig& c) {
  expect_keys(j, "run",
              {"total_env_steps", "eval_every", "eval_episodes", "seeds",
               "emit_svg"});
  read(j, "run", "total_env_steps", c.total_env_steps);
  read(j, "run", "eval_every", c.eval_every);
  read(j, "run", "eval_episodes", c.eval_episodes);
  read(j, "run", "seeds", c.seeds);
  read(j, "run", "emit_svg", c.emit_svg);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

}  // namespace

// ───────────────────────────────────────────────────────────────────────────
// Public surface
// ───────────────────────────────────────────────────────────────────────────

std::size_t TrainConfig::observation_dim() const {
  return seg_feature_dim + encoder.model_dim + (use_affordance ? 2 : 0) + 4;
}

void TrainConfig::validate() const {
  ltl::Formula phi;
  try {
    phi = ltl::parse(formula);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("task formula does not parse: ") +
                                e.what());
  }
  const std::vector<std::string>& known = env::propositions();
  for (const std::string& prop : ltl::propositions(phi)) {
    require(std::find(known.begin(), known.end(), prop) != known.end(),
            "task formula names unknown proposition '" + prop + "'");
  }
  require(r_phi > 0.0, "r_phi must be positive");

  require(env_params.d_approach > 0.0, "d_approach must be positive");
  require(env_params.d_grasp > 0.0, "d_grasp must be positive");
  require(env_params.a_max > 0.0, "a_max must be positive");
  require(env_params.horizon >= 1, "horizon must be at least 1");
  require(env_params.w_reach >= 0.0, "w_reach must be nonnegative");
  require(env_params.w_articulation >= 0.0,
          "w_articulation must be nonnegative");
  require(env_params.w_mpr >= 0.0, "w_mpr must be nonnegative");
  require(env_params.theta_goal_frac > 0.0 &&
              env_params.theta_goal_frac <= 1.0,
          "theta_goal_frac must lie in (0, 1]");
  require(env_params.workspace > 0.0, "workspace must be positive");

  require(n_seen >= 1, "n_seen must be at least 1");
  require(n_unseen >= 1, "n_unseen must be at least 1");

  require(seg_feature_dim >= 1, "perception feature_dim must be at least 1");
  scene.validate();
  require(pretrain_objects >= 1, "pretrain objects must be at least 1");
  require(pretrain_scenes_per_object >= 1,
          "pretrain scenes_per_object must be at least 1");
  require(pretrain_epochs >= 1, "pretrain epochs must be at least 1");
  require(pretrain_lr > 0.0, "pretrain learning_rate must be positive");

  encoder.validate();
  require(encoder_lr > 0.0, "encoder learning_rate must be positive");

  require(cp_feature_dim >= 1, "planner feature_dim must be at least 1");
  require(cp_local_radius > 0.0, "planner local_radius must be positive");
  require(cp_top_k >= 1, "planner top_k must be at least 1");
  require(cp_temperature > 0.0, "planner temperature must be positive");
  require(cp_gate >= 0.0 && cp_gate <= 1.0,
          "planner gate must lie in [0, 1]");
  require(cp_refit_lr > 0.0, "planner refit_lr must be positive");
  require(cp_refit_steps >= 1, "planner refit_steps must be at least 1");
  require(cp_window >= 1, "planner window must be at least 1");
  require(mpr_eps > 0.0, "planner mpr_eps must be positive");

  require(diffusion_steps >= 1, "diffusion_steps must be at least 1");
  require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0,
          "betas must satisfy 0 < beta_min <= beta_max < 1");
  require(policy_hidden >= 1, "policy_hidden must be at least 1");
  require(critic_hidden >= 1, "critic_hidden must be at least 1");
  require(step_embed_dim >= 2 && step_embed_dim % 2 == 0,
          "step_embed_dim must be even and at least 2");
  require(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
  require(polyak >= 0.0 && polyak < 1.0, "polyak must lie in [0, 1)");
  require(improve_rate >= 0.0, "improve_rate must be nonnegative");
  require(policy_lr > 0.0, "policy_lr must be positive");
  require(critic_lr > 0.0, "critic_lr must be positive");

  require(batch_size >= 1, "batch_size must be at least 1");
  require(buffer_capacity >= batch_size,
          "buffer capacity must be at least the batch size");

  require(eval_every >= 1, "eval_every must be at least 1");
  require(eval_episodes >= 1, "eval_episodes must be at least 1");
  require(!seeds.empty(), "seeds must not be empty");
}

std::string to_json_text(const TrainConfig& c) {
  json j;
  j["task"] = {{"formula", c.formula},
               {"r_phi", c.r_phi},
               {"use_ltl", c.use_ltl}};
  j["env"] = {{"d_approach", c.env_params.d_approach},
              {"d_grasp", c.env_params.d_grasp},
              {"a_max", c.env_params.a_max},
              {"horizon", c.env_params.horizon},
              {"w_reach", c.env_params.w_reach},
              {"w_articulation", c.env_params.w_articulation},
              {"w_mpr", c.env_params.w_mpr},
              {"theta_goal_frac", c.env_params.theta_goal_frac},
              {"workspace", c.env_params.workspace}};
  j["split"] = {{"n_seen", c.n_seen},
                {"n_unseen", c.n_unseen},
                {"seed", c.split_seed}};
  j["perception"] = {
      {"feature_dim", c.seg_feature_dim},
      {"scene",
       {{"functional_points", c.scene.functional_points},
        {"rest_points", c.scene.rest_points},
        {"hand_points", c.scene.hand_points},
        {"arm_points", c.scene.arm_points},
        {"handle_cluster", c.scene.handle_cluster},
        {"jitter", c.scene.jitter},
        {"hand_radius", c.scene.hand_radius},
        {"mount", {c.scene.mount.x(), c.scene.mount.y()}},
        {"scene_bound", c.scene.scene_bound},
        {"occlusion", c.scene.occlusion}}},
      {"objects", c.pretrain_objects},
      {"scenes_per_object", c.pretrain_scenes_per_object},
      {"epochs", c.pretrain_epochs},
      {"learning_rate", c.pretrain_lr},
      {"checkpoint", c.seg_checkpoint}};
  j["encoder"] = {{"model_dim", c.encoder.model_dim},
                  {"heads", c.encoder.heads},
                  {"layers", c.encoder.layers},
                  {"ff_dim", c.encoder.ff_dim},
                  {"max_tokens", c.encoder.max_tokens},
                  {"learning_rate", c.encoder_lr}};
  j["planner"] = {{"use_affordance", c.use_affordance},
                  {"feature_dim", c.cp_feature_dim},
                  {"local_radius", c.cp_local_radius},
                  {"top_k", c.cp_top_k},
                  {"temperature", c.cp_temperature},
                  {"gate", c.cp_gate},
                  {"refit_lr", c.cp_refit_lr},
                  {"refit_steps", c.cp_refit_steps},
                  {"window", c.cp_window},
                  {"mpr_eps", c.mpr_eps}};
  j["policy"] = {{"diffusion_steps", c.diffusion_steps},
                 {"beta_min", c.beta_min},
                 {"beta_max", c.beta_max},
                 {"policy_hidden", c.policy_hidden},
                 {"critic_hidden", c.critic_hidden},
                 {"step_embed_dim", c.step_embed_dim},
                 {"gamma", c.gamma},
                 {"polyak", c.polyak},
                 {"improve_rate", c.improve_rate},
                 {"policy_lr", c.policy_lr},
                 {"critic_lr", c.critic_lr}};
  j["replay"] = {{"capacity", c.buffer_capacity},
                 {"batch_size", c.batch_size},
                 {"warmup_steps", c.warmup_steps}};
  j["run"] = {{"total_env_steps", c.total_env_steps},
              {"eval_every", c.eval_every},
              {"eval_episodes", c.eval_episodes},
              {"seeds", c.seeds},
              {"emit_svg", c.emit_svg}};
  return j.dump(2);
}

TrainConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") +
                                e.what());
  }
  expect_keys(j, "<root>",
              {"task", "env", "split", "perception", "encoder", "planner",
               "policy", "replay", "run"});
  TrainConfig c;
  if (j.contains("task")) parse_task(j.at("task"), c);
  if (j.contains("env")) parse_env(j.at("env"), c);
  if (j.contains("split")) parse_split(j.at("split"), c);
  if (j.contains("perception")) parse_perception(j.at("perception"), c);
  if (j.contains("encoder")) parse_encoder(j.at("encoder"), c);
  if (j.contains("planner")) parse_planner(j.at("planner"), c);
  if (j.contains("policy")) parse_policy(j.at("policy"), c);
  if (j.contains("replay")) parse_replay(j.at("replay"), c);
  if (j.contains("run")) parse_run(j.at("run"), c);
  return c;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open config file: " + path);
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  TrainConfig config = config_from_json_text(buffer.str());
  config.validate();
  return config;
}

void save_config(const TrainConfig& config, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write config file: " + path);
  }
  out << to_json_text(config) << "\n";
  if (!out) {
    throw std::runtime_error("failed while writing config file: " + path);
  }
}

}  // namespace taskdp::cfg
