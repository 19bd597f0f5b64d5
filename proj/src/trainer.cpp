#include "taskdp/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <utility>

#include "taskdp/ltl.hpp"
#include "taskdp/tl_mdp.hpp"

namespace taskdp::train {

namespace fs = std::filesystem;

// ═══════════════════════════════════════════════════════════════════════════
// Replay ring
// ═══════════════════════════════════════════════════════════════════════════

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) {
    throw std::invalid_argument("replay capacity must be positive");
  }
  data_.reserve(std::min<std::size_t>(capacity, 4096));
}

void ReplayBuffer::push(StoredTransition transition) {
  if (data_.size() < capacity_) {
    data_.push_back(std::move(transition));
  } else {
    data_[next_] = std::move(transition);
  }
  next_ = (next_ + 1) % capacity_;
}

const StoredTransition& ReplayBuffer::at(std::size_t index) const {
  return data_.at(index);
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t count,
                                                      Rng& rng) const {
  if (data_.empty()) {
    throw std::logic_error("cannot sample from an empty replay buffer");
  }
  std::vector<std::size_t> out(count);
  for (std::size_t& i : out) {
    i = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(data_.size()) - 1));
  }
  return out;
}

// ═══════════════════════════════════════════════════════════════════════════
// Observation assembly
// ═══════════════════════════════════════════════════════════════════════════

namespace {

nn::Vec flatten_obs(const nn::Vec& vision, const nn::Vec& task,
                    const env::Vec2& contact, const Eigen::Vector4d& prop,
                    bool use_affordance) {
  const Eigen::Index extra = use_affordance ? 2 : 0;
  nn::Vec out(vision.size() + task.size() + extra + 4);
  out.head(vision.size()) = vision;
  out.segment(vision.size(), task.size()) = task;
  if (use_affordance) {
    out.segment(vision.size() + task.size(), 2) = contact;
  }
  out.tail(4) = prop;
  return out;
}

// Rows the segmentation calls part of the object (functional or rest); the
// planner should never be steered by hand or arm points. Falls back to the
// whole cloud if the net labels nothing as object.
nn::Mat predicted_object_cloud(const nn::Mat& points,
                               const perc::SegNet& net) {
  const nn::Mat logits = net.per_point_logits(points);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index cls = 0;
    logits.row(r).maxCoeff(&cls);
    if (cls == perc::kFunctionalPart || cls == perc::kObjectRest) {
      keep.push_back(r);
    }
  }
  if (keep.empty()) return points;
  nn::Mat cloud(static_cast<Eigen::Index>(keep.size()), 2);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    cloud.row(static_cast<Eigen::Index>(i)) = points.row(keep[i]);
  }
  return cloud;
}

env::Action to_env_action(const nn::Vec& a, double a_max) {
  return {env::Vec2(a(0) * a_max, a(1) * a_max), a(2)};
}

// Formula -> dense id plus the token sequences the encoder consumes. Ids are
// assigned in first-appearance order, which is deterministic for a fixed
// seed, so replayed transitions stay valid across the whole run.
class FormulaTable {
 public:
  FormulaTable(const enc::TokenVocab& vocab, std::size_t max_tokens)
      : vocab_(&vocab), max_tokens_(max_tokens) {}

  int id_of(const ltl::Formula& f) {
    const auto it = ids_.find(f);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    ids_.emplace(f, id);
    tokens_.push_back(enc::tokenize(f, *vocab_, max_tokens_));
    return id;
  }

  const std::vector<int>& tokens(int id) const {
    return tokens_.at(static_cast<std::size_t>(id));
  }

 private:
  const enc::TokenVocab* vocab_;
  std::size_t max_tokens_;
  std::unordered_map<ltl::Formula, int, ltl::FormulaHash> ids_;
  std::vector<std::vector<int>> tokens_;
};

std::string join_path(const std::string& dir, const char* name) {
  return (fs::path(dir) / name).string();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ═══════════════════════════════════════════════════════════════════════════
// Policy bundle
// ═══════════════════════════════════════════════════════════════════════════

PolicyBundle PolicyBundle::make(const cfg::TrainConfig& config) {
  config.validate();
  enc::TokenVocab vocab = enc::TokenVocab::build(env::propositions());
  const std::size_t obs_dim = config.observation_dim();
  return PolicyBundle{
      .config = config,
      .seed = 0,
      .segnet = perc::SegNet(config.seg_feature_dim),
      .vocab = vocab,
      .encoder = enc::TaskEncoder(config.encoder, vocab.size()),
      .planner = cp::CPNet(config.cp_feature_dim, config.cp_local_radius),
      .policy = diff::NoiseEstimator(kActionDim, obs_dim,
                                     config.diffusion_steps,
                                     config.policy_hidden,
                                     config.step_embed_dim),
      .critic = diff::Critic(obs_dim, kActionDim, config.critic_hidden),
      .schedule = diff::make_schedule(config.diffusion_steps, config.beta_min,
                                      config.beta_max),
  };
}

PolicyBundle PolicyBundle::make_random(const cfg::TrainConfig& config,
                                       Rng& rng) {
  config.validate();
  enc::TokenVocab vocab = enc::TokenVocab::build(env::propositions());
  const std::size_t obs_dim = config.observation_dim();
  Rng seg_rng = rng.fork(0);
  Rng enc_rng = rng.fork(1);
  Rng cp_rng = rng.fork(2);
  Rng pol_rng = rng.fork(3);
  Rng cri_rng = rng.fork(4);
  return PolicyBundle{
      .config = config,
      .seed = 0,
      .segnet = perc::SegNet::xavier(config.seg_feature_dim, seg_rng),
      .vocab = vocab,
      .encoder = enc::TaskEncoder::xavier(config.encoder, vocab.size(),
                                          enc_rng),
      .planner = cp::CPNet::xavier(config.cp_feature_dim,
                                   config.cp_local_radius, cp_rng),
      .policy = diff::NoiseEstimator::xavier(kActionDim, obs_dim,
                                             config.diffusion_steps,
                                             config.policy_hidden,
                                             config.step_embed_dim, pol_rng),
      .critic = diff::Critic::xavier(obs_dim, kActionDim,
                                     config.critic_hidden, cri_rng),
      .schedule = diff::make_schedule(config.diffusion_steps, config.beta_min,
                                      config.beta_max),
  };
}

namespace {

void write_manifest(const PolicyBundle& bundle, const std::string& run_dir) {
  nlohmann::json j;
  j["config"] = nlohmann::json::parse(cfg::to_json_text(bundle.config));
  j["seed"] = bundle.seed;
  j["version"] = kVersion;
  const std::string path = join_path(run_dir, "manifest.json");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("failed while writing " + path);
}

nn::Checkpoint load_kind(const std::string& path, const char* kind) {
  nn::Checkpoint ckpt = nn::load_checkpoint(path);
  if (ckpt.kind != kind) {
    throw std::runtime_error("checkpoint " + path + " holds kind '" +
                             ckpt.kind + "', expected '" + kind + "'");
  }
  return ckpt;
}

}  // namespace

void save_bundle(const PolicyBundle& bundle, const std::string& run_dir) {
  fs::create_directories(run_dir);
  write_manifest(bundle, run_dir);
  bundle.vocab.save_json(join_path(run_dir, "vocab.json"));
  nn::save_checkpoint(join_path(run_dir, "seg.ckpt"), "segnet",
                      bundle.segnet.to_tensors("segnet"));
  nn::save_checkpoint(join_path(run_dir, "encoder.ckpt"), "encoder",
                      bundle.encoder.to_tensors("encoder"));
  nn::save_checkpoint(join_path(run_dir, "cp.ckpt"), "cp",
                      bundle.planner.to_tensors("cp"));
  nn::save_checkpoint(join_path(run_dir, "policy.ckpt"), "policy",
                      bundle.policy.to_tensors("policy"));
  nn::save_checkpoint(join_path(run_dir, "critic.ckpt"), "critic",
                      bundle.critic.to_tensors("critic"));
}

PolicyBundle load_bundle(const std::string& run_dir) {
  const std::string manifest_path = join_path(run_dir, "manifest.json");
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest " + manifest_path +
                             " is not valid JSON: " + e.what());
  }
  cfg::TrainConfig config;
  std::uint64_t seed = 0;
  try {
    config = cfg::config_from_json_text(j.at("config").dump());
    seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest " + manifest_path +
                             " is missing fields: " + e.what());
  }
  config.validate();

  PolicyBundle bundle = PolicyBundle::make(config);
  bundle.seed = seed;
  bundle.vocab = enc::TokenVocab::load_json(join_path(run_dir, "vocab.json"));
  bundle.segnet.load_tensors(load_kind(join_path(run_dir, "seg.ckpt"),
                                       "segnet"),
                             "segnet");
  bundle.encoder.load_tensors(load_kind(join_path(run_dir, "encoder.ckpt"),
                                        "encoder"),
                              "encoder");
  bundle.planner.load_tensors(load_kind(join_path(run_dir, "cp.ckpt"), "cp"),
                              "cp");
  bundle.policy.load_tensors(load_kind(join_path(run_dir, "policy.ckpt"),
                                       "policy"),
                             "policy");
  bundle.critic.load_tensors(load_kind(join_path(run_dir, "critic.ckpt"),
                                       "critic"),
                             "critic");
  return bundle;
}

// ═══════════════════════════════════════════════════════════════════════════
// Evaluation
// ═══════════════════════════════════════════════════════════════════════════

namespace {

struct EvalAccumulator {
  std::size_t episodes = 0;
  std::size_t successes = 0;
  std::size_t success_steps = 0;
  double reach_sum = 0.0;
  double artic_sum = 0.0;
  double mpr_sum = 0.0;
  std::size_t env_steps = 0;

  EvalResult result(int horizon) const {
    EvalResult r;
    const double n = static_cast<double>(episodes);
    r.success_rate = static_cast<double>(successes) / n;
    r.avg_success_steps =
        successes > 0 ? static_cast<double>(success_steps) /
                            static_cast<double>(successes)
                      : static_cast<double>(horizon);
    const double steps = std::max<double>(1.0,
                                          static_cast<double>(env_steps));
    r.reach_mean = reach_sum / steps;
    r.articulation_mean = artic_sum / steps;
    r.mpr_mean = mpr_sum / steps;
    return r;
  }
};

}  // namespace

EvalResult evaluate_bundle(const PolicyBundle& bundle,
                           const std::vector<env::ArticulatedObject>& objects,
                           std::size_t episodes, Rng& rng) {
  if (episodes == 0) {
    throw std::invalid_argument("evaluation needs at least one episode");
  }
  if (objects.empty()) {
    throw std::invalid_argument("evaluation needs at least one object");
  }
  const cfg::TrainConfig& c = bundle.config;
  const ltl::Formula phi0 = ltl::parse(c.formula);
  const nn::Vec zero_task =
      nn::Vec::Zero(static_cast<Eigen::Index>(c.encoder.model_dim));
  Rng rng_env = rng.fork(0);
  Rng rng_scene = rng.fork(1);
  Rng rng_policy = rng.fork(2);

  EvalAccumulator acc;
  for (std::size_t e = 0; e < episodes; ++e) {
    const env::ArticulatedObject& object = objects[e % objects.size()];
    env::EnvState state = env::reset(object, rng_env);
    tl_mdp::TaskState task{phi0, false};

    perc::LabeledPointCloud scene =
        perc::observe_scene(object, state, c.scene, rng_scene);
    nn::Vec vision = bundle.segnet.global_feature(scene.points);
    env::Vec2 contact = env::Vec2::Zero();
    if (c.use_affordance) {
      const nn::Mat cloud = predicted_object_cloud(scene.points,
                                                   bundle.segnet);
      contact = cp::select_mpo(cp::score_points(cloud, bundle.planner), cloud,
                               c.cp_top_k);
    }

    while (!task.terminal()) {
      const nn::Vec phi =
          c.use_ltl
              ? bundle.encoder.encode(enc::tokenize(task.formula,
                                                    bundle.vocab,
                                                    c.encoder.max_tokens))
              : zero_task;
      const nn::Vec obs = flatten_obs(vision, phi, contact,
                                      env::proprioception(state),
                                      c.use_affordance);
      const nn::Vec a = diff::sample_action(obs, bundle.schedule,
                                            bundle.policy, /*deploy=*/true,
                                            rng_policy);
      const env::StepResult result =
          env::step(state, to_env_action(a, c.env_params.a_max), object,
                    c.env_params);
      acc.reach_sum += result.reach_raw;
      acc.artic_sum += result.articulation_raw;
      if (c.use_affordance) {
        acc.mpr_sum += cp::mpr_reward(contact, result.state.eff, c.mpr_eps);
      }
      ++acc.env_steps;
      tl_mdp::apply(task, {0.0, result.label, result.terminal}, {c.r_phi});
      state = result.state;
      if (!task.terminal()) {
        scene = perc::observe_scene(object, state, c.scene, rng_scene);
        vision = bundle.segnet.global_feature(scene.points);
      }
    }
    ++acc.episodes;
    if (task.formula.is_true()) {
      ++acc.successes;
      acc.success_steps += static_cast<std::size_t>(state.steps);
    }
  }
  return acc.result(c.env_params.horizon);
}

EvalResult evaluate_scripted(const std::vector<env::ArticulatedObject>&
                                 objects,
                             const cfg::TrainConfig& config,
                             std::size_t episodes, Rng& rng) {
  if (episodes == 0) {
    throw std::invalid_argument("evaluation needs at least one episode");
  }
  if (objects.empty()) {
    throw std::invalid_argument("evaluation needs at least one object");
  }
  const ltl::Formula phi0 = ltl::parse(config.formula);
  Rng rng_env = rng.fork(0);

  EvalAccumulator acc;
  for (std::size_t e = 0; e < episodes; ++e) {
    const env::ArticulatedObject& object = objects[e % objects.size()];
    env::EnvState state = env::reset(object, rng_env);
    tl_mdp::TaskState task{phi0, false};
    while (!task.terminal()) {
      const env::Action action =
          env::scripted_policy_action(state, object, config.env_params);
      const env::StepResult result =
          env::step(state, action, object, config.env_params);
      acc.reach_sum += result.reach_raw;
      acc.artic_sum += result.articulation_raw;
      ++acc.env_steps;
      tl_mdp::apply(task, {0.0, result.label, result.terminal},
                    {config.r_phi});
      state = result.state;
    }
    ++acc.episodes;
    if (task.formula.is_true()) {
      ++acc.successes;
      acc.success_steps += static_cast<std::size_t>(state.steps);
    }
  }
  return acc.result(config.env_params.horizon);
}

EvalResult evaluate_run(const std::string& run_dir, const std::string& split,
                        std::size_t episodes) {
  if (episodes == 0) {
    throw std::invalid_argument("evaluation needs at least one episode");
  }
  const PolicyBundle bundle = load_bundle(run_dir);
  const env::ObjectSplit objects =
      env::make_splits(bundle.config.n_seen, bundle.config.n_unseen,
                       bundle.config.split_seed);
  const std::vector<env::ArticulatedObject>* chosen = nullptr;
  std::uint64_t stream = 0;
  if (split == "seen") {
    chosen = &objects.seen;
    stream = 0;
  } else if (split == "unseen") {
    chosen = &objects.unseen;
    stream = 1;
  } else if (split == "transfer") {
    chosen = &objects.transfer;
    stream = 2;
  } else {
    throw std::invalid_argument("unknown split '" + split +
                                "' (want seen, unseen, or transfer)");
  }
  Rng rng = Rng(bundle.seed).fork(2000 + stream);
  return evaluate_bundle(bundle, *chosen, episodes, rng);
}

// ═══════════════════════════════════════════════════════════════════════════
// Segmentation pretraining
// ═══════════════════════════════════════════════════════════════════════════

namespace {

perc::PretrainReport pretrain_into(perc::SegNet& net,
                                   const cfg::TrainConfig& config,
                                   Rng& master) {
  Rng rng_objects = master.fork(0);
  std::vector<env::ArticulatedObject> objects;
  objects.reserve(static_cast<std::size_t>(config.pretrain_objects));
  for (int i = 0; i < config.pretrain_objects; ++i) {
    objects.push_back(env::random_object(rng_objects));
  }
  Rng rng_data = master.fork(1);
  const std::vector<perc::LabeledPointCloud> dataset = perc::generate_dataset(
      objects, config.pretrain_scenes_per_object, config.scene, rng_data);
  Rng rng_net = master.fork(2);
  net = perc::SegNet::xavier(config.seg_feature_dim, rng_net);
  Rng rng_shuffle = master.fork(3);
  return perc::pretrain_segmentation(net, dataset, config.pretrain_epochs,
                                     config.pretrain_lr, rng_shuffle);
}

}  // namespace

perc::PretrainReport run_seg_pretraining(const cfg::TrainConfig& config,
                                         std::uint64_t seed,
                                         const std::string& checkpoint_path) {
  config.validate();
  perc::SegNet net(config.seg_feature_dim);
  Rng master(seed);
  const perc::PretrainReport report = pretrain_into(net, config, master);
  nn::save_checkpoint(checkpoint_path, "segnet", net.to_tensors("segnet"));
  return report;
}

// ═══════════════════════════════════════════════════════════════════════════
// Training
// ═══════════════════════════════════════════════════════════════════════════

namespace {

// Holds all mutable run state so episode and tick logic can share it
// without threading a dozen arguments through every call.
struct Trainer {
  cfg::TrainConfig c;
  std::string run_dir;
  PolicyBundle& b;
  FormulaTable table;
  ReplayBuffer buffer;
  nn::Adam opt_policy;
  nn::Adam opt_critic;
  nn::Adam opt_encoder;
  cp::ContactLog contacts;
  env::ObjectSplit split;
  ltl::Formula phi0;
  nn::Vec zero_task;
  Rng master;
  Rng rng_env;
  Rng rng_scene;
  Rng rng_policy;
  Rng rng_train;

  std::uint64_t steps = 0;
  int episode = 0;
  int evals = 0;
  double est_loss_sum = 0.0;
  double critic_loss_sum = 0.0;
  std::size_t ticks = 0;
  double last_cp_loss = 0.0;
  metrics::History history;

  Trainer(const cfg::TrainConfig& config, std::uint64_t seed,
          std::string dir, PolicyBundle& bundle)
      : c(config),
        run_dir(std::move(dir)),
        b(bundle),
        table(bundle.vocab, config.encoder.max_tokens),
        buffer(config.buffer_capacity),
        opt_policy(config.policy_lr),
        opt_critic(config.critic_lr),
        opt_encoder(config.encoder_lr),
        contacts(config.cp_window),
        split(env::make_splits(config.n_seen, config.n_unseen,
                               config.split_seed)),
        phi0(ltl::parse(config.formula)),
        zero_task(nn::Vec::Zero(
            static_cast<Eigen::Index>(config.encoder.model_dim))),
        master(seed),
        rng_env(master.fork(1)),
        rng_scene(master.fork(2)),
        rng_policy(master.fork(3)),
        rng_train(master.fork(4)) {}

  // Exploration strength of the improvement step, annealed to zero so late
  // training trusts the sampler it just taught.
  double improve_beta() const {
    const double frac = static_cast<double>(steps) /
                        static_cast<double>(c.total_env_steps);
    return c.improve_rate * (1.0 - frac);
  }

  void tick() {
    const std::vector<std::size_t> idx =
        buffer.sample_indices(c.batch_size, rng_train);
    const Eigen::Index rows = static_cast<Eigen::Index>(idx.size());
    const Eigen::Index od = static_cast<Eigen::Index>(c.observation_dim());
    nn::Mat obs(rows, od);
    nn::Mat next_obs(rows, od);
    nn::Mat actions(rows, static_cast<Eigen::Index>(kActionDim));
    nn::Vec rewards(rows);
    std::vector<char> done(idx.size());
    for (Eigen::Index r = 0; r < rows; ++r) {
      const StoredTransition& t = buffer.at(idx[static_cast<std::size_t>(r)]);
      obs.row(r) = t.obs.transpose();
      next_obs.row(r) = t.next_obs.transpose();
      actions.row(r) = t.action.transpose();
      rewards(r) = t.reward;
      done[static_cast<std::size_t>(r)] = t.done ? 1 : 0;
    }

    const Eigen::Index vd = static_cast<Eigen::Index>(c.seg_feature_dim);
    const Eigen::Index td = static_cast<Eigen::Index>(c.encoder.model_dim);
    if (c.use_ltl) {
      // Re-embed every formula in the batch with the current encoder; the
      // stored task slices are stale the moment the encoder steps.
      std::map<int, nn::Vec> embeddings;
      const auto embed = [&](int fid) -> const nn::Vec& {
        const auto [it, inserted] = embeddings.try_emplace(fid);
        if (inserted) it->second = b.encoder.encode(table.tokens(fid));
        return it->second;
      };
      for (Eigen::Index r = 0; r < rows; ++r) {
        const StoredTransition& t =
            buffer.at(idx[static_cast<std::size_t>(r)]);
        obs.row(r).segment(vd, td) = embed(t.formula_id).transpose();
        next_obs.row(r).segment(vd, td) =
            embed(t.next_formula_id).transpose();
      }
    }

    // Bootstrap targets from the deploy-mode sampler and the target critic.
    const nn::Mat next_actions = diff::sample_actions(
        next_obs, b.schedule, b.policy, /*deploy=*/true, rng_train);
    const nn::Vec next_q = b.critic.target_values(next_obs, next_actions);
    nn::Vec targets(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      targets(r) = rewards(r) +
                   (done[static_cast<std::size_t>(r)]
                        ? 0.0
                        : c.gamma * next_q(r));
    }

    const diff::CorruptedBatch corrupted =
        diff::corrupt_actions(actions, obs, b.schedule, rng_train);
    b.policy.zero_grad();
    est_loss_sum += diff::estimator_loss_backward(b.policy, corrupted);
    const std::vector<nn::ParamBlock> policy_blocks = b.policy.param_blocks();
    opt_policy.step(policy_blocks);

    b.critic.zero_grad();
    nn::Mat grad_obs;
    critic_loss_sum += diff::critic_loss_backward(
        b.critic, obs, actions, targets, c.use_ltl ? &grad_obs : nullptr);
    const std::vector<nn::ParamBlock> critic_blocks = b.critic.param_blocks();
    opt_critic.step(critic_blocks);
    b.critic.blend_target(c.polyak);

    if (c.use_ltl) {
      // Route the critic's observation gradient through the task slice back
      // into the encoder, one backward per distinct formula.
      std::map<int, nn::Vec> grads;
      for (Eigen::Index r = 0; r < rows; ++r) {
        const StoredTransition& t =
            buffer.at(idx[static_cast<std::size_t>(r)]);
        const auto [it, inserted] = grads.try_emplace(
            t.formula_id, nn::Vec::Zero(td));
        it->second += grad_obs.row(r).segment(vd, td).transpose();
      }
      b.encoder.zero_grad();
      for (const auto& [fid, grad] : grads) {
        b.encoder.forward(table.tokens(fid));
        b.encoder.backward(grad);
      }
      const std::vector<nn::ParamBlock> enc_blocks = b.encoder.param_blocks();
      opt_encoder.step(enc_blocks);
    }
    ++ticks;
  }

  void maybe_eval() {
    const bool final_step = steps == c.total_env_steps;
    if (!(steps % c.eval_every == 0 || final_step)) return;
    const double est_mean =
        ticks > 0 ? est_loss_sum / static_cast<double>(ticks) : 0.0;
    const double critic_mean =
        ticks > 0 ? critic_loss_sum / static_cast<double>(ticks) : 0.0;

    const auto record = [&](const char* name,
                            const std::vector<env::ArticulatedObject>& objs,
                            std::uint64_t stream) {
      Rng rng = master.fork(1000 + 8 * static_cast<std::uint64_t>(evals) +
                            stream);
      const EvalResult r = evaluate_bundle(b, objs, c.eval_episodes, rng);
      history.points.push_back({steps, name, r.success_rate,
                                r.avg_success_steps, est_mean, critic_mean,
                                last_cp_loss, r.reach_mean,
                                r.articulation_mean, r.mpr_mean});
    };
    record("seen", split.seen, 0);
    record("unseen", split.unseen, 1);
    if (final_step) record("transfer", split.transfer, 2);

    est_loss_sum = 0.0;
    critic_loss_sum = 0.0;
    ticks = 0;
    ++evals;
  }

  void train_episode() {
    const int object_index =
        episode % static_cast<int>(split.seen.size());
    const env::ArticulatedObject& object =
        split.seen[static_cast<std::size_t>(object_index)];
    env::EnvState state = env::reset(object, rng_env);
    tl_mdp::TaskState task{phi0, false};

    perc::LabeledPointCloud scene =
        perc::observe_scene(object, state, c.scene, rng_scene);
    nn::Vec vision = b.segnet.global_feature(scene.points);
    env::Vec2 contact = env::Vec2::Zero();
    nn::Mat cloud;
    if (c.use_affordance) {
      cloud = predicted_object_cloud(scene.points, b.segnet);
      contact = cp::select_mpo(cp::score_points(cloud, b.planner), cloud,
                               c.cp_top_k);
    }

    std::vector<env::Vec2> eff_path;
    std::vector<std::uint8_t> grasp_path;

    while (!task.terminal() && steps < c.total_env_steps) {
      const int fid = table.id_of(task.formula);
      const nn::Vec phi =
          c.use_ltl ? b.encoder.encode(table.tokens(fid)) : zero_task;
      const nn::Vec obs = flatten_obs(vision, phi, contact,
                                      env::proprioception(state),
                                      c.use_affordance);
      nn::Vec action = diff::sample_action(obs, b.schedule, b.policy,
                                           /*deploy=*/false, rng_policy);
      const double beta = improve_beta();
      if (beta > 0.0) {
        action = diff::improve_action(action, obs, b.critic, beta);
      }

      const env::StepResult result =
          env::step(state, to_env_action(action, c.env_params.a_max), object,
                    c.env_params);
      const double mpr =
          c.use_affordance
              ? cp::mpr_reward(contact, result.state.eff, c.mpr_eps)
              : 0.0;
      const double env_reward = env::compose_reward(result, mpr,
                                                    c.env_params);
      const tl_mdp::StepOutcome outcome = tl_mdp::apply(
          task, {env_reward, result.label, result.terminal}, {c.r_phi});
      const int next_fid = table.id_of(task.formula);

      state = result.state;
      scene = perc::observe_scene(object, state, c.scene, rng_scene);
      const nn::Vec next_vision = b.segnet.global_feature(scene.points);
      // The task slice of next_obs is left zero: every tick re-embeds it
      // from next_formula_id before the batch is consumed.
      const nn::Vec next_obs = flatten_obs(next_vision, zero_task, contact,
                                           env::proprioception(state),
                                           c.use_affordance);
      buffer.push({obs, action, c.use_ltl ? outcome.reward : env_reward,
                   next_obs, outcome.done, fid, next_fid});
      vision = next_vision;
      eff_path.push_back(state.eff);
      grasp_path.push_back(state.grasp ? 1 : 0);

      ++steps;
      if (steps > c.warmup_steps && buffer.size() >= c.batch_size) {
        tick();
      }
      maybe_eval();
    }

    if (task.terminal() && c.use_affordance) {
      const bool success = task.formula.is_true();
      contacts.add_episode(object_index, eff_path, grasp_path, success,
                           episode, cloud);
      if (contacts.global_success_rate() > c.cp_gate) {
        const cp::PlannerUpdateReport report = cp::update_planner(
            b.planner, contacts.records(), c.cp_refit_lr, c.cp_refit_steps,
            c.cp_top_k, c.cp_temperature);
        if (report.stepped) last_cp_loss = report.final_loss;
      }
    }
    ++episode;
  }
};

}  // namespace

RunResult run_training(const cfg::TrainConfig& config, std::uint64_t seed,
                       const std::string& run_dir) {
  config.validate();
  fs::create_directories(run_dir);

  Rng master(seed);
  Rng init_rng = master.fork(0);
  PolicyBundle bundle = PolicyBundle::make_random(config, init_rng);
  bundle.seed = seed;

  if (!config.seg_checkpoint.empty()) {
    bundle.segnet.load_tensors(load_kind(config.seg_checkpoint, "segnet"),
                               "segnet");
  } else {
    Rng seg_rng = master.fork(5);
    pretrain_into(bundle.segnet, config, seg_rng);
  }
  const std::uint64_t seg_checksum = bundle.segnet.weight_checksum();

  save_bundle(bundle, run_dir);

  Trainer trainer(config, seed, run_dir, bundle);
  try {
    while (trainer.steps < config.total_env_steps) {
      trainer.train_episode();
    }
  } catch (const std::exception& e) {
    std::ofstream dump(join_path(run_dir, "divergence.txt"));
    dump << "training aborted at env step " << trainer.steps << ", episode "
         << trainer.episode << "\n"
         << e.what() << "\n"
         << "ticks since last eval: " << trainer.ticks
         << ", estimator loss sum: " << fmt(trainer.est_loss_sum)
         << ", critic loss sum: " << fmt(trainer.critic_loss_sum) << "\n";
    throw;
  }

  if (bundle.segnet.weight_checksum() != seg_checksum) {
    throw std::logic_error(
        "segmentation weights changed during training; they are frozen");
  }

  save_bundle(bundle, run_dir);
  if (!trainer.history.points.empty()) {
    metrics::export_metrics(
        trainer.history, join_path(run_dir, "metrics.csv"),
        join_path(run_dir, "summary.json"),
        config.emit_svg ? join_path(run_dir, "metrics.svg") : "");
  }
  if (config.use_affordance && trainer.contacts.episodes_logged() > 0) {
    trainer.contacts.export_csv(join_path(run_dir, "contacts.csv"));
  }
  return {std::move(trainer.history), trainer.steps,
          static_cast<std::size_t>(trainer.episode)};
}

// ═══════════════════════════════════════════════════════════════════════════
// Ablation grid
// ═══════════════════════════════════════════════════════════════════════════

double median(std::vector<double> values) {
  if (values.empty()) {
    throw std::invalid_argument("median of an empty set");
  }
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  if (values.size() % 2 == 1) return values[mid];
  return 0.5 * (values[mid - 1] + values[mid]);
}

namespace {

struct Variant {
  const char* name;
  bool use_ltl;
  bool use_affordance;
};

constexpr Variant kVariants[] = {{"full", true, true},
                                 {"no_aff", true, false},
                                 {"no_ltl", false, true},
                                 {"no_both", false, false}};

}  // namespace

std::vector<AblationCell> run_ablation(const cfg::TrainConfig& config,
                                       const std::string& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  std::vector<AblationCell> cells;
  for (const Variant& variant : kVariants) {
    cfg::TrainConfig vc = config;
    vc.use_ltl = variant.use_ltl;
    vc.use_affordance = variant.use_affordance;
    for (const std::uint64_t seed : config.seeds) {
      const std::string dir =
          (fs::path(out_dir) / variant.name / ("seed_" + std::to_string(seed)))
              .string();
      const RunResult run = run_training(vc, seed, dir);
      for (const char* split : {"seen", "unseen", "transfer"}) {
        for (auto it = run.history.points.rbegin();
             it != run.history.points.rend(); ++it) {
          if (it->split == split) {
            cells.push_back({variant.name, seed, split, it->success_rate,
                             it->avg_success_steps});
            break;
          }
        }
      }
    }
  }
  write_ablation_csv(cells, join_path(out_dir, "ablation.csv"));
  write_ablation_summary(cells, join_path(out_dir, "ablation_summary.csv"));
  return cells;
}

void write_ablation_csv(const std::vector<AblationCell>& cells,
                        const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "variant,seed,split,success_rate,avg_success_steps\n";
  for (const AblationCell& cell : cells) {
    out << cell.variant << ',' << cell.seed << ',' << cell.split << ','
        << fmt(cell.success_rate) << ',' << fmt(cell.avg_success_steps)
        << "\n";
  }
  if (!out) throw std::runtime_error("failed while writing " + path);
}

void write_ablation_summary(const std::vector<AblationCell>& cells,
                            const std::string& path) {
  std::vector<std::pair<std::string, std::string>> groups;
  std::map<std::pair<std::string, std::string>,
           std::pair<std::vector<double>, std::vector<double>>>
      by_group;
  for (const AblationCell& cell : cells) {
    const std::pair<std::string, std::string> key{cell.variant, cell.split};
    if (!by_group.contains(key)) groups.push_back(key);
    by_group[key].first.push_back(cell.success_rate);
    by_group[key].second.push_back(cell.avg_success_steps);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "variant,split,median_success_rate,median_avg_success_steps\n";
  for (const auto& [variant, split] : groups) {
    const auto& [rates, steps] = by_group.at({variant, split});
    out << variant << ',' << split << ',' << fmt(median(rates)) << ','
        << fmt(median(steps)) << "\n";
  }
  if (!out) throw std::runtime_error("failed while writing " + path);
}

}  // namespace taskdp::train
