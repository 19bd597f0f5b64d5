#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "taskdp/config.hpp"
#include "taskdp/metrics.hpp"
#include "taskdp/trainer.hpp"

using taskdp::Rng;
namespace cfg = taskdp::cfg;
namespace metrics = taskdp::metrics;
namespace train = taskdp::train;
namespace env = taskdp::env;
namespace fs = std::filesystem;

namespace {

// Small enough that a full run finishes in seconds, still exercising every
// training-path branch: warmup, ticks, planner gate, and two eval points.
cfg::TrainConfig tiny_config() {
  cfg::TrainConfig c;
  c.seg_feature_dim = 8;
  c.encoder.model_dim = 8;
  c.encoder.heads = 2;
  c.encoder.layers = 1;
  c.encoder.ff_dim = 16;
  c.cp_feature_dim = 8;
  c.policy_hidden = 16;
  c.critic_hidden = 16;
  c.step_embed_dim = 4;
  c.diffusion_steps = 5;
  c.buffer_capacity = 4000;
  c.batch_size = 16;
  c.warmup_steps = 40;
  c.total_env_steps = 500;
  c.eval_every = 250;
  c.eval_episodes = 3;
  c.pretrain_objects = 4;
  c.pretrain_scenes_per_object = 4;
  c.pretrain_epochs = 2;
  c.n_seen = 2;
  c.n_unseen = 2;
  c.seeds = {7};
  c.env_params.horizon = 60;
  return c;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

fs::path fresh_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Shared tiny segmentation checkpoint so each run test skips pretraining.
const std::string& shared_seg_checkpoint() {
  static const std::string path = [] {
    const fs::path p = fs::temp_directory_path() / "taskdp_test_seg.ckpt";
    train::run_seg_pretraining(tiny_config(), 11, p.string());
    return p.string();
  }();
  return path;
}

cfg::TrainConfig run_config() {
  cfg::TrainConfig c = tiny_config();
  c.seg_checkpoint = shared_seg_checkpoint();
  return c;
}

metrics::History sample_history() {
  metrics::History h;
  h.points.push_back({100, "seen", 0.25, 180.0, 2.5, 0.125, 0.0, -1.5,
                      0.001, 3.25});
  h.points.push_back({100, "unseen", 0.0, 200.0, 2.5, 0.125, 0.0, -1.75,
                      0.0, 2.5});
  h.points.push_back({200, "seen", 0.5, 150.5, 1.75, 0.0625, 0.03125, -1.25,
                      0.0025, 4.125});
  h.points.push_back({200, "unseen", 0.25, 175.0, 1.75, 0.0625, 0.03125,
                      -1.5, 0.001, 3.0});
  h.points.push_back({200, "transfer", 0.125, 190.0, 1.75, 0.0625, 0.03125,
                      -1.625, 0.0005, 2.75});
  return h;
}

}  // namespace

// ═══════════════════════════════════════════════════════════════════════════
// Config
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("config round-trips through its canonical JSON") {
  const cfg::TrainConfig defaults;
  const std::string text = cfg::to_json_text(defaults);
  const cfg::TrainConfig reparsed = cfg::config_from_json_text(text);
  CHECK(cfg::to_json_text(reparsed) == text);

  cfg::TrainConfig custom = tiny_config();
  custom.formula = "F lid_opened";
  custom.use_ltl = false;
  custom.use_affordance = false;
  custom.seeds = {3, 1, 4};
  custom.env_params.w_mpr = 0.25;
  custom.scene.occlusion = false;
  custom.scene.mount = env::Vec2(-1.0, -0.5);
  const std::string custom_text = cfg::to_json_text(custom);
  const cfg::TrainConfig back = cfg::config_from_json_text(custom_text);
  CHECK(cfg::to_json_text(back) == custom_text);
  CHECK(back.seeds == std::vector<std::uint64_t>{3, 1, 4});
  CHECK(back.scene.mount.x() == -1.0);
  CHECK_FALSE(back.use_ltl);
}

TEST_CASE("config files survive a save/load cycle") {
  const fs::path dir = fresh_dir("taskdp_cfg_io");
  const fs::path path = dir / "config.json";
  cfg::TrainConfig c = tiny_config();
  c.formula = "F(lid_grasped & F lid_opened)";
  cfg::save_config(c, path.string());
  const cfg::TrainConfig loaded = cfg::load_config(path.string());
  CHECK(cfg::to_json_text(loaded) == cfg::to_json_text(c));
  CHECK_THROWS_AS(cfg::load_config((dir / "absent.json").string()),
                  std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("partial configs inherit defaults and typos are rejected") {
  const cfg::TrainConfig from_empty = cfg::config_from_json_text("{}");
  const cfg::TrainConfig defaults;
  CHECK(cfg::to_json_text(from_empty) == cfg::to_json_text(defaults));

  const cfg::TrainConfig partial = cfg::config_from_json_text(
      R"({"policy": {"gamma": 0.5}, "run": {"total_env_steps": 9}})");
  CHECK(partial.gamma == 0.5);
  CHECK(partial.total_env_steps == 9);
  CHECK(partial.beta_max == defaults.beta_max);

  CHECK_THROWS_AS(cfg::config_from_json_text(R"({"polcy": {}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(cfg::config_from_json_text(R"({"policy": {"gama": 1}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(cfg::config_from_json_text(R"({"policy": {"gamma": []}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(cfg::config_from_json_text("not json"),
                  std::invalid_argument);
}

TEST_CASE("config validation rejects inconsistent settings") {
  CHECK_NOTHROW(tiny_config().validate());

  cfg::TrainConfig c = tiny_config();
  c.formula = "F(";
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = tiny_config();
  c.formula = "F door_open";  // not a proposition the labeler can emit
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = tiny_config();
  c.batch_size = c.buffer_capacity + 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = tiny_config();
  c.step_embed_dim = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = tiny_config();
  c.beta_min = 0.3;
  c.beta_max = 0.2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = tiny_config();
  c.seeds.clear();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = tiny_config();
  c.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("observation width drops the contact columns without affordance") {
  cfg::TrainConfig c;
  CHECK(c.observation_dim() == 64 + 32 + 2 + 4);
  c.use_affordance = false;
  CHECK(c.observation_dim() == 64 + 32 + 4);
  c.use_ltl = false;  // embedding stays, zeroed
  CHECK(c.observation_dim() == 64 + 32 + 4);
}

// ═══════════════════════════════════════════════════════════════════════════
// Replay ring
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("replay ring wraps and samples within the filled region") {
  train::ReplayBuffer buffer(4);
  CHECK(buffer.capacity() == 4);
  CHECK(buffer.size() == 0);
  Rng rng(5);
  CHECK_THROWS_AS(buffer.sample_indices(1, rng), std::logic_error);

  const auto make = [](double tag) {
    train::StoredTransition t;
    t.obs = taskdp::nn::Vec::Constant(3, tag);
    t.action = taskdp::nn::Vec::Constant(3, tag);
    t.next_obs = taskdp::nn::Vec::Constant(3, tag);
    t.reward = tag;
    return t;
  };
  for (int i = 0; i < 3; ++i) buffer.push(make(i));
  CHECK(buffer.size() == 3);
  CHECK(buffer.at(0).reward == 0.0);

  buffer.push(make(3));
  buffer.push(make(4));  // overwrites slot 0, the oldest
  CHECK(buffer.size() == 4);
  CHECK(buffer.at(0).reward == 4.0);
  CHECK(buffer.at(1).reward == 1.0);

  const std::vector<std::size_t> idx = buffer.sample_indices(64, rng);
  CHECK(idx.size() == 64);
  std::set<std::size_t> seen(idx.begin(), idx.end());
  for (const std::size_t i : idx) CHECK(i < 4);
  CHECK(seen.size() > 1);  // with replacement over four slots

  CHECK_THROWS_AS(train::ReplayBuffer(0), std::invalid_argument);
}

// ═══════════════════════════════════════════════════════════════════════════
// Metrics exports
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("metrics CSV round-trips byte for byte") {
  const fs::path dir = fresh_dir("taskdp_metrics_io");
  const metrics::History h = sample_history();
  const fs::path csv = dir / "metrics.csv";
  metrics::write_csv(h, csv.string());
  const std::string first = read_file(csv);
  CHECK(first.starts_with(metrics::kCsvHeader));

  const metrics::History back = metrics::read_csv(csv.string());
  REQUIRE(back.points.size() == h.points.size());
  CHECK(back.points[2].split == "seen");
  CHECK(back.points[2].success_rate == 0.5);
  CHECK(back.points[4].step == 200);

  const fs::path again = dir / "again.csv";
  metrics::write_csv(back, again.string());
  CHECK(read_file(again) == first);

  CHECK_THROWS_AS(metrics::write_csv(metrics::History{}, csv.string()),
                  std::invalid_argument);
  CHECK_THROWS_AS(metrics::read_csv((dir / "absent.csv").string()),
                  std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("metrics summary and chart are deterministic") {
  const fs::path dir = fresh_dir("taskdp_metrics_art");
  const metrics::History h = sample_history();
  const fs::path summary = dir / "summary.json";
  const fs::path svg = dir / "metrics.svg";
  metrics::export_metrics(h, (dir / "m.csv").string(), summary.string(),
                          svg.string());

  const nlohmann::json j = nlohmann::json::parse(read_file(summary));
  CHECK(j.at("last_step") == 200);
  CHECK(j.at("splits").at("seen").at("best_success_rate") == 0.5);
  CHECK(j.at("splits").at("seen").at("evals") == 2);
  CHECK(j.at("splits").at("transfer").at("last_success_rate") == 0.125);

  const std::string chart = read_file(svg);
  CHECK(chart.starts_with("<svg"));
  CHECK(chart.find("polyline") != std::string::npos);
  const std::string summary_bytes = read_file(summary);
  metrics::export_metrics(h, (dir / "m.csv").string(), summary.string(),
                          svg.string());
  CHECK(read_file(summary) == summary_bytes);
  CHECK(read_file(svg) == chart);
  fs::remove_all(dir);
}

// ═══════════════════════════════════════════════════════════════════════════
// Medians
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("median is the middle order statistic") {
  CHECK(train::median({3.0}) == 3.0);
  CHECK(train::median({5.0, 1.0, 3.0}) == 3.0);
  CHECK(train::median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK_THROWS_AS(train::median({}), std::invalid_argument);
}

// ═══════════════════════════════════════════════════════════════════════════
// Scripted controller fixture
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("the scripted controller solves every split object") {
  const cfg::TrainConfig c;  // default environment, horizon 200
  const env::ObjectSplit split =
      env::make_splits(c.n_seen, c.n_unseen, c.split_seed);
  Rng rng(19);
  for (const auto* objects : {&split.seen, &split.unseen, &split.transfer}) {
    Rng fork = rng.fork(static_cast<std::uint64_t>(objects->size()));
    const train::EvalResult r =
        train::evaluate_scripted(*objects, c, 2 * objects->size(), fork);
    CHECK(r.success_rate == 1.0);
    CHECK(r.avg_success_steps < c.env_params.horizon);
    CHECK(r.articulation_mean > 0.0);
  }
  Rng bad(1);
  CHECK_THROWS_AS(train::evaluate_scripted(split.seen, c, 0, bad),
                  std::invalid_argument);
}

// ═══════════════════════════════════════════════════════════════════════════
// Bundles and evaluation
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("an untrained policy practically never completes the task") {
  const cfg::TrainConfig c = tiny_config();
  Rng init(23);
  train::PolicyBundle bundle = train::PolicyBundle::make_random(c, init);
  const env::ObjectSplit split =
      env::make_splits(c.n_seen, c.n_unseen, c.split_seed);
  Rng rng(29);
  const train::EvalResult r =
      train::evaluate_bundle(bundle, split.seen, 20, rng);
  CHECK(r.success_rate <= 0.05);
}

TEST_CASE("bundles round-trip through a run directory") {
  const fs::path dir = fresh_dir("taskdp_bundle_io");
  const cfg::TrainConfig c = run_config();
  Rng init(31);
  train::PolicyBundle bundle = train::PolicyBundle::make_random(c, init);
  bundle.seed = 77;
  train::save_bundle(bundle, dir.string());

  const train::PolicyBundle loaded = train::load_bundle(dir.string());
  CHECK(loaded.seed == 77);
  CHECK(cfg::to_json_text(loaded.config) == cfg::to_json_text(c));
  CHECK(loaded.segnet.weight_checksum() == bundle.segnet.weight_checksum());

  // Identical weights act identically.
  const env::ObjectSplit split =
      env::make_splits(c.n_seen, c.n_unseen, c.split_seed);
  Rng ra(41);
  Rng rb(41);
  const train::EvalResult ea =
      train::evaluate_bundle(bundle, split.seen, 2, ra);
  const train::EvalResult eb =
      train::evaluate_bundle(loaded, split.seen, 2, rb);
  CHECK(ea.reach_mean == eb.reach_mean);
  CHECK(ea.mpr_mean == eb.mpr_mean);

  // A checkpoint of the wrong kind is rejected.
  fs::copy_file(dir / "policy.ckpt", dir / "critic.ckpt",
                fs::copy_options::overwrite_existing);
  CHECK_THROWS_AS(train::load_bundle(dir.string()), std::runtime_error);
  fs::remove_all(dir);
}

// ═══════════════════════════════════════════════════════════════════════════
// Training runs
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("a zero-step budget leaves only the initial artifacts") {
  const fs::path dir = fresh_dir("taskdp_run_zero");
  cfg::TrainConfig c = run_config();
  c.total_env_steps = 0;
  const train::RunResult result = train::run_training(c, 7, dir.string());
  CHECK(result.history.points.empty());
  CHECK(result.env_steps == 0);
  CHECK(result.episodes == 0);
  for (const char* name : {"manifest.json", "vocab.json", "seg.ckpt",
                           "encoder.ckpt", "cp.ckpt", "policy.ckpt",
                           "critic.ckpt"}) {
    CHECK(fs::exists(dir / name));
  }
  CHECK_FALSE(fs::exists(dir / "metrics.csv"));
  CHECK_FALSE(fs::exists(dir / "summary.json"));
  CHECK_NOTHROW(train::load_bundle(dir.string()));
  fs::remove_all(dir);
}

TEST_CASE("a short run trains, evaluates, and exports every artifact") {
  const fs::path dir = fresh_dir("taskdp_run_short");
  const cfg::TrainConfig c = run_config();
  const train::RunResult result = train::run_training(c, 7, dir.string());
  CHECK(result.env_steps == c.total_env_steps);
  CHECK(result.episodes > 0);

  // Two cadence evals (250, 500); the final one adds the transfer split.
  REQUIRE(result.history.points.size() == 5);
  CHECK(result.history.points[0].step == 250);
  CHECK(result.history.points[0].split == "seen");
  CHECK(result.history.points[1].split == "unseen");
  CHECK(result.history.points[4].split == "transfer");
  CHECK(result.history.points[2].estimator_loss > 0.0);
  CHECK(result.history.points[2].critic_loss > 0.0);

  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(fs::exists(dir / "summary.json"));
  const metrics::History reloaded =
      metrics::read_csv((dir / "metrics.csv").string());
  REQUIRE(reloaded.points.size() == 5);
  CHECK(reloaded.points[0].success_rate ==
        result.history.points[0].success_rate);

  // The frozen backbone saved with the run equals the pretrained source.
  const train::PolicyBundle loaded = train::load_bundle(dir.string());
  taskdp::perc::SegNet source(c.seg_feature_dim);
  source.load_tensors(taskdp::nn::load_checkpoint(c.seg_checkpoint),
                      "segnet");
  CHECK(loaded.segnet.weight_checksum() == source.weight_checksum());

  // evaluate_run drives the loaded bundle end to end.
  const train::EvalResult seen = train::evaluate_run(dir.string(), "seen", 2);
  CHECK(seen.success_rate >= 0.0);
  CHECK_THROWS_AS(train::evaluate_run(dir.string(), "seen", 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(train::evaluate_run(dir.string(), "held_out", 2),
                  std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("equal seeds reproduce every artifact byte for byte") {
  const fs::path dir_a = fresh_dir("taskdp_run_det_a");
  const fs::path dir_b = fresh_dir("taskdp_run_det_b");
  const fs::path dir_c = fresh_dir("taskdp_run_det_c");
  const cfg::TrainConfig c = run_config();
  train::run_training(c, 7, dir_a.string());
  train::run_training(c, 7, dir_b.string());
  train::run_training(c, 8, dir_c.string());

  for (const char* name : {"manifest.json", "vocab.json", "metrics.csv",
                           "summary.json", "seg.ckpt", "encoder.ckpt",
                           "cp.ckpt", "policy.ckpt", "critic.ckpt"}) {
    CAPTURE(name);
    CHECK(read_file(dir_a / name) == read_file(dir_b / name));
  }
  CHECK(read_file(dir_a / "metrics.csv") != read_file(dir_c / "metrics.csv"));
  CHECK(read_file(dir_a / "policy.ckpt") != read_file(dir_c / "policy.ckpt"));

  // Re-export reproduces the files the run wrote.
  const std::string csv_bytes = read_file(dir_a / "metrics.csv");
  const std::string summary_bytes = read_file(dir_a / "summary.json");
  const metrics::History history =
      metrics::read_csv((dir_a / "metrics.csv").string());
  metrics::export_metrics(history, (dir_a / "metrics.csv").string(),
                          (dir_a / "summary.json").string());
  CHECK(read_file(dir_a / "metrics.csv") == csv_bytes);
  CHECK(read_file(dir_a / "summary.json") == summary_bytes);

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  fs::remove_all(dir_c);
}

TEST_CASE("ablation flags change the observation and the manifest") {
  const fs::path dir = fresh_dir("taskdp_run_noaff");
  cfg::TrainConfig c = run_config();
  c.use_affordance = false;
  c.use_ltl = false;
  c.total_env_steps = 150;
  c.eval_every = 150;
  c.eval_episodes = 2;
  const train::RunResult result = train::run_training(c, 7, dir.string());
  CHECK(result.env_steps == 150);

  const nlohmann::json manifest =
      nlohmann::json::parse(read_file(dir / "manifest.json"));
  CHECK(manifest.at("config").at("planner").at("use_affordance") == false);
  CHECK(manifest.at("config").at("task").at("use_ltl") == false);
  CHECK_FALSE(fs::exists(dir / "contacts.csv"));

  const train::PolicyBundle bundle = train::load_bundle(dir.string());
  CHECK(bundle.critic.obs_dim() == c.observation_dim());
  cfg::TrainConfig with_contact = c;
  with_contact.use_affordance = true;
  CHECK(bundle.config.observation_dim() + 2 ==
        with_contact.observation_dim());
  fs::remove_all(dir);
}
