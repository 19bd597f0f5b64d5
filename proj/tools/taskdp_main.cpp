// Command-line entry point: pretrain-seg, train, eval, ablate, export.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#include "taskdp/config.hpp"
#include "taskdp/metrics.hpp"
#include "taskdp/trainer.hpp"

namespace {

namespace fs = std::filesystem;

void print_history_tail(const taskdp::metrics::History& history) {
  // The last evaluation block: every point recorded at the final step.
  if (history.points.empty()) {
    std::printf("no evaluations recorded\n");
    return;
  }
  const std::uint64_t last = history.points.back().step;
  for (const taskdp::metrics::EvalPoint& p : history.points) {
    if (p.step != last) continue;
    std::printf("%s: success_rate %.4f, avg_success_steps %.1f\n",
                p.split.c_str(), p.success_rate, p.avg_success_steps);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-driven diffusion policies on articulated lids"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_dir;
  std::string out_path;
  std::string out_dir;
  std::string split = "seen";
  std::size_t episodes = 20;
  std::uint64_t seed = 0;
  bool svg = false;

  CLI::App* pre = app.add_subcommand(
      "pretrain-seg", "Train the segmentation backbone and checkpoint it");
  pre->add_option("--config", config_path, "JSON config file")->required();
  pre->add_option("--out", out_path, "checkpoint destination")->required();
  CLI::Option* pre_seed =
      pre->add_option("--seed", seed, "master seed (default: first config seed)");

  CLI::App* train =
      app.add_subcommand("train", "One training run into a run directory");
  train->add_option("--config", config_path, "JSON config file")->required();
  train->add_option("--run-dir", run_dir, "output directory")->required();
  CLI::Option* train_seed =
      train->add_option("--seed", seed, "master seed (default: first config seed)");

  CLI::App* eval =
      app.add_subcommand("eval", "Evaluate a run's checkpoints on a split");
  eval->add_option("--run-dir", run_dir, "trained run directory")->required();
  eval->add_option("--split", split, "seen, unseen, or transfer");
  eval->add_option("--episodes", episodes, "evaluation episodes");

  CLI::App* ablate = app.add_subcommand(
      "ablate", "Train every ablation variant and write the grids");
  ablate->add_option("--config", config_path, "JSON config file")->required();
  ablate->add_option("--out-dir", out_dir, "grid output directory")
      ->required();

  CLI::App* exp = app.add_subcommand(
      "export", "Re-export metrics artifacts from a run's CSV");
  exp->add_option("--run-dir", run_dir, "trained run directory")->required();
  exp->add_flag("--svg", svg, "also write the SVG chart");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) {
      const taskdp::cfg::TrainConfig config =
          taskdp::cfg::load_config(config_path);
      const std::uint64_t s =
          pre_seed->count() > 0 ? seed : config.seeds.front();
      const taskdp::perc::PretrainReport report =
          taskdp::train::run_seg_pretraining(config, s, out_path);
      std::printf(
          "held-out accuracy %.4f over %zu scenes (%d epochs); saved %s\n",
          report.held_out_accuracy, report.held_out_scenes, report.epochs,
          out_path.c_str());
    } else if (train->parsed()) {
      const taskdp::cfg::TrainConfig config =
          taskdp::cfg::load_config(config_path);
      const std::uint64_t s =
          train_seed->count() > 0 ? seed : config.seeds.front();
      const taskdp::train::RunResult result =
          taskdp::train::run_training(config, s, run_dir);
      std::printf("trained %llu env steps over %zu episodes into %s\n",
                  static_cast<unsigned long long>(result.env_steps),
                  result.episodes, run_dir.c_str());
      print_history_tail(result.history);
    } else if (eval->parsed()) {
      const taskdp::train::EvalResult result =
          taskdp::train::evaluate_run(run_dir, split, episodes);
      std::printf(
          "%s: success_rate %.4f, avg_success_steps %.1f, reach %.4f, "
          "articulation %.5f, contact prior %.4f\n",
          split.c_str(), result.success_rate, result.avg_success_steps,
          result.reach_mean, result.articulation_mean, result.mpr_mean);
    } else if (ablate->parsed()) {
      const taskdp::cfg::TrainConfig config =
          taskdp::cfg::load_config(config_path);
      const std::vector<taskdp::train::AblationCell> cells =
          taskdp::train::run_ablation(config, out_dir);
      std::printf("ablation grid finished: %zu rows in %s\n", cells.size(),
                  (fs::path(out_dir) / "ablation.csv").string().c_str());
    } else if (exp->parsed()) {
      const std::string csv = (fs::path(run_dir) / "metrics.csv").string();
      const taskdp::metrics::History history = taskdp::metrics::read_csv(csv);
      taskdp::metrics::export_metrics(
          history, csv, (fs::path(run_dir) / "summary.json").string(),
          svg ? (fs::path(run_dir) / "metrics.svg").string() : "");
      std::printf("re-exported %zu points from %s\n", history.points.size(),
                  csv.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
