#pragma once
// Training driver. A run rolls out the diffusion policy on the seen objects,
// pushes task-augmented transitions into a replay ring, and after a warmup
// performs one update tick per environment step: noise-estimator regression,
// a critic step whose observation gradient flows back into the task encoder,
// and a Polyak blend of the target critic. Episode outcomes feed the contact
// log, and the affordance planner refits whenever the pooled success rate
// clears its gate. Everything a run produces lands in one directory --
// manifest, vocabulary, checkpoints, metrics -- and equal seeds reproduce
// every artifact byte for byte.

#include <cstdint>
#include <string>
#include <vector>

#include "taskdp/config.hpp"
#include "taskdp/contact_planner.hpp"
#include "taskdp/diffusion.hpp"
#include "taskdp/metrics.hpp"
#include "taskdp/perception.hpp"
#include "taskdp/rng.hpp"
#include "taskdp/task_encoder.hpp"
#include "taskdp/toy_env.hpp"

namespace taskdp::train {

inline constexpr std::size_t kActionDim = 3;  // dx, dy, grasp toggle
inline constexpr char kVersion[] = "v0.1.0";

// ═══════════════════════════════════════════════════════════════════════════
// Replay ring
// ═══════════════════════════════════════════════════════════════════════════

// One flattened transition. The observation layout is fixed by the config:
// [vision | task embedding | contact point (when enabled) | proprioception].
// The formula indices let update ticks re-embed the task slice with the
// current encoder weights instead of the stale values stored here.
struct StoredTransition {
  nn::Vec obs;
  nn::Vec action;
  double reward = 0.0;
  nn::Vec next_obs;
  bool done = false;
  int formula_id = 0;
  int next_formula_id = 0;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);  // throws on capacity 0

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return data_.size(); }

  // Appends, overwriting the oldest entry once the ring is full.
  void push(StoredTransition transition);

  const StoredTransition& at(std::size_t index) const;

  // Uniform draw with replacement over the filled region. Throws
  // std::logic_error when the buffer is empty.
  std::vector<std::size_t> sample_indices(std::size_t count, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<StoredTransition> data_;
};

// ═══════════════════════════════════════════════════════════════════════════
// Policy bundle
// ═══════════════════════════════════════════════════════════════════════════

// Everything needed to act or keep training: the frozen segmentation
// backbone, task vocabulary and encoder, affordance planner, noise
// estimator, critic, and the schedule, all sized by the config.
struct PolicyBundle {
  cfg::TrainConfig config;
  std::uint64_t seed = 0;
  perc::SegNet segnet;
  enc::TokenVocab vocab;
  enc::TaskEncoder encoder;
  cp::CPNet planner;
  diff::NoiseEstimator policy;
  diff::Critic critic;
  diff::NoiseSchedule schedule;

  static PolicyBundle make(const cfg::TrainConfig& config);  // zero weights
  static PolicyBundle make_random(const cfg::TrainConfig& config, Rng& rng);
};

// Writes manifest.json, vocab.json, and the five checkpoints
// (seg/encoder/cp/policy/critic .ckpt) into the run directory.
void save_bundle(const PolicyBundle& bundle, const std::string& run_dir);

// Rebuilds a bundle from a run directory; throws std::runtime_error on a
// missing file or a checkpoint whose kind or shapes disagree with the
// manifest config.
PolicyBundle load_bundle(const std::string& run_dir);

// ═══════════════════════════════════════════════════════════════════════════
// Evaluation
// ═══════════════════════════════════════════════════════════════════════════

struct EvalResult {
  double success_rate = 0.0;
  double avg_success_steps = 0.0;  // horizon when nothing succeeded
  double reach_mean = 0.0;         // raw dense terms, averaged per step
  double articulation_mean = 0.0;
  double mpr_mean = 0.0;
};

// Deploy-mode rollouts (no exploration noise, no improvement step) cycling
// through the given objects. Throws std::invalid_argument on zero episodes
// or an empty object list.
EvalResult evaluate_bundle(const PolicyBundle& bundle,
                           const std::vector<env::ArticulatedObject>& objects,
                           std::size_t episodes, Rng& rng);

// Same episode loop driven by the hand-written controller instead of the
// policy; a fixture that bounds what any policy can hope to reach.
EvalResult evaluate_scripted(const std::vector<env::ArticulatedObject>&
                                 objects,
                             const cfg::TrainConfig& config,
                             std::size_t episodes, Rng& rng);

// Loads the run's bundle and evaluates it on "seen", "unseen", or
// "transfer" objects regenerated from the manifest's split spec.
EvalResult evaluate_run(const std::string& run_dir, const std::string& split,
                        std::size_t episodes);

// ═══════════════════════════════════════════════════════════════════════════
// Training and ablation
// ═══════════════════════════════════════════════════════════════════════════

struct RunResult {
  metrics::History history;
  std::uint64_t env_steps = 0;
  std::size_t episodes = 0;
};

// One full run into run_dir. Writes the manifest, vocabulary, and initial
// checkpoints before the first step, then metrics and final checkpoints at
// the end. A non-finite loss aborts with a divergence.txt dump and a
// rethrown std::runtime_error.
RunResult run_training(const cfg::TrainConfig& config, std::uint64_t seed,
                       const std::string& run_dir);

// Domain-randomized scene dataset plus segmentation pretraining; saves the
// trained backbone as a "segnet" checkpoint and returns the report.
perc::PretrainReport run_seg_pretraining(const cfg::TrainConfig& config,
                                         std::uint64_t seed,
                                         const std::string& checkpoint_path);

// One final-evaluation row of the ablation grid.
struct AblationCell {
  std::string variant;  // "full", "no_aff", "no_ltl", "no_both"
  std::uint64_t seed = 0;
  std::string split;
  double success_rate = 0.0;
  double avg_success_steps = 0.0;
};

// Trains every variant at every config seed with an equal step budget, one
// run directory per (variant, seed) under out_dir, then writes ablation.csv
// (per-run rows) and ablation_summary.csv (per-variant medians).
std::vector<AblationCell> run_ablation(const cfg::TrainConfig& config,
                                       const std::string& out_dir);

void write_ablation_csv(const std::vector<AblationCell>& cells,
                        const std::string& path);
void write_ablation_summary(const std::vector<AblationCell>& cells,
                            const std::string& path);

// Middle order statistic (mean of the middle pair on even counts). Throws
// std::invalid_argument on an empty input.
double median(std::vector<double> values);

}  // namespace taskdp::train
