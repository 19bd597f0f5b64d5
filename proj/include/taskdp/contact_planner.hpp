#pragma once
// Affordance scoring over object points and the contact planner built on it.
//
// The planner scores every object point (functional part plus rest, as
// labeled by segmentation) with a sigmoid actionability value, averages the
// top-K scoring points into a single max-affordance point, and shapes the
// reach reward with the inverse distance to that point. Once episodes start
// succeeding, recorded end-effector contacts refit the scorer: the refit
// loss is the success-weighted squared distance between a soft (softmax-
// weighted) top-K consensus point and the mean recorded contact, which
// keeps the selection differentiable; deployment uses the hard top-K mean.

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "taskdp/nn.hpp"
#include "taskdp/rng.hpp"
#include "taskdp/toy_env.hpp"

namespace taskdp::cp {

using env::Vec2;

inline constexpr int kDefaultTopK = 8;
inline constexpr double kDefaultSoftTemperature = 0.1;
inline constexpr double kDefaultMprEps = 0.05;
inline constexpr double kDefaultSuccessGate = 0.3;  // refit only above this
inline constexpr std::size_t kDefaultWindow = 20;   // trailing episodes

struct AffordanceMap {
  nn::Vec scores;  // one sigmoid score per object point, in (0, 1)
};

// One end-effector contact with the episode it was recorded in.
struct ContactEvent {
  Vec2 position = Vec2::Zero();
  int episode = 0;
};

// Per-object evidence over the trailing window: where the hand touched and
// how often episodes succeeded. Carries the latest object cloud so the
// refit can re-score exactly what the planner would see.
struct ContactRecord {
  int object_id = 0;
  std::vector<ContactEvent> contacts;  // nonempty whenever sr > 0
  double sr = 0.0;                     // success rate in [0, 1]
  nn::Mat object_points;               // rows x 2

  Vec2 contacts_mean() const;
  void validate() const;  // throws std::invalid_argument
};

// ═══════════════════════════════════════════════════════════════════════════
// Scoring network
// ═══════════════════════════════════════════════════════════════════════════

// Shared per-point stack over raw coordinates, concatenated with a pooled
// feature of the point's neighborhood (coordinate-wise max within a fixed
// radius) and a pooled feature of the whole cloud, then a sigmoid head.
// Every ingredient is a set function, so scores are permutation-equivariant
// bitwise.
class CPNet {
 public:
  explicit CPNet(std::size_t feature_dim = 32, double local_radius = 0.15);
  static CPNet xavier(std::size_t feature_dim, double local_radius,
                      Rng& rng);

  std::size_t feature_dim() const { return feature_dim_; }
  double local_radius() const { return local_radius_; }
  std::size_t parameter_count() const;

  // Sigmoid scores, one per row. Throws std::invalid_argument on an empty
  // or non-2-column cloud.
  AffordanceMap score(const nn::Mat& points) const;

  // Forward pass that records the trace consumed by backward_scores.
  nn::Vec scores_recording(const nn::Mat& points);

  // Backpropagates a gradient with respect to the recorded scores into the
  // parameter gradients. Throws std::logic_error without a pending trace.
  void backward_scores(const nn::Vec& dscores);

  void zero_grad();
  std::vector<nn::ParamBlock> param_blocks();
  nn::NamedTensors to_tensors(const std::string& prefix) const;
  void load_tensors(const nn::Checkpoint& ckpt, const std::string& prefix);

 private:
  std::size_t feature_dim_;
  double local_radius_;
  nn::DenseNet point_net_;  // 2 -> dim -> dim, relu
  nn::DenseNet head_;       // [point | local | global] -> dim -> 1

  // Trace of the pending forward pass.
  nn::Mat features_;
  nn::Vec scores_;
  std::vector<std::vector<Eigen::Index>> local_argmax_;  // [row][feature]
  std::vector<Eigen::Index> global_argmax_;
  bool trace_valid_ = false;
};

// ═══════════════════════════════════════════════════════════════════════════
// Max-affordance point and its reward
// ═══════════════════════════════════════════════════════════════════════════

AffordanceMap score_points(const nn::Mat& points, const CPNet& net);

// Arithmetic mean of the K highest-scoring points. Points are ranked
// canonically by coordinates first, so equal scores resolve to the same
// point set (and the same accumulation order) under any row permutation.
Vec2 select_mpo(const AffordanceMap& map, const nn::Mat& points, int k);

// 1 / max(distance, eps): strictly decreasing in distance beyond eps.
double mpr_reward(const Vec2& o_mp, const Vec2& s_eff,
                  double eps = kDefaultMprEps);

// ═══════════════════════════════════════════════════════════════════════════
// Contact evidence
// ═══════════════════════════════════════════════════════════════════════════

// Single-writer log of episode outcomes, windowed per object. An episode
// contributes the end-effector position at the first grasp engagement (if
// any) and at the final step.
class ContactLog {
 public:
  explicit ContactLog(std::size_t window = kDefaultWindow);

  void add_episode(int object_id, const std::vector<Vec2>& eff_path,
                   const std::vector<std::uint8_t>& grasp_path, bool success,
                   int episode, const nn::Mat& object_points);

  // One record per object, windowed contacts and success rate.
  std::vector<ContactRecord> records() const;

  // Successes over episodes, pooled across every object's trailing window.
  double global_success_rate() const;

  std::size_t episodes_logged() const { return episodes_logged_; }

  // CSV rows: object_id, sr, contact_x, contact_y, episode.
  void export_csv(const std::string& path) const;

 private:
  struct Episode {
    std::vector<ContactEvent> contacts;
    bool success = false;
  };

  std::size_t window_;
  std::size_t episodes_logged_ = 0;
  std::map<int, std::deque<Episode>> by_object_;
  std::map<int, nn::Mat> latest_cloud_;
};

// ═══════════════════════════════════════════════════════════════════════════
// Planner refit
// ═══════════════════════════════════════════════════════════════════════════

// Success-weighted squared distance between the soft top-K consensus point
// of each record's cloud and that record's mean contact. Pure version for
// gradient checking; the _backward variant also accumulates parameter
// gradients. Records with sr = 0 contribute exactly nothing.
double soft_mpo_loss(const CPNet& net,
                     const std::vector<ContactRecord>& records,
                     int k = kDefaultTopK,
                     double temperature = kDefaultSoftTemperature);
double soft_mpo_loss_backward(CPNet& net,
                              const std::vector<ContactRecord>& records,
                              int k = kDefaultTopK,
                              double temperature = kDefaultSoftTemperature);

struct PlannerUpdateReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps = 0;
  bool stepped = false;  // false when every record had sr = 0
};

// Adam descent on the refit loss. Leaves the network bitwise untouched when
// no record has sr > 0.
PlannerUpdateReport update_planner(CPNet& net,
                                   const std::vector<ContactRecord>& records,
                                   double lr, int steps,
                                   int k = kDefaultTopK,
                                   double temperature =
                                       kDefaultSoftTemperature);

}  // namespace taskdp::cp
