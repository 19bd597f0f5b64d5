#pragma once
// Synthetic labeled 2-D point clouds and the frozen segmentation backbone.
//
// A scene is the articulated object plus the robot: points sampled on the
// lid segment (functional part, densified near the handle), the base
// segment (rest of the object), the end-effector disc (hand), and the
// mount-to-hand segment (arm), each jittered and clamped to the scene box.
// A fixed virtual camera looks along -y, so hand points hidden below the
// lid are dropped; imagined points synthesized from the known end-effector
// pose restore the cloud to its nominal size.
//
// The backbone is two shared per-point stages, each pooled with a
// coordinate-wise max. The first stage sees raw coordinates plus two local
// spacing statistics (distance to the nearest and the 6th-nearest
// neighbor), which separate the sparse hand disc from the densely sampled
// segments; the second stage sees each point next to the first pooled
// summary, so it can encode scene-relative geometry before the final
// pooling. All inputs are set functions of the cloud and max pooling is
// order-free exactly, so permuting the input permutes per-point logits
// identically and leaves the pooled features bitwise unchanged.

#include <cstdint>
#include <string>
#include <vector>

#include "taskdp/nn.hpp"
#include "taskdp/rng.hpp"
#include "taskdp/toy_env.hpp"

namespace taskdp::perc {

using env::Vec2;

enum PointClass : int {
  kFunctionalPart = 0,
  kObjectRest = 1,
  kHand = 2,
  kArm = 3,
};
inline constexpr int kNumClasses = 4;

struct SceneConfig {
  int functional_points = 96;  // lid segment, includes the handle cluster
  int rest_points = 96;        // base segment
  int hand_points = 32;        // end-effector disc
  int arm_points = 32;         // mount-to-hand segment
  int handle_cluster = 16;     // of the functional budget, near the handle
  double jitter = 0.005;       // per-coordinate Gaussian noise (meters)
  double hand_radius = 0.08;
  Vec2 mount = Vec2(-1.95, -1.95);
  double scene_bound = 2.0;
  bool occlusion = true;

  int total_points() const {
    return functional_points + rest_points + hand_points + arm_points;
  }
  void validate() const;  // throws std::invalid_argument
};

struct LabeledPointCloud {
  nn::Mat points;            // rows x 2
  std::vector<int> classes;  // one PointClass per row
};

// Raw camera view: exact nominal counts per class except that occluded hand
// points are dropped, so the cloud may come up short.
LabeledPointCloud synthesize_scene(const env::ArticulatedObject& object,
                                   const env::EnvState& state,
                                   const SceneConfig& config, Rng& rng);

// Deterministic sunflower-spiral samples on the end-effector disc. No rng:
// the pose is known from kinematics, not observed.
nn::Mat imagine_hand_points(const Vec2& eff, double radius, int count);

// synthesize_scene plus imagination: dropped hand points are replaced with
// imagined ones, restoring the cloud to config.total_points() rows.
LabeledPointCloud observe_scene(const env::ArticulatedObject& object,
                                const env::EnvState& state,
                                const SceneConfig& config, Rng& rng);

class SegNet {
 public:
  explicit SegNet(std::size_t feature_dim = 64);
  static SegNet xavier(std::size_t feature_dim, Rng& rng);

  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t parameter_count() const;

  // Pooled global feature o_pn: coordinate-wise max of the second stage.
  nn::Vec global_feature(const nn::Mat& points) const;

  // Per-point class logits (rows x 4). Each point sees its own trunk
  // features concatenated with the pooled scene feature.
  nn::Mat per_point_logits(const nn::Mat& points) const;

  // One cross-entropy training step on a scene; returns the mean per-point
  // loss. Throws std::runtime_error when the loss turns non-finite.
  double train_scene(const LabeledPointCloud& scene, nn::Adam& optimizer);

  // Forward plus backward without an optimizer step: accumulates parameter
  // gradients for the mean per-point cross-entropy and returns the loss.
  double scene_loss_backward(const LabeledPointCloud& scene);

  // Mean per-point argmax accuracy over the scenes.
  double accuracy(const std::vector<LabeledPointCloud>& scenes) const;

  void zero_grad();
  std::vector<nn::ParamBlock> param_blocks();
  nn::NamedTensors to_tensors(const std::string& prefix) const;
  void load_tensors(const nn::Checkpoint& ckpt, const std::string& prefix);

  // Fold of all parameter bit patterns; equality certifies frozen weights.
  std::uint64_t weight_checksum() const;

 private:
  nn::Mat logits_recording(const nn::Mat& points);

  std::size_t feature_dim_;
  nn::DenseNet stage1_;  // [x y d_near d_6th] -> dim -> dim, relu
  nn::DenseNet stage2_;  // [point | pooled1] -> dim, relu
  nn::DenseNet head_;    // [point | pooled2] -> 2 dim -> 4

  // Trace of the pending train_scene forward.
  nn::Mat stage1_out_;
  nn::Mat stage2_out_;
  std::vector<Eigen::Index> argmax1_;
  std::vector<Eigen::Index> argmax2_;
  bool trace_valid_ = false;
};

struct PretrainReport {
  double held_out_accuracy = 0.0;
  double final_loss = 0.0;
  int epochs = 0;
  std::size_t train_scenes = 0;
  std::size_t held_out_scenes = 0;
};

// Trains on all but every tenth scene (the held-out slice), shuffling the
// training order each epoch with a cosine-decayed learning rate. The net
// arrives zero-initialized or partially trained and leaves trained;
// freezing afterwards is the caller's contract.
PretrainReport pretrain_segmentation(SegNet& net,
                                     const std::vector<LabeledPointCloud>&
                                         dataset,
                                     int epochs, double learning_rate,
                                     Rng& rng);

// Mixed-pose scenes over the given objects for pretraining.
std::vector<LabeledPointCloud> generate_dataset(
    const std::vector<env::ArticulatedObject>& objects,
    int scenes_per_object, const SceneConfig& config, Rng& rng);

// Binary cache: magic, version, counts, then per scene a little-endian f64
// coordinate block and a u8 class block.
void save_dataset(const std::vector<LabeledPointCloud>& dataset,
                  const std::string& path);
std::vector<LabeledPointCloud> load_dataset(const std::string& path);

}  // namespace taskdp::perc
