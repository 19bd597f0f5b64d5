#include "taskdp/perception.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace taskdp::perc {

namespace {

using nn::Mat;
using nn::Vec;

double clamp(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

// True when the vertical ray from p toward +y crosses the lid segment, i.e.
// the camera above the scene cannot see p because the lid covers it.
bool lid_occludes(const Vec2& p, const env::ArticulatedObject& object,
                  double theta) {
  const Vec2 dir = env::lid_dir(object, theta);
  const double run = object.lid_length * dir.x();
  if (std::abs(run) < 1e-12) return false;  // lid parallel to the ray
  const double s = (p.x() - object.hinge.x()) / run;
  if (s < 0.0 || s > 1.0) return false;
  const double lid_y = object.hinge.y() + s * object.lid_length * dir.y();
  return lid_y > p.y();
}

struct SceneBuilder {
  const SceneConfig& config;
  Rng& rng;
  std::vector<double> xs, ys;
  std::vector<int> classes;

  void push(Vec2 p, int cls, bool jitter = true) {
    if (jitter && config.jitter > 0.0) {
      p.x() += rng.normal() * config.jitter;
      p.y() += rng.normal() * config.jitter;
    }
    xs.push_back(clamp(p.x(), -config.scene_bound, config.scene_bound));
    ys.push_back(clamp(p.y(), -config.scene_bound, config.scene_bound));
    classes.push_back(cls);
  }

  LabeledPointCloud finish() && {
    LabeledPointCloud cloud;
    cloud.points.resize(static_cast<Eigen::Index>(xs.size()), 2);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      cloud.points(static_cast<Eigen::Index>(i), 0) = xs[i];
      cloud.points(static_cast<Eigen::Index>(i), 1) = ys[i];
    }
    cloud.classes = std::move(classes);
    return cloud;
  }
};

void validate_scene(const LabeledPointCloud& scene) {
  if (scene.points.rows() == 0 || scene.points.cols() != 2) {
    throw std::invalid_argument("scene needs a nonempty rows x 2 cloud");
  }
  if (scene.classes.size() != static_cast<std::size_t>(scene.points.rows())) {
    throw std::invalid_argument("class labels do not match the point count");
  }
  for (int c : scene.classes) {
    if (c < 0 || c >= kNumClasses) {
      throw std::invalid_argument("point class " + std::to_string(c) +
                                  " out of range");
    }
  }
}

}  // namespace

void SceneConfig::validate() const {
  if (functional_points <= 0 || rest_points <= 0 || hand_points <= 0 ||
      arm_points <= 0) {
    throw std::invalid_argument("every class needs a positive point budget");
  }
  if (handle_cluster < 0 || handle_cluster > functional_points) {
    throw std::invalid_argument("handle cluster exceeds the functional "
                                "budget");
  }
  if (jitter < 0.0 || hand_radius <= 0.0 || scene_bound <= 0.0) {
    throw std::invalid_argument("invalid scene geometry parameters");
  }
}

LabeledPointCloud synthesize_scene(const env::ArticulatedObject& object,
                                   const env::EnvState& state,
                                   const SceneConfig& config, Rng& rng) {
  config.validate();
  object.validate();
  SceneBuilder builder{config, rng, {}, {}, {}};

  // Functional part: the lid segment, densified around the handle.
  const Vec2 dir = env::lid_dir(object, state.theta);
  const int plain = config.functional_points - config.handle_cluster;
  for (int i = 0; i < plain; ++i) {
    const double s = rng.uniform();
    builder.push(object.hinge + s * object.lid_length * dir,
                 kFunctionalPart);
  }
  for (int i = 0; i < config.handle_cluster; ++i) {
    const double s =
        clamp(object.handle_frac + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    builder.push(object.hinge + s * object.lid_length * dir,
                 kFunctionalPart);
  }

  // Rest of the object: the base segment, opposite the closed lid.
  const Vec2 base_dir = env::lid_dir(object, 0.0);
  for (int i = 0; i < config.rest_points; ++i) {
    const double s = rng.uniform();
    builder.push(object.hinge - s * object.lid_length * base_dir,
                 kObjectRest);
  }

  // Hand: uniform disc around the end effector (polar with sqrt radius).
  std::vector<Vec2> hand_points;
  for (int i = 0; i < config.hand_points; ++i) {
    const double r = config.hand_radius * std::sqrt(rng.uniform());
    const double ang = 2.0 * std::numbers::pi * rng.uniform();
    hand_points.push_back(state.eff +
                          Vec2(r * std::cos(ang), r * std::sin(ang)));
  }

  // Arm: the segment from the fixed mount to the end effector.
  std::vector<Vec2> arm_points;
  for (int i = 0; i < config.arm_points; ++i) {
    const double s = rng.uniform();
    arm_points.push_back(config.mount + s * (state.eff - config.mount));
  }

  for (const Vec2& p : hand_points) {
    if (config.occlusion && lid_occludes(p, object, state.theta)) continue;
    builder.push(p, kHand);
  }
  for (const Vec2& p : arm_points) builder.push(p, kArm);

  return std::move(builder).finish();
}

Mat imagine_hand_points(const Vec2& eff, double radius, int count) {
  if (count < 0 || radius <= 0.0) {
    throw std::invalid_argument("imagined points need a nonnegative count "
                                "and positive radius");
  }
  // Sunflower spiral: evenly filling, deterministic, no two points equal.
  constexpr double kGoldenAngle = 2.399963229728653;
  Mat points(count, 2);
  for (int i = 0; i < count; ++i) {
    const double r =
        radius * std::sqrt((i + 0.5) / static_cast<double>(count));
    const double ang = kGoldenAngle * static_cast<double>(i);
    points(i, 0) = eff.x() + r * std::cos(ang);
    points(i, 1) = eff.y() + r * std::sin(ang);
  }
  return points;
}

LabeledPointCloud observe_scene(const env::ArticulatedObject& object,
                                const env::EnvState& state,
                                const SceneConfig& config, Rng& rng) {
  LabeledPointCloud cloud = synthesize_scene(object, state, config, rng);
  const int missing =
      config.total_points() - static_cast<int>(cloud.points.rows());
  if (missing <= 0) return cloud;

  Mat imagined = imagine_hand_points(state.eff, config.hand_radius, missing);
  const Eigen::Index base = cloud.points.rows();
  cloud.points.conservativeResize(base + missing, 2);
  for (int i = 0; i < missing; ++i) {
    cloud.points(base + i, 0) =
        clamp(imagined(i, 0), -config.scene_bound, config.scene_bound);
    cloud.points(base + i, 1) =
        clamp(imagined(i, 1), -config.scene_bound, config.scene_bound);
    cloud.classes.push_back(kHand);
  }
  return cloud;
}

// ═══════════════════════════════════════════════════════════════════════════
// Segmentation backbone
// ═══════════════════════════════════════════════════════════════════════════

namespace {

// [features | pooled broadcast to every row]
Mat with_pooled(const Mat& features, const Vec& pooled) {
  Mat combined(features.rows(), features.cols() + pooled.size());
  combined.leftCols(features.cols()) = features;
  combined.rightCols(pooled.size()) =
      pooled.transpose().replicate(features.rows(), 1);
  return combined;
}

Vec colwise_max(const Mat& features, std::vector<Eigen::Index>* argmax) {
  Vec pooled(features.cols());
  if (argmax) argmax->assign(static_cast<std::size_t>(features.cols()), 0);
  for (Eigen::Index j = 0; j < features.cols(); ++j) {
    Eigen::Index row = 0;
    pooled(j) = features.col(j).maxCoeff(&row);
    if (argmax) (*argmax)[static_cast<std::size_t>(j)] = row;
  }
  return pooled;
}

void check_cloud(const Mat& points) {
  if (points.rows() == 0 || points.cols() != 2) {
    throw std::invalid_argument("point cloud must be rows x 2");
  }
}

// Per-point input features: coordinates plus the distances to the nearest
// and the 6th-nearest neighbor. Both are functions of the point set alone,
// so they are bitwise stable under row permutation.
Mat augment_points(const Mat& points) {
  const Eigen::Index n = points.rows();
  constexpr Eigen::Index kth = 6;
  Mat features(n, 4);
  features.leftCols(2) = points;
  std::vector<double> dists;
  for (Eigen::Index r = 0; r < n; ++r) {
    dists.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == r) continue;
      dists.push_back((points.row(r) - points.row(j)).norm());
    }
    if (dists.empty()) {
      features(r, 2) = 0.0;
      features(r, 3) = 0.0;
      continue;
    }
    const auto take = std::min<Eigen::Index>(
        kth, static_cast<Eigen::Index>(dists.size()));
    std::nth_element(dists.begin(), dists.begin() + (take - 1), dists.end());
    features(r, 3) = dists[static_cast<std::size_t>(take - 1)];
    features(r, 2) = *std::min_element(dists.begin(),
                                       dists.begin() + take);
  }
  return features;
}

}  // namespace

SegNet::SegNet(std::size_t feature_dim) : feature_dim_(feature_dim) {
  if (feature_dim_ == 0) {
    throw std::invalid_argument("feature dim must be positive");
  }
  stage1_ = nn::DenseNet({{4, feature_dim_, nn::Activation::kRelu},
                          {feature_dim_, feature_dim_,
                           nn::Activation::kRelu}});
  stage2_ = nn::DenseNet({{2 * feature_dim_, feature_dim_,
                           nn::Activation::kRelu}});
  head_ = nn::DenseNet({{2 * feature_dim_, 2 * feature_dim_,
                         nn::Activation::kRelu},
                        {2 * feature_dim_, kNumClasses,
                         nn::Activation::kIdentity}});
}

SegNet SegNet::xavier(std::size_t feature_dim, Rng& rng) {
  SegNet net(feature_dim);
  net.stage1_ = nn::DenseNet::xavier(
      {{4, feature_dim, nn::Activation::kRelu},
       {feature_dim, feature_dim, nn::Activation::kRelu}},
      rng);
  net.stage2_ = nn::DenseNet::xavier(
      {{2 * feature_dim, feature_dim, nn::Activation::kRelu}}, rng);
  net.head_ = nn::DenseNet::xavier(
      {{2 * feature_dim, 2 * feature_dim, nn::Activation::kRelu},
       {2 * feature_dim, kNumClasses, nn::Activation::kIdentity}},
      rng);
  return net;
}

std::size_t SegNet::parameter_count() const {
  return stage1_.parameter_count() + stage2_.parameter_count() +
         head_.parameter_count();
}

Vec SegNet::global_feature(const Mat& points) const {
  check_cloud(points);
  const Mat f1 = stage1_.infer(augment_points(points));
  const Mat f2 = stage2_.infer(with_pooled(f1, colwise_max(f1, nullptr)));
  return colwise_max(f2, nullptr);
}

Mat SegNet::per_point_logits(const Mat& points) const {
  check_cloud(points);
  const Mat f1 = stage1_.infer(augment_points(points));
  const Mat f2 = stage2_.infer(with_pooled(f1, colwise_max(f1, nullptr)));
  return head_.infer(with_pooled(f2, colwise_max(f2, nullptr)));
}

Mat SegNet::logits_recording(const Mat& points) {
  stage1_out_ = stage1_.forward(augment_points(points));
  stage2_out_ =
      stage2_.forward(with_pooled(stage1_out_, colwise_max(stage1_out_,
                                                           &argmax1_)));
  trace_valid_ = true;
  return head_.forward(with_pooled(stage2_out_, colwise_max(stage2_out_,
                                                            &argmax2_)));
}

double SegNet::scene_loss_backward(const LabeledPointCloud& scene) {
  validate_scene(scene);
  const Mat logits = logits_recording(scene.points);
  const auto rows = logits.rows();
  const double inv_n = 1.0 / static_cast<double>(rows);

  double loss = 0.0;
  Mat dlogits(rows, kNumClasses);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double peak = logits.row(r).maxCoeff();
    Eigen::Array4d e = (logits.row(r).array() - peak).transpose();
    e = e.exp();
    const double denom = e.sum();
    const int label = scene.classes[static_cast<std::size_t>(r)];
    loss -= inv_n * (logits(r, label) - peak - std::log(denom));
    for (int c = 0; c < kNumClasses; ++c) {
      dlogits(r, c) = inv_n * (e(c) / denom - (c == label ? 1.0 : 0.0));
    }
  }
  if (!std::isfinite(loss)) {
    throw std::runtime_error("segmentation loss diverged");
  }

  // Each pooled coordinate takes one column's max, so its gradient flows to
  // the row that attained it.
  const auto dim = static_cast<Eigen::Index>(feature_dim_);
  const Mat dhead_in = head_.backward(dlogits);
  Mat df2 = dhead_in.leftCols(dim);
  for (Eigen::Index j = 0; j < dim; ++j) {
    df2(argmax2_[static_cast<std::size_t>(j)], j) +=
        dhead_in.col(dim + j).sum();
  }
  const Mat dstage2_in = stage2_.backward(df2);
  Mat df1 = dstage2_in.leftCols(dim);
  for (Eigen::Index j = 0; j < dim; ++j) {
    df1(argmax1_[static_cast<std::size_t>(j)], j) +=
        dstage2_in.col(dim + j).sum();
  }
  stage1_.backward(df1);
  trace_valid_ = false;
  return loss;
}

double SegNet::train_scene(const LabeledPointCloud& scene,
                           nn::Adam& optimizer) {
  zero_grad();
  const double loss = scene_loss_backward(scene);
  auto blocks = param_blocks();
  optimizer.step(blocks);
  return loss;
}

double SegNet::accuracy(const std::vector<LabeledPointCloud>& scenes) const {
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const LabeledPointCloud& scene : scenes) {
    validate_scene(scene);
    const Mat logits = per_point_logits(scene.points);
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index best = 0;
      logits.row(r).maxCoeff(&best);
      correct += (static_cast<int>(best) ==
                  scene.classes[static_cast<std::size_t>(r)]);
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("no scenes to score");
  return static_cast<double>(correct) / static_cast<double>(total);
}

void SegNet::zero_grad() {
  stage1_.zero_grad();
  stage2_.zero_grad();
  head_.zero_grad();
}

std::vector<nn::ParamBlock> SegNet::param_blocks() {
  auto blocks = stage1_.param_blocks();
  for (nn::DenseNet* net : {&stage2_, &head_}) {
    auto more = net->param_blocks();
    blocks.insert(blocks.end(), more.begin(), more.end());
  }
  return blocks;
}

nn::NamedTensors SegNet::to_tensors(const std::string& prefix) const {
  nn::NamedTensors out = stage1_.to_tensors(prefix + ".stage1");
  for (auto&& [suffix, net] :
       {std::pair{".stage2", &stage2_}, {".head", &head_}}) {
    nn::NamedTensors more = net->to_tensors(prefix + suffix);
    out.insert(out.end(), std::make_move_iterator(more.begin()),
               std::make_move_iterator(more.end()));
  }
  return out;
}

void SegNet::load_tensors(const nn::Checkpoint& ckpt,
                          const std::string& prefix) {
  stage1_.load_tensors(ckpt, prefix + ".stage1");
  stage2_.load_tensors(ckpt, prefix + ".stage2");
  head_.load_tensors(ckpt, prefix + ".head");
}

std::uint64_t SegNet::weight_checksum() const {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a over parameter bits
  for (const auto& [name, tensor] : to_tensors("w")) {
    (void)name;
    for (double v : tensor.data) {
      h ^= std::bit_cast<std::uint64_t>(v);
      h *= 1099511628211ull;
    }
  }
  return h;
}

// ═══════════════════════════════════════════════════════════════════════════
// Pretraining
// ═══════════════════════════════════════════════════════════════════════════

PretrainReport pretrain_segmentation(SegNet& net,
                                     const std::vector<LabeledPointCloud>&
                                         dataset,
                                     int epochs, double learning_rate,
                                     Rng& rng) {
  if (dataset.empty()) throw std::invalid_argument("empty dataset");
  if (epochs < 1) throw std::invalid_argument("epochs must be positive");

  std::vector<std::size_t> train_idx;
  std::vector<LabeledPointCloud> held_out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (i % 10 == 9) {
      held_out.push_back(dataset[i]);
    } else {
      train_idx.push_back(i);
    }
  }
  if (held_out.empty()) {
    // Tiny datasets: still report an accuracy on something unseen in the
    // final shuffle order, namely the last scene.
    held_out.push_back(dataset.back());
    if (train_idx.size() > 1) train_idx.pop_back();
  }

  nn::Adam optimizer(learning_rate);
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    // Cosine decay to zero squeezes out the tail of the loss curve.
    optimizer.set_lr(learning_rate * 0.5 *
                     (1.0 + std::cos(std::numbers::pi * epoch /
                                     static_cast<double>(epochs))));
    for (std::size_t i = train_idx.size(); i > 1; --i) {
      std::swap(train_idx[i - 1], train_idx[rng.index(i)]);
    }
    epoch_loss = 0.0;
    for (std::size_t idx : train_idx) {
      epoch_loss += net.train_scene(dataset[idx], optimizer);
    }
    epoch_loss /= static_cast<double>(train_idx.size());
  }

  PretrainReport report;
  report.held_out_accuracy = net.accuracy(held_out);
  report.final_loss = epoch_loss;
  report.epochs = epochs;
  report.train_scenes = train_idx.size();
  report.held_out_scenes = held_out.size();
  return report;
}

std::vector<LabeledPointCloud> generate_dataset(
    const std::vector<env::ArticulatedObject>& objects,
    int scenes_per_object, const SceneConfig& config, Rng& rng) {
  if (objects.empty() || scenes_per_object < 1) {
    throw std::invalid_argument("dataset needs objects and a positive scene "
                                "count");
  }
  std::vector<LabeledPointCloud> dataset;
  dataset.reserve(objects.size() * static_cast<std::size_t>(scenes_per_object));
  for (const env::ArticulatedObject& object : objects) {
    for (int s = 0; s < scenes_per_object; ++s) {
      env::EnvState state;
      state.theta = rng.uniform(0.0, object.theta_max);
      const double mode = rng.uniform();
      const Vec2 handle = env::handle_position(object, state.theta);
      if (mode < 0.4) {
        state.eff.x() = rng.uniform(-2.0, 2.0);
        state.eff.y() = rng.uniform(-2.0, 2.0);
      } else if (mode < 0.7) {
        const double r = 0.25 * std::sqrt(rng.uniform());
        const double ang = 2.0 * std::numbers::pi * rng.uniform();
        state.eff = handle + Vec2(r * std::cos(ang), r * std::sin(ang));
      } else {
        state.eff = handle;  // grasping pose, maximal hand/lid overlap
        state.grasp = true;
      }
      dataset.push_back(observe_scene(object, state, config, rng));
    }
  }
  return dataset;
}

// ═══════════════════════════════════════════════════════════════════════════
// Dataset cache
// ═══════════════════════════════════════════════════════════════════════════

namespace {

constexpr char kDatasetMagic[8] = {'T', 'D', 'P', 'D', 'S', 'E', 'T', '\0'};
constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace

void save_dataset(const std::vector<LabeledPointCloud>& dataset,
                  const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open dataset for writing: " + path);
  }
  out.write(kDatasetMagic, sizeof kDatasetMagic);
  const std::uint32_t version = kDatasetVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const auto count = static_cast<std::uint32_t>(dataset.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const LabeledPointCloud& scene : dataset) {
    validate_scene(scene);
    const auto rows = static_cast<std::uint32_t>(scene.points.rows());
    out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
    for (Eigen::Index r = 0; r < scene.points.rows(); ++r) {
      const double xy[2] = {scene.points(r, 0), scene.points(r, 1)};
      out.write(reinterpret_cast<const char*>(xy), sizeof xy);
    }
    for (int c : scene.classes) {
      const auto byte = static_cast<unsigned char>(c);
      out.write(reinterpret_cast<const char*>(&byte), 1);
    }
  }
  if (!out) throw std::runtime_error("failed writing dataset: " + path);
}

std::vector<LabeledPointCloud> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  char magic[sizeof kDatasetMagic] = {};
  if (!in.read(magic, sizeof magic) ||
      std::memcmp(magic, kDatasetMagic, sizeof magic) != 0) {
    throw std::runtime_error("incompatible dataset: bad magic in " + path);
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != kDatasetVersion) {
    throw std::runtime_error("incompatible dataset version");
  }
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  std::vector<LabeledPointCloud> dataset;
  dataset.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t rows = 0;
    if (!in.read(reinterpret_cast<char*>(&rows), sizeof rows) ||
        rows == 0 || rows > (1u << 20)) {
      throw std::runtime_error("incompatible dataset: bad scene size");
    }
    LabeledPointCloud scene;
    scene.points.resize(rows, 2);
    for (std::uint32_t r = 0; r < rows; ++r) {
      double xy[2];
      if (!in.read(reinterpret_cast<char*>(xy), sizeof xy)) {
        throw std::runtime_error("incompatible dataset: truncated points");
      }
      scene.points(r, 0) = xy[0];
      scene.points(r, 1) = xy[1];
    }
    scene.classes.resize(rows);
    for (std::uint32_t r = 0; r < rows; ++r) {
      unsigned char byte = 0;
      if (!in.read(reinterpret_cast<char*>(&byte), 1)) {
        throw std::runtime_error("incompatible dataset: truncated classes");
      }
      if (byte >= kNumClasses) {
        throw std::runtime_error("incompatible dataset: bad class label");
      }
      scene.classes[r] = byte;
    }
    dataset.push_back(std::move(scene));
  }
  return dataset;
}

}  // namespace taskdp::perc
