#include "taskdp/contact_planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace taskdp::cp {

namespace {

using nn::Mat;
using nn::Vec;

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void check_cloud(const Mat& points) {
  if (points.rows() == 0 || points.cols() != 2) {
    throw std::invalid_argument("object cloud must be rows x 2");
  }
}

// Rank of every row under lexicographic (x, y) order. Equal scores then
// resolve to the same point set in the same accumulation order no matter
// how the input rows were permuted.
std::vector<Eigen::Index> canonical_ranks(const Mat& points) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(points.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) {
                     if (points(a, 0) != points(b, 0)) {
                       return points(a, 0) < points(b, 0);
                     }
                     return points(a, 1) < points(b, 1);
                   });
  std::vector<Eigen::Index> rank(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    rank[static_cast<std::size_t>(order[i])] = static_cast<Eigen::Index>(i);
  }
  return rank;
}

// Indices of the k highest scores (ties to the lower canonical rank),
// returned in canonical order for deterministic accumulation.
std::vector<Eigen::Index> top_k_indices(const Vec& scores, const Mat& points,
                                        int k) {
  const auto n = points.rows();
  if (k < 1 || k > n) {
    throw std::invalid_argument("top-K selection needs 1 <= K <= N");
  }
  if (scores.size() != n) {
    throw std::invalid_argument("affordance map does not match the cloud");
  }
  const auto rank = canonical_ranks(points);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return rank[static_cast<std::size_t>(a)] <
           rank[static_cast<std::size_t>(b)];
  });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    return rank[static_cast<std::size_t>(a)] <
           rank[static_cast<std::size_t>(b)];
  });
  return idx;
}

struct SoftSelection {
  std::vector<Eigen::Index> set;  // canonical order
  Vec weights;                    // softmax over the set
  Vec2 point = Vec2::Zero();      // weighted consensus
};

SoftSelection soft_select(const Vec& scores, const Mat& points, int k,
                          double temperature) {
  SoftSelection sel;
  sel.set = top_k_indices(scores, points, k);
  const auto kk = static_cast<Eigen::Index>(sel.set.size());
  double peak = scores(sel.set[0]);
  for (Eigen::Index i : sel.set) peak = std::max(peak, scores(i));
  sel.weights.resize(kk);
  double denom = 0.0;
  for (Eigen::Index i = 0; i < kk; ++i) {
    sel.weights(i) =
        std::exp((scores(sel.set[static_cast<std::size_t>(i)]) - peak) /
                 temperature);
    denom += sel.weights(i);
  }
  sel.weights /= denom;
  for (Eigen::Index i = 0; i < kk; ++i) {
    sel.point += sel.weights(i) *
                 Vec2(points.row(sel.set[static_cast<std::size_t>(i)])
                          .transpose());
  }
  return sel;
}

void validate_refit_args(int k, double temperature) {
  if (k < 1) throw std::invalid_argument("K must be positive");
  if (temperature <= 0.0) {
    throw std::invalid_argument("temperature must be positive");
  }
}

}  // namespace

// ═══════════════════════════════════════════════════════════════════════════
// Contact records
// ═══════════════════════════════════════════════════════════════════════════

Vec2 ContactRecord::contacts_mean() const {
  if (contacts.empty()) {
    throw std::logic_error("record without contacts has no mean");
  }
  Vec2 mean = Vec2::Zero();
  for (const ContactEvent& event : contacts) mean += event.position;
  return mean / static_cast<double>(contacts.size());
}

void ContactRecord::validate() const {
  if (sr < 0.0 || sr > 1.0) {
    throw std::invalid_argument("success rate out of [0, 1]");
  }
  if (sr > 0.0 && contacts.empty()) {
    throw std::invalid_argument("successful record without contacts");
  }
  if (sr > 0.0) check_cloud(object_points);
}

// ═══════════════════════════════════════════════════════════════════════════
// Scoring network
// ═══════════════════════════════════════════════════════════════════════════

CPNet::CPNet(std::size_t feature_dim, double local_radius)
    : feature_dim_(feature_dim), local_radius_(local_radius) {
  if (feature_dim_ == 0 || local_radius_ <= 0.0) {
    throw std::invalid_argument("feature dim and local radius must be "
                                "positive");
  }
  point_net_ = nn::DenseNet({{2, feature_dim_, nn::Activation::kRelu},
                             {feature_dim_, feature_dim_,
                              nn::Activation::kRelu}});
  head_ = nn::DenseNet({{3 * feature_dim_, feature_dim_,
                         nn::Activation::kRelu},
                        {feature_dim_, 1, nn::Activation::kIdentity}});
}

CPNet CPNet::xavier(std::size_t feature_dim, double local_radius, Rng& rng) {
  CPNet net(feature_dim, local_radius);
  net.point_net_ = nn::DenseNet::xavier(
      {{2, feature_dim, nn::Activation::kRelu},
       {feature_dim, feature_dim, nn::Activation::kRelu}},
      rng);
  net.head_ = nn::DenseNet::xavier(
      {{3 * feature_dim, feature_dim, nn::Activation::kRelu},
       {feature_dim, 1, nn::Activation::kIdentity}},
      rng);
  return net;
}

std::size_t CPNet::parameter_count() const {
  return point_net_.parameter_count() + head_.parameter_count();
}

namespace {

// [features | local pooled | global pooled broadcast]; optionally records
// which row supplied each pooled maximum.
Mat pooled_input(const Mat& points, const Mat& features, double radius,
                 std::vector<std::vector<Eigen::Index>>* local_argmax,
                 std::vector<Eigen::Index>* global_argmax) {
  const auto n = features.rows();
  const auto dim = features.cols();
  Mat combined(n, 3 * dim);
  combined.leftCols(dim) = features;

  if (local_argmax) {
    local_argmax->assign(static_cast<std::size_t>(n),
                         std::vector<Eigen::Index>(
                             static_cast<std::size_t>(dim), 0));
  }
  const double r2 = radius * radius;
  std::vector<Eigen::Index> hood;
  for (Eigen::Index i = 0; i < n; ++i) {
    hood.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if ((points.row(i) - points.row(j)).squaredNorm() <= r2) {
        hood.push_back(j);
      }
    }
    for (Eigen::Index c = 0; c < dim; ++c) {
      Eigen::Index best = hood[0];
      for (Eigen::Index j : hood) {
        if (features(j, c) > features(best, c)) best = j;
      }
      combined(i, dim + c) = features(best, c);
      if (local_argmax) {
        (*local_argmax)[static_cast<std::size_t>(i)]
                       [static_cast<std::size_t>(c)] = best;
      }
    }
  }

  if (global_argmax) {
    global_argmax->assign(static_cast<std::size_t>(dim), 0);
  }
  for (Eigen::Index c = 0; c < dim; ++c) {
    Eigen::Index best = 0;
    const double peak = features.col(c).maxCoeff(&best);
    combined.col(2 * dim + c).setConstant(peak);
    if (global_argmax) (*global_argmax)[static_cast<std::size_t>(c)] = best;
  }
  return combined;
}

}  // namespace

AffordanceMap CPNet::score(const Mat& points) const {
  check_cloud(points);
  const Mat features = point_net_.infer(points);
  const Mat combined =
      pooled_input(points, features, local_radius_, nullptr, nullptr);
  const Mat logits = head_.infer(combined);
  AffordanceMap map;
  map.scores.resize(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    map.scores(i) = sigmoid(logits(i, 0));
  }
  return map;
}

Vec CPNet::scores_recording(const Mat& points) {
  check_cloud(points);
  features_ = point_net_.forward(points);
  const Mat combined = pooled_input(points, features_, local_radius_,
                                    &local_argmax_, &global_argmax_);
  const Mat logits = head_.forward(combined);
  scores_.resize(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    scores_(i) = sigmoid(logits(i, 0));
  }
  trace_valid_ = true;
  return scores_;
}

void CPNet::backward_scores(const Vec& dscores) {
  if (!trace_valid_) {
    throw std::logic_error("backward_scores without a recorded forward");
  }
  if (dscores.size() != scores_.size()) {
    throw std::invalid_argument("score gradient has the wrong length");
  }
  const auto n = scores_.size();
  const auto dim = static_cast<Eigen::Index>(feature_dim_);

  Mat dlogits(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    dlogits(i, 0) = dscores(i) * scores_(i) * (1.0 - scores_(i));
  }
  const Mat dcombined = head_.backward(dlogits);

  Mat dfeatures = dcombined.leftCols(dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < dim; ++c) {
      dfeatures(local_argmax_[static_cast<std::size_t>(i)]
                             [static_cast<std::size_t>(c)],
                c) += dcombined(i, dim + c);
    }
  }
  for (Eigen::Index c = 0; c < dim; ++c) {
    dfeatures(global_argmax_[static_cast<std::size_t>(c)], c) +=
        dcombined.col(2 * dim + c).sum();
  }
  point_net_.backward(dfeatures);
  trace_valid_ = false;
}

void CPNet::zero_grad() {
  point_net_.zero_grad();
  head_.zero_grad();
}

std::vector<nn::ParamBlock> CPNet::param_blocks() {
  auto blocks = point_net_.param_blocks();
  auto head_blocks = head_.param_blocks();
  blocks.insert(blocks.end(), head_blocks.begin(), head_blocks.end());
  return blocks;
}

nn::NamedTensors CPNet::to_tensors(const std::string& prefix) const {
  nn::NamedTensors out = point_net_.to_tensors(prefix + ".points");
  nn::NamedTensors head = head_.to_tensors(prefix + ".head");
  out.insert(out.end(), std::make_move_iterator(head.begin()),
             std::make_move_iterator(head.end()));
  return out;
}

void CPNet::load_tensors(const nn::Checkpoint& ckpt,
                         const std::string& prefix) {
  point_net_.load_tensors(ckpt, prefix + ".points");
  head_.load_tensors(ckpt, prefix + ".head");
}

// ═══════════════════════════════════════════════════════════════════════════
// Selection and reward
// ═══════════════════════════════════════════════════════════════════════════

AffordanceMap score_points(const Mat& points, const CPNet& net) {
  return net.score(points);
}

Vec2 select_mpo(const AffordanceMap& map, const Mat& points, int k) {
  check_cloud(points);
  const auto selected = top_k_indices(map.scores, points, k);
  Vec2 mean = Vec2::Zero();
  for (Eigen::Index i : selected) {
    mean += Vec2(points.row(i).transpose());
  }
  return mean / static_cast<double>(selected.size());
}

double mpr_reward(const Vec2& o_mp, const Vec2& s_eff, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("eps must be positive");
  return 1.0 / std::max((o_mp - s_eff).norm(), eps);
}

// ═══════════════════════════════════════════════════════════════════════════
// Contact evidence
// ═══════════════════════════════════════════════════════════════════════════

ContactLog::ContactLog(std::size_t window) : window_(window) {
  if (window_ == 0) throw std::invalid_argument("window must be positive");
}

void ContactLog::add_episode(int object_id, const std::vector<Vec2>& eff_path,
                             const std::vector<std::uint8_t>& grasp_path,
                             bool success, int episode,
                             const Mat& object_points) {
  if (eff_path.empty() || grasp_path.size() != eff_path.size()) {
    throw std::invalid_argument("episode path and grasp flags must align");
  }
  check_cloud(object_points);

  Episode entry;
  entry.success = success;
  for (std::size_t t = 0; t < grasp_path.size(); ++t) {
    if (grasp_path[t] && (t == 0 || !grasp_path[t - 1])) {
      entry.contacts.push_back({eff_path[t], episode});  // first engagement
      break;
    }
  }
  entry.contacts.push_back({eff_path.back(), episode});

  auto& window = by_object_[object_id];
  window.push_back(std::move(entry));
  if (window.size() > window_) window.pop_front();
  latest_cloud_[object_id] = object_points;
  ++episodes_logged_;
}

std::vector<ContactRecord> ContactLog::records() const {
  std::vector<ContactRecord> out;
  for (const auto& [object_id, window] : by_object_) {
    ContactRecord record;
    record.object_id = object_id;
    std::size_t successes = 0;
    for (const Episode& episode : window) {
      successes += episode.success;
      record.contacts.insert(record.contacts.end(),
                             episode.contacts.begin(),
                             episode.contacts.end());
    }
    record.sr = static_cast<double>(successes) /
                static_cast<double>(window.size());
    record.object_points = latest_cloud_.at(object_id);
    record.validate();
    out.push_back(std::move(record));
  }
  return out;
}

double ContactLog::global_success_rate() const {
  std::size_t successes = 0;
  std::size_t total = 0;
  for (const auto& [object_id, window] : by_object_) {
    (void)object_id;
    for (const Episode& episode : window) {
      successes += episode.success;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(successes) /
                                static_cast<double>(total);
}

void ContactLog::export_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open contact CSV for writing: " + path);
  }
  out << "object_id,sr,contact_x,contact_y,episode\n";
  char buffer[128];
  for (const ContactRecord& record : records()) {
    for (const ContactEvent& event : record.contacts) {
      std::snprintf(buffer, sizeof buffer, "%d,%.17g,%.17g,%.17g,%d\n",
                    record.object_id, record.sr, event.position.x(),
                    event.position.y(), event.episode);
      out << buffer;
    }
  }
  if (!out) throw std::runtime_error("failed writing contact CSV: " + path);
}

// ═══════════════════════════════════════════════════════════════════════════
// Planner refit
// ═══════════════════════════════════════════════════════════════════════════

double soft_mpo_loss(const CPNet& net,
                     const std::vector<ContactRecord>& records, int k,
                     double temperature) {
  validate_refit_args(k, temperature);
  double loss = 0.0;
  for (const ContactRecord& record : records) {
    record.validate();
    if (record.sr == 0.0) continue;
    const AffordanceMap map = net.score(record.object_points);
    const SoftSelection sel =
        soft_select(map.scores, record.object_points, k, temperature);
    loss += record.sr * (sel.point - record.contacts_mean()).squaredNorm();
  }
  return loss;
}

double soft_mpo_loss_backward(CPNet& net,
                              const std::vector<ContactRecord>& records,
                              int k, double temperature) {
  validate_refit_args(k, temperature);
  double loss = 0.0;
  for (const ContactRecord& record : records) {
    record.validate();
    if (record.sr == 0.0) continue;
    const Vec scores = net.scores_recording(record.object_points);
    const SoftSelection sel =
        soft_select(scores, record.object_points, k, temperature);
    const Vec2 target = record.contacts_mean();
    const Vec2 residual = sel.point - target;
    loss += record.sr * residual.squaredNorm();

    // d loss / d consensus, then through the softmax weights onto the
    // selected scores; unselected points get exactly zero.
    const Vec2 dpoint = 2.0 * record.sr * residual;
    const auto kk = static_cast<Eigen::Index>(sel.set.size());
    Vec dweights(kk);
    for (Eigen::Index i = 0; i < kk; ++i) {
      dweights(i) = dpoint.dot(
          Vec2(record.object_points
                   .row(sel.set[static_cast<std::size_t>(i)])
                   .transpose()));
    }
    const double mixed = sel.weights.dot(dweights);
    Vec dscores = Vec::Zero(scores.size());
    for (Eigen::Index i = 0; i < kk; ++i) {
      dscores(sel.set[static_cast<std::size_t>(i)]) =
          sel.weights(i) * (dweights(i) - mixed) / temperature;
    }
    net.backward_scores(dscores);
  }
  return loss;
}

PlannerUpdateReport update_planner(CPNet& net,
                                   const std::vector<ContactRecord>& records,
                                   double lr, int steps, int k,
                                   double temperature) {
  validate_refit_args(k, temperature);
  if (lr <= 0.0 || steps < 1) {
    throw std::invalid_argument("refit needs a positive lr and step count");
  }
  PlannerUpdateReport report;
  report.steps = steps;

  bool any_successful = false;
  for (const ContactRecord& record : records) {
    record.validate();
    any_successful |= record.sr > 0.0;
  }
  if (!any_successful) return report;  // bitwise no-op on the network
  report.stepped = true;

  nn::Adam optimizer(lr);
  auto blocks = net.param_blocks();
  for (int step = 0; step < steps; ++step) {
    net.zero_grad();
    const double loss = soft_mpo_loss_backward(net, records, k, temperature);
    if (step == 0) report.initial_loss = loss;
    optimizer.step(blocks);
  }
  report.final_loss = soft_mpo_loss(net, records, k, temperature);
  return report;
}

}  // namespace taskdp::cp
