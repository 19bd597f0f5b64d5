#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "taskdp/contact_planner.hpp"
#include "taskdp/tensor.hpp"

using namespace taskdp::cp;
using taskdp::Rng;
using taskdp::env::ArticulatedObject;
using taskdp::nn::Mat;
using taskdp::nn::Vec;

namespace fs = std::filesystem;

namespace {

// Dense zero-jitter object cloud: lid segment plus base segment.
Mat object_cloud(const ArticulatedObject& object, double theta,
                 int per_segment = 96) {
  const taskdp::env::Vec2 dir = taskdp::env::lid_dir(object, theta);
  const taskdp::env::Vec2 base_dir = taskdp::env::lid_dir(object, 0.0);
  Mat cloud(2 * per_segment, 2);
  for (int i = 0; i < per_segment; ++i) {
    const double s = static_cast<double>(i) / (per_segment - 1);
    cloud.row(i) = (object.hinge + s * object.lid_length * dir).transpose();
    cloud.row(per_segment + i) =
        (object.hinge - s * object.lid_length * base_dir).transpose();
  }
  return cloud;
}

ArticulatedObject demo_object() {
  ArticulatedObject object;
  object.hinge = {0.2, 0.3};
  object.lid_length = 0.5;
  object.handle_frac = 0.8;
  object.theta_max = 1.5;
  return object;
}

ContactRecord handle_record(const ArticulatedObject& object, double theta,
                            double sr) {
  ContactRecord record;
  record.object_id = 0;
  record.sr = sr;
  const Vec2 handle = taskdp::env::handle_position(object, theta);
  record.contacts = {{handle, 0}, {handle, 1}};
  record.object_points = object_cloud(object, theta);
  return record;
}

}  // namespace

// ═══════════════════════════════════════════════════════════════════════════
// Selection and reward
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("selection: hand-computed top-K means") {
  Mat points(4, 2);
  points << 0, 0, 1, 0, 5, 5, 6, 6;
  AffordanceMap map;
  map.scores.resize(4);
  map.scores << 0.9, 0.8, 0.1, 0.1;

  Vec2 top2 = select_mpo(map, points, 2);
  CHECK(top2.x() == 0.5);
  CHECK(top2.y() == 0.0);

  Vec2 top1 = select_mpo(map, points, 1);
  CHECK(top1.x() == 0.0);
  CHECK(top1.y() == 0.0);

  map.scores.setConstant(0.4);
  Vec2 centroid = select_mpo(map, points, 4);
  CHECK(centroid.x() == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(centroid.y() == doctest::Approx(2.75).epsilon(1e-15));

  CHECK_THROWS_AS((void)select_mpo(map, points, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)select_mpo(map, points, 5), std::invalid_argument);
  map.scores.resize(3);
  CHECK_THROWS_AS((void)select_mpo(map, points, 2), std::invalid_argument);
}

TEST_CASE("selection: permuting rows leaves the answer bitwise unchanged") {
  Rng rng(17);
  Mat points(12, 2);
  Vec scores(12);
  for (int i = 0; i < 12; ++i) {
    points(i, 0) = rng.uniform(-1.0, 1.0);
    points(i, 1) = rng.uniform(-1.0, 1.0);
    scores(i) = (i % 3 == 0) ? 0.7 : rng.uniform();  // include exact ties
  }
  AffordanceMap map{scores};
  const Vec2 reference = select_mpo(map, points, 5);

  std::vector<int> perm{7, 2, 9, 0, 11, 4, 1, 10, 3, 8, 5, 6};
  Mat shuffled(12, 2);
  AffordanceMap shuffled_map;
  shuffled_map.scores.resize(12);
  for (int i = 0; i < 12; ++i) {
    shuffled.row(i) = points.row(perm[i]);
    shuffled_map.scores(i) = scores(perm[i]);
  }
  const Vec2 permuted = select_mpo(shuffled_map, shuffled, 5);
  CHECK(permuted.x() == reference.x());
  CHECK(permuted.y() == reference.y());
}

TEST_CASE("reward: inverse distance with a singularity guard") {
  const Vec2 origin(0.0, 0.0);
  CHECK(mpr_reward(origin, Vec2(0.5, 0.0)) == 2.0);
  CHECK(mpr_reward(origin, Vec2(0.0, 2.0)) == 0.5);
  CHECK(mpr_reward(origin, origin) == 20.0);  // 1 / eps at distance zero
  CHECK(mpr_reward(origin, Vec2(0.03, 0.0)) == 20.0);

  CHECK(mpr_reward(origin, Vec2(0.3, 0.0)) >
        mpr_reward(origin, Vec2(0.31, 0.0)));
  CHECK_THROWS_AS((void)mpr_reward(origin, origin, 0.0),
                  std::invalid_argument);
}

// ═══════════════════════════════════════════════════════════════════════════
// Scoring network
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("scoring: zero init gives exactly one half everywhere") {
  CPNet net(16, 0.15);
  Mat cloud = object_cloud(demo_object(), 0.4, 24);
  AffordanceMap map = net.score(cloud);
  REQUIRE(map.scores.size() == cloud.rows());
  for (Eigen::Index i = 0; i < map.scores.size(); ++i) {
    CHECK(map.scores(i) == 0.5);
  }
}

TEST_CASE("scoring: sigmoid range and permutation equivariance") {
  Rng rng(23);
  CPNet net = CPNet::xavier(16, 0.15, rng);
  Mat cloud = object_cloud(demo_object(), 0.8, 32);

  AffordanceMap map = net.score(cloud);
  for (Eigen::Index i = 0; i < map.scores.size(); ++i) {
    CHECK(map.scores(i) > 0.0);
    CHECK(map.scores(i) < 1.0);
  }

  Mat reversed = cloud.colwise().reverse();
  AffordanceMap reversed_map = net.score(reversed);
  CHECK(map.scores.reverse().eval() == reversed_map.scores);
}

TEST_CASE("scoring: checkpoint round trip is bitwise") {
  Rng rng(29);
  CPNet net = CPNet::xavier(16, 0.15, rng);
  const fs::path path = fs::temp_directory_path() / "taskdp_cp_test.ckpt";
  taskdp::nn::save_checkpoint(path.string(), "cp", net.to_tensors("cp"));

  CPNet restored(16, 0.15);
  restored.load_tensors(taskdp::nn::load_checkpoint(path.string()), "cp");
  fs::remove(path);

  Mat cloud = object_cloud(demo_object(), 0.4, 16);
  CHECK(net.score(cloud).scores == restored.score(cloud).scores);
}

// ═══════════════════════════════════════════════════════════════════════════
// Refit loss
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("refit: gradients match finite differences") {
  Rng rng(37);
  CPNet net = CPNet::xavier(8, 0.3, rng);

  Mat cloud(10, 2);
  for (int i = 0; i < 10; ++i) {
    cloud(i, 0) = rng.uniform(-1.0, 1.0);
    cloud(i, 1) = rng.uniform(-1.0, 1.0);
  }
  ContactRecord active;
  active.object_id = 0;
  active.sr = 0.7;
  active.contacts = {{Vec2(0.2, -0.1), 3}, {Vec2(0.4, 0.0), 3}};
  active.object_points = cloud;
  ContactRecord inert;  // sr = 0, must contribute nothing
  inert.object_id = 1;
  std::vector<ContactRecord> records{active, inert};

  net.zero_grad();
  const double loss = soft_mpo_loss_backward(net, records, 4, 0.1);
  CHECK(loss == soft_mpo_loss(net, records, 4, 0.1));

  auto blocks = net.param_blocks();
  const double err = taskdp::nn::gradcheck_max_rel_err(
      [&] { return soft_mpo_loss(net, records, 4, 0.1); }, blocks);
  CHECK(err < 1e-3);
}

TEST_CASE("refit: all-failure records leave the network bitwise untouched") {
  Rng rng(41);
  CPNet net = CPNet::xavier(8, 0.3, rng);
  const auto before = net.to_tensors("cp");

  ContactRecord failure = handle_record(demo_object(), 0.4, 0.0);
  failure.contacts.clear();  // sr = 0 may come with no contacts
  PlannerUpdateReport report =
      update_planner(net, {failure}, 1e-2, 50);
  CHECK_FALSE(report.stepped);

  const auto after = net.to_tensors("cp");
  REQUIRE(after.size() == before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(after[i].second.data == before[i].second.data);
  }
}

TEST_CASE("refit: record validation") {
  ContactRecord record = handle_record(demo_object(), 0.4, 1.2);
  CHECK_THROWS_AS(record.validate(), std::invalid_argument);

  record.sr = 0.5;
  record.contacts.clear();
  CHECK_THROWS_AS(record.validate(), std::invalid_argument);

  record = handle_record(demo_object(), 0.4, 1.0);
  record.object_points.resize(0, 2);
  CHECK_THROWS_AS(record.validate(), std::invalid_argument);

  // K larger than the record's cloud cannot be selected.
  ContactRecord tiny = handle_record(demo_object(), 0.4, 1.0);
  tiny.object_points = Mat::Zero(4, 2);
  CPNet net(8, 0.3);
  CHECK_THROWS_AS((void)soft_mpo_loss(net, {tiny}, 8, 0.1),
                  std::invalid_argument);
}

TEST_CASE("refit: a single successful record pulls the planner onto the "
          "handle") {
  ArticulatedObject object = demo_object();
  const double theta = 0.4;
  const Vec2 handle = taskdp::env::handle_position(object, theta);

  Rng rng(43);
  CPNet net = CPNet::xavier(32, 0.15, rng);
  std::vector<ContactRecord> records{handle_record(object, theta, 1.0)};

  PlannerUpdateReport report = update_planner(net, records, 1e-2, 600);
  CHECK(report.stepped);
  CHECK(report.final_loss < report.initial_loss);

  const Mat cloud = records[0].object_points;
  const AffordanceMap map = net.score(cloud);
  const Vec2 o_mp = select_mpo(map, cloud, kDefaultTopK);
  CHECK((o_mp - handle).norm() <= 0.05);

  // Actionability concentrates where the contacts were recorded.
  double near_sum = 0.0, far_sum = 0.0;
  int near_count = 0, far_count = 0;
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    const Vec2 p = cloud.row(i).transpose();
    if ((p - handle).norm() <= 0.05) {
      near_sum += map.scores(i);
      ++near_count;
    } else {
      far_sum += map.scores(i);
      ++far_count;
    }
  }
  REQUIRE(near_count > 0);
  REQUIRE(far_count > 0);
  CHECK(near_sum / near_count > far_sum / far_count);
}

TEST_CASE("refit: two equally successful targets settle on their midpoint") {
  Mat cloud(101, 2);
  for (int i = 0; i <= 100; ++i) {
    cloud(i, 0) = static_cast<double>(i) / 100.0;
    cloud(i, 1) = 0.0;
  }
  ContactRecord left;
  left.object_id = 0;
  left.sr = 1.0;
  left.contacts = {{Vec2(0.3, 0.0), 0}};
  left.object_points = cloud;
  ContactRecord right = left;
  right.object_id = 1;
  right.contacts = {{Vec2(0.7, 0.0), 1}};

  Rng rng(47);
  CPNet net = CPNet::xavier(32, 0.15, rng);
  update_planner(net, {left, right}, 1e-2, 600);

  const Vec2 o_mp = select_mpo(net.score(cloud), cloud, kDefaultTopK);
  CHECK((o_mp - Vec2(0.5, 0.0)).norm() <= 0.05);
}

// ═══════════════════════════════════════════════════════════════════════════
// Contact log
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("log: first grasp engagement and terminal position are recorded") {
  ContactLog log(20);
  Mat cloud = Mat::Zero(8, 2);
  std::vector<Vec2> path{{0.0, 0.0}, {0.1, 0.0}, {0.2, 0.0},
                         {0.3, 0.0}, {0.4, 0.0}, {0.5, 0.0}};
  std::vector<std::uint8_t> grasp{0, 0, 1, 1, 0, 1};  // engages at t = 2
  log.add_episode(7, path, grasp, true, 11, cloud);

  auto records = log.records();
  REQUIRE(records.size() == 1);
  CHECK(records[0].object_id == 7);
  CHECK(records[0].sr == 1.0);
  REQUIRE(records[0].contacts.size() == 2);
  CHECK(records[0].contacts[0].position.x() == 0.2);
  CHECK(records[0].contacts[0].episode == 11);
  CHECK(records[0].contacts[1].position.x() == 0.5);

  // Without any grasp only the terminal position appears.
  ContactLog no_grasp(20);
  no_grasp.add_episode(7, path, {0, 0, 0, 0, 0, 0}, false, 12, cloud);
  auto no_grasp_records = no_grasp.records();
  REQUIRE(no_grasp_records[0].contacts.size() == 1);
  CHECK(no_grasp_records[0].contacts[0].position.x() == 0.5);

  CHECK_THROWS_AS(
      log.add_episode(7, {}, {}, false, 0, cloud), std::invalid_argument);
  CHECK_THROWS_AS(
      log.add_episode(7, path, {0, 0}, false, 0, cloud),
      std::invalid_argument);
}

TEST_CASE("log: success rates over the trailing window") {
  ContactLog log(4);
  Mat cloud = Mat::Zero(4, 2);
  std::vector<Vec2> path{{0.0, 0.0}};
  std::vector<std::uint8_t> grasp{1};

  // Object 0: failures beyond the window, then 3 successes of the last 4.
  for (int e = 0; e < 6; ++e) {
    log.add_episode(0, path, grasp, e >= 3, e, cloud);
  }
  // Object 1: all failures.
  for (int e = 0; e < 4; ++e) {
    log.add_episode(1, path, grasp, false, e, cloud);
  }

  auto records = log.records();
  REQUIRE(records.size() == 2);
  CHECK(records[0].sr == 0.75);
  CHECK(records[1].sr == 0.0);
  CHECK(log.global_success_rate() == doctest::Approx(3.0 / 8.0));
  CHECK(log.episodes_logged() == 10);

  ContactLog empty(4);
  CHECK(empty.global_success_rate() == 0.0);
}

TEST_CASE("log: CSV export") {
  ContactLog log(20);
  Mat cloud = Mat::Zero(4, 2);
  log.add_episode(3, {{0.25, -0.5}}, {1}, true, 9, cloud);

  const fs::path path = fs::temp_directory_path() / "taskdp_cp_test.csv";
  log.export_csv(path.string());

  std::ifstream in(path);
  std::string header, engagement, terminal, extra;
  REQUIRE(std::getline(in, header));
  CHECK(header == "object_id,sr,contact_x,contact_y,episode");
  // The grasp engaged on the only step, so the engagement contact and the
  // terminal contact coincide.
  REQUIRE(std::getline(in, engagement));
  CHECK(engagement == "3,1,0.25,-0.5,9");
  REQUIRE(std::getline(in, terminal));
  CHECK(terminal == engagement);
  CHECK_FALSE(std::getline(in, extra));
  fs::remove(path);
}
