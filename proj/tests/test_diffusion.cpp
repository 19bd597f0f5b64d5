#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <vector>

#include "taskdp/diffusion.hpp"
#include "taskdp/tensor.hpp"

using namespace taskdp::diff;
using taskdp::Rng;
using taskdp::nn::Mat;
using taskdp::nn::Vec;

namespace fs = std::filesystem;

namespace {

EstimatorFn silent_estimator() {
  return [](const Vec& action, const Vec&, std::size_t) {
    return Vec(Vec::Zero(action.size()));
  };
}

EstimatorFn constant_estimator(double c) {
  return [c](const Vec& action, const Vec&, std::size_t) {
    return Vec(Vec::Constant(action.size(), c));
  };
}

Vec vec1(double a) { return Vec::Constant(1, a); }

// A transition whose observations are bare proprioception-sized vectors;
// vision and task stay empty so the flattened width is obs.size().
AugmentedTransition bare_transition(const Vec& obs, const Vec& action,
                                    double reward, const Vec& next_obs,
                                    bool done) {
  AugmentedTransition t;
  t.obs.vision = Vec(0);
  t.obs.task = Vec(0);
  t.obs.contact = Vec2::Zero();
  t.obs.prop = obs;
  t.action = action;
  t.reward = reward;
  t.next_obs.vision = Vec(0);
  t.next_obs.task = Vec(0);
  t.next_obs.contact = Vec2::Zero();
  t.next_obs.prop = next_obs;
  t.done = done;
  return t;
}

double fd_loss_rel_err(double fd, double an) {
  return std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-9);
}

}  // namespace

// ═══════════════════════════════════════════════════════════════════════════
// Noise schedule
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("linear beta schedule obeys its construction") {
  const NoiseSchedule s = make_schedule(10, 1e-4, 0.2);
  REQUIRE(s.steps() == 10);
  CHECK(s.alpha_at(1) == 1.0 - 1e-4);
  CHECK(s.alpha_at(10) == 1.0 - 0.2);
  for (std::size_t k = 1; k <= 10; ++k) {
    CHECK(s.alpha_at(k) > 0.0);
    CHECK(s.alpha_at(k) <= 1.0);
    if (k > 1) {
      CHECK(s.alpha_at(k) < s.alpha_at(k - 1));
      CHECK(s.alpha_bar_at(k) < s.alpha_bar_at(k - 1));
      CHECK(s.alpha_bar_at(k) == s.alpha_at(k) * s.alpha_bar_at(k - 1));
    }
  }
  CHECK(s.alpha_bar_at(1) == s.alpha_at(1));
  CHECK(s.alpha_bar_at(10) > 0.0);

  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(5, 0.0, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(5, 0.3, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(5, 1e-4, 1.0), std::invalid_argument);
}

TEST_CASE("explicit alpha schedules reproduce hand products") {
  const NoiseSchedule ones = schedule_from_alphas({1.0, 1.0, 1.0});
  CHECK(ones.alpha_bar == std::vector<double>{1.0, 1.0, 1.0});

  const NoiseSchedule two = schedule_from_alphas({0.9, 0.8});
  CHECK(two.alpha_bar_at(1) == 0.9);
  CHECK(two.alpha_bar_at(2) == 0.9 * 0.8);
  CHECK(two.alpha_bar_at(2) == doctest::Approx(0.72));

  CHECK_THROWS_AS(two.alpha_at(0), std::out_of_range);
  CHECK_THROWS_AS(two.alpha_at(3), std::out_of_range);
  CHECK_THROWS_AS(two.alpha_bar_at(0), std::out_of_range);
  CHECK_THROWS_AS(schedule_from_alphas({}), std::invalid_argument);
  CHECK_THROWS_AS(schedule_from_alphas({0.5, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS(schedule_from_alphas({1.1}), std::invalid_argument);
}

// ═══════════════════════════════════════════════════════════════════════════
// Conditioning input and batches
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("observation tuple flattens in declared order") {
  ObservationTuple obs;
  obs.vision = Vec{{1.0, 2.0}};
  obs.task = Vec{{3.0}};
  obs.contact = {4.0, 5.0};
  obs.prop = Vec{{6.0, 7.0, 8.0, 9.0}};
  REQUIRE(obs.dim() == 9);
  const Vec flat = obs.concat();
  for (int i = 0; i < 9; ++i) {
    CHECK(flat(i) == static_cast<double>(i + 1));
  }

  obs.task(0) = std::nan("");
  CHECK_THROWS_AS(obs.concat(), std::invalid_argument);
}

TEST_CASE("transition batches stack into aligned matrices") {
  std::vector<AugmentedTransition> batch;
  batch.push_back(bare_transition(Vec{{1.0, 2.0}}, vec1(0.5), 0.25,
                                  Vec{{3.0, 4.0}}, false));
  batch.push_back(bare_transition(Vec{{5.0, 6.0}}, vec1(-0.5), 1.0,
                                  Vec{{7.0, 8.0}}, true));

  const Mat obs = obs_matrix(batch);
  const Mat next = next_obs_matrix(batch);
  const Mat actions = action_matrix(batch);
  REQUIRE(obs.rows() == 2);
  REQUIRE(obs.cols() == 4);  // contact zeros in columns 0-1, prop after
  CHECK(obs(0, 2) == 1.0);
  CHECK(obs(1, 3) == 6.0);
  CHECK(next(0, 2) == 3.0);
  CHECK(next(1, 3) == 8.0);
  CHECK(actions(0, 0) == 0.5);
  CHECK(actions(1, 0) == -0.5);

  batch.push_back(bare_transition(Vec{{1.0}}, vec1(0.0), 0.0, Vec{{1.0}},
                                  false));
  CHECK_THROWS_AS(obs_matrix(batch), std::invalid_argument);
  CHECK_THROWS_AS(obs_matrix(std::span<const AugmentedTransition>{}),
                  std::invalid_argument);
}

// ═══════════════════════════════════════════════════════════════════════════
// Reverse denoising sampler
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("identity schedule with a silent estimator returns the start") {
  const NoiseSchedule s = schedule_from_alphas({1.0, 1.0, 1.0});
  const Vec start{{0.3, -0.7}};
  Mat trace;
  const Vec out = denoise(start, Vec(0), s, silent_estimator(),
                          /*deploy=*/true, nullptr, &trace);
  CHECK(out == start);
  REQUIRE(trace.rows() == 4);
  CHECK(trace.row(0) == start.transpose());
  CHECK(trace.row(3) == out.transpose());
}

TEST_CASE("one reverse step matches hand arithmetic") {
  const NoiseSchedule s = schedule_from_alphas({0.81});
  const Vec out = denoise(vec1(0.5), Vec(0), s, constant_estimator(0.2),
                          /*deploy=*/true, nullptr);
  CHECK(out(0) == doctest::Approx(0.45869113458798505).epsilon(1e-12));
}

TEST_CASE("the coefficient sweep runs from the last step down to the first") {
  const NoiseSchedule s = schedule_from_alphas({0.9, 0.8});
  const Vec out = denoise(vec1(0.3), Vec(0), s, constant_estimator(0.1),
                          /*deploy=*/true, nullptr);
  CHECK(out(0) == doctest::Approx(0.27567651694120304).epsilon(1e-12));
  // Sweeping 1 -> K instead would land at 0.27402787823185148.
  CHECK(std::abs(out(0) - 0.27402787823185148) > 1e-4);
}

TEST_CASE("the emitted action is clamped to the box") {
  const NoiseSchedule s = schedule_from_alphas({1.0});
  const Vec out = denoise(Vec{{5.0, -3.0}}, Vec(0), s, silent_estimator(),
                          /*deploy=*/true, nullptr);
  CHECK(out(0) == kActionBound);
  CHECK(out(1) == -kActionBound);
}

TEST_CASE("exploration noise enters at every step including the last") {
  const NoiseSchedule s = schedule_from_alphas({0.8});
  Rng rng(7);
  const Vec out = denoise(vec1(0.0), Vec(0), s, silent_estimator(),
                          /*deploy=*/false, &rng);
  Rng replay(7);
  const double expected = std::sqrt((1.0 - 0.8) / 0.8) * replay.normal();
  CHECK(out(0) == std::clamp(expected, -kActionBound, kActionBound));
  CHECK(out(0) != 0.0);

  CHECK_THROWS_AS(denoise(vec1(0.0), Vec(0), s, silent_estimator(),
                          /*deploy=*/false, nullptr),
                  std::invalid_argument);
}

TEST_CASE("deploy sampling is bitwise deterministic") {
  Rng init(3);
  const NoiseEstimator estimator =
      NoiseEstimator::xavier(3, 5, 10, 32, 16, init);
  const NoiseSchedule s = make_schedule();
  Vec obs(5);
  for (int i = 0; i < 5; ++i) obs(i) = init.normal();

  Rng a(42), b(42), c(42);
  const Vec first = sample_action(obs, s, estimator, /*deploy=*/true, a);
  const Vec second = sample_action(obs, s, estimator, /*deploy=*/true, b);
  CHECK(first == second);

  const Vec explored = sample_action(obs, s, estimator, /*deploy=*/false, c);
  CHECK(explored != first);

  Rng d(42);
  const Vec explored_again =
      sample_action(obs, s, estimator, /*deploy=*/false, d);
  CHECK(explored == explored_again);
}

TEST_CASE("the batched sampler agrees with the single-row path") {
  Rng init(14);
  const NoiseEstimator estimator =
      NoiseEstimator::xavier(3, 4, 10, 16, 8, init);
  const NoiseSchedule s = make_schedule();
  Mat obs(1, 4);
  obs << 0.3, -0.2, 0.5, 0.1;

  // A one-row batch consumes the rng in the same order as the single-row
  // sampler, so the two paths coincide bitwise.
  Rng a(91), b(91);
  const Mat batched = sample_actions(obs, s, estimator, /*deploy=*/false, a);
  const Vec single = sample_action(obs.row(0).transpose(), s, estimator,
                                   /*deploy=*/false, b);
  CHECK(batched.row(0).transpose() == single);

  Mat wide(5, 4);
  Rng fill(92);
  for (Eigen::Index r = 0; r < 5; ++r) {
    for (Eigen::Index c = 0; c < 4; ++c) wide(r, c) = fill.normal();
  }
  Rng c1(93), c2(93);
  const Mat first = sample_actions(wide, s, estimator, /*deploy=*/true, c1);
  const Mat second = sample_actions(wide, s, estimator, /*deploy=*/true, c2);
  CHECK(first == second);
  CHECK((first.array().abs() <= kActionBound).all());

  CHECK_THROWS_AS(sample_actions(Mat(0, 4), s, estimator, true, c1),
                  std::invalid_argument);
}

TEST_CASE("sampler traces round-trip through the CSV dump") {
  Mat trace(2, 2);
  trace << 0.5, -1.0, 0.25, 0.125;
  const fs::path path = fs::temp_directory_path() / "taskdp_diff_trace.csv";
  save_sampler_trace(trace, path.string());

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "step,a0,a1");
  char expected[128];
  for (int r = 0; r < 2; ++r) {
    REQUIRE(std::getline(in, line));
    std::snprintf(expected, sizeof expected, "%d,%.17g,%.17g", r, trace(r, 0),
                  trace(r, 1));
    CHECK(line == expected);
  }
  CHECK_FALSE(std::getline(in, line));
  fs::remove(path);
}

// ═══════════════════════════════════════════════════════════════════════════
// Estimator regression
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("corruption uses the cumulative schedule") {
  const NoiseSchedule s = make_schedule();
  Rng rng(5);
  Mat actions(64, 2);
  Mat obs(64, 1);
  for (Eigen::Index r = 0; r < actions.rows(); ++r) {
    actions(r, 0) = rng.uniform(-1.0, 1.0);
    actions(r, 1) = rng.uniform(-1.0, 1.0);
    obs(r, 0) = rng.normal();
  }
  const CorruptedBatch batch = corrupt_actions(actions, obs, s, rng);
  REQUIRE(batch.ks.size() == 64);
  bool past_first_step = false;
  for (Eigen::Index r = 0; r < actions.rows(); ++r) {
    const std::size_t k = batch.ks[static_cast<std::size_t>(r)];
    REQUIRE(k >= 1);
    REQUIRE(k <= 10);
    past_first_step = past_first_step || k > 1;
    const double keep = std::sqrt(s.alpha_bar_at(k));
    const double spread = std::sqrt(1.0 - s.alpha_bar_at(k));
    for (Eigen::Index c = 0; c < 2; ++c) {
      // Tolerance covers fused-multiply-add contraction only; using the
      // per-step coefficient instead of the cumulative one would be off by
      // around 1e-2.
      CHECK(std::abs(batch.corrupted(r, c) -
                     (keep * actions(r, c) + spread * batch.noise(r, c))) <=
            1e-12);
    }
  }
  CHECK(past_first_step);
  CHECK(batch.obs == obs);

  Mat outside = actions;
  outside(0, 0) = 1.5;
  CHECK_THROWS_AS(corrupt_actions(outside, obs, s, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(corrupt_actions(Mat(0, 2), Mat(0, 1), s, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(corrupt_actions(actions, Mat(3, 1), s, rng),
                  std::invalid_argument);
}

TEST_CASE("a silent estimator's loss matches the noise dimension") {
  NoiseEstimator estimator(3, 4);  // zero weights predict exactly zero
  const NoiseSchedule s = make_schedule();
  Rng rng(9);
  const Mat actions = Mat::Zero(10000, 3);
  const Mat obs = Mat::Zero(10000, 4);
  const CorruptedBatch batch = corrupt_actions(actions, obs, s, rng);
  estimator.zero_grad();
  const double loss = estimator_loss_backward(estimator, batch);
  CHECK(loss == doctest::Approx(3.0).epsilon(0.05));
}

TEST_CASE("an estimator that returns the noise has zero loss") {
  const NoiseSchedule s = make_schedule();
  Rng rng(10);
  Mat actions(8, 2);
  for (Eigen::Index r = 0; r < 8; ++r) {
    actions(r, 0) = rng.uniform(-1.0, 1.0);
    actions(r, 1) = rng.uniform(-1.0, 1.0);
  }
  const CorruptedBatch batch =
      corrupt_actions(actions, Mat::Zero(8, 1), s, rng);
  CHECK(noise_loss(batch.noise, batch.noise) == 0.0);
  CHECK(noise_loss(Mat::Zero(8, 2), batch.noise) > 0.0);
  CHECK_THROWS_AS(noise_loss(Mat::Zero(8, 2), Mat::Zero(7, 2)),
                  std::invalid_argument);
}

TEST_CASE("estimator gradients match finite differences") {
  Rng rng(21);
  NoiseEstimator estimator = NoiseEstimator::xavier(2, 3, 5, 8, 4, rng);
  const NoiseSchedule s = make_schedule(5, 1e-2, 0.2);
  Mat actions(6, 2);
  Mat obs(6, 3);
  for (Eigen::Index r = 0; r < 6; ++r) {
    actions(r, 0) = rng.uniform(-1.0, 1.0);
    actions(r, 1) = rng.uniform(-1.0, 1.0);
    for (Eigen::Index c = 0; c < 3; ++c) obs(r, c) = rng.normal();
  }
  const CorruptedBatch batch = corrupt_actions(actions, obs, s, rng);

  estimator.zero_grad();
  estimator_loss_backward(estimator, batch);
  const auto loss_fn = [&]() {
    Mat predicted(batch.corrupted.rows(), 2);
    for (Eigen::Index r = 0; r < predicted.rows(); ++r) {
      predicted.row(r) =
          estimator
              .predict(batch.corrupted.row(r).transpose(),
                       batch.obs.row(r).transpose(),
                       batch.ks[static_cast<std::size_t>(r)])
              .transpose();
    }
    return noise_loss(predicted, batch.noise);
  };
  const std::vector<taskdp::nn::ParamBlock> blocks = estimator.param_blocks();
  CHECK(taskdp::nn::gradcheck_max_rel_err(loss_fn, blocks) <= 1e-3);
}

// ═══════════════════════════════════════════════════════════════════════════
// Critic
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("critic target stays synced and blends by the Polyak rule") {
  Rng rng(31);
  Critic critic = Critic::xavier(4, 1, 8, rng);
  const Vec obs{{0.0, 0.0, 0.4, -0.2}};  // flattened: contact zeros + prop
  const Vec action = vec1(0.3);
  CHECK(critic.target_value(obs, action) == critic.value(obs, action));

  // Push the online net away from the target, then blend halfway. Tensor
  // order is the online block followed by the target block, so pairing is
  // by index offset of half the list.
  const taskdp::nn::NamedTensors before = critic.to_tensors("c");
  std::vector<AugmentedTransition> batch;
  batch.push_back(bare_transition(Vec{{0.4, -0.2}}, vec1(0.3), 1.0,
                                  Vec{{0.0, 0.0}}, true));
  critic.zero_grad();
  critic_loss_backward(critic, obs_matrix(batch), action_matrix(batch),
                       Vec::Constant(1, 5.0));
  taskdp::nn::Adam opt(0.1);
  const std::vector<taskdp::nn::ParamBlock> blocks = critic.param_blocks();
  opt.step(blocks);
  critic.blend_target(0.5);

  const taskdp::nn::NamedTensors after = critic.to_tensors("c");
  REQUIRE(before.size() == after.size());
  REQUIRE(before.size() % 2 == 0);
  const std::size_t half = before.size() / 2;
  bool online_changed = false;
  for (std::size_t i = 0; i < half; ++i) {
    REQUIRE(after[i].first.starts_with("c.online"));
    REQUIRE(after[half + i].first.starts_with("c.target"));
    for (std::size_t j = 0; j < after[i].second.data.size(); ++j) {
      online_changed = online_changed ||
                       after[i].second.data[j] != before[i].second.data[j];
      const double blended = 0.5 * before[half + i].second.data[j] +
                             0.5 * after[i].second.data[j];
      CHECK(after[half + i].second.data[j] ==
            doctest::Approx(blended).epsilon(1e-12));
    }
  }
  CHECK(online_changed);
}

TEST_CASE("critic checkpoints restore both copies") {
  Rng rng(33);
  Critic critic = Critic::xavier(3, 2, 8, rng);
  critic.blend_target(0.25);  // make the copies differ
  const fs::path path = fs::temp_directory_path() / "taskdp_diff_critic.ckpt";
  taskdp::nn::save_checkpoint(path.string(), "critic",
                              critic.to_tensors("critic"));

  Critic restored(3, 2, 8);
  restored.load_tensors(taskdp::nn::load_checkpoint(path.string()), "critic");
  const Vec obs{{0.1, -0.3, 0.7}};
  const Vec action{{0.2, -0.6}};
  CHECK(restored.value(obs, action) == critic.value(obs, action));
  CHECK(restored.target_value(obs, action) ==
        critic.target_value(obs, action));
  fs::remove(path);

  Rng rng2(34);
  NoiseEstimator estimator = NoiseEstimator::xavier(2, 3, 10, 8, 4, rng2);
  const fs::path epath = fs::temp_directory_path() / "taskdp_diff_est.ckpt";
  taskdp::nn::save_checkpoint(epath.string(), "policy",
                              estimator.to_tensors("policy"));
  NoiseEstimator eload(2, 3, 10, 8, 4);
  eload.load_tensors(taskdp::nn::load_checkpoint(epath.string()), "policy");
  const Vec probe{{0.3, -0.4}};
  const Vec eobs{{0.5, 0.1, -0.2}};
  CHECK(eload.predict(probe, eobs, 4) == estimator.predict(probe, eobs, 4));
  fs::remove(epath);
}

TEST_CASE("batched critic values agree with the scalar paths") {
  Rng rng(35);
  Critic critic = Critic::xavier(4, 2, 8, rng);
  critic.param_blocks().front().value[0] += 0.5;  // make the copies differ

  Mat obs(5, 4);
  Mat actions(5, 2);
  for (Eigen::Index r = 0; r < obs.rows(); ++r) {
    for (Eigen::Index c = 0; c < obs.cols(); ++c) {
      obs(r, c) = rng.uniform(-1.0, 1.0);
    }
    for (Eigen::Index c = 0; c < actions.cols(); ++c) {
      actions(r, c) = rng.uniform(-1.0, 1.0);
    }
  }

  const Vec online = critic.values(obs, actions);
  const Vec target = critic.target_values(obs, actions);
  REQUIRE(online.size() == 5);
  REQUIRE(target.size() == 5);
  for (Eigen::Index r = 0; r < obs.rows(); ++r) {
    const Vec o = obs.row(r).transpose();
    const Vec a = actions.row(r).transpose();
    CHECK(std::abs(online(r) - critic.value(o, a)) <= 1e-12);
    CHECK(std::abs(target(r) - critic.target_value(o, a)) <= 1e-12);
  }
  CHECK((online - target).norm() > 0.0);
  CHECK_THROWS_AS(critic.values(obs, Mat::Zero(3, 2)),
                  std::invalid_argument);
}

TEST_CASE("critic gradients match finite differences") {
  Rng rng(41);
  Critic critic = Critic::xavier(3, 2, 8, rng);
  Mat obs(5, 3);
  Mat actions(5, 2);
  Vec targets(5);
  for (Eigen::Index r = 0; r < 5; ++r) {
    for (Eigen::Index c = 0; c < 3; ++c) obs(r, c) = rng.normal();
    actions(r, 0) = rng.uniform(-1.0, 1.0);
    actions(r, 1) = rng.uniform(-1.0, 1.0);
    targets(r) = rng.normal();
  }

  critic.zero_grad();
  Mat grad_obs;
  critic_loss_backward(critic, obs, actions, targets, &grad_obs);
  const auto loss_fn = [&]() {
    double total = 0.0;
    for (Eigen::Index r = 0; r < 5; ++r) {
      const double q = critic.value(obs.row(r).transpose(),
                                    actions.row(r).transpose());
      total += (q - targets(r)) * (q - targets(r));
    }
    return total / 5.0;
  };
  const std::vector<taskdp::nn::ParamBlock> blocks = critic.param_blocks();
  CHECK(taskdp::nn::gradcheck_max_rel_err(loss_fn, blocks) <= 1e-3);

  // The reported observation gradient continues the same chain.
  REQUIRE(grad_obs.rows() == 5);
  REQUIRE(grad_obs.cols() == 3);
  const double h = 1e-5;
  for (Eigen::Index r = 0; r < 5; ++r) {
    for (Eigen::Index c = 0; c < 3; ++c) {
      const double saved = obs(r, c);
      obs(r, c) = saved + h;
      const double up = loss_fn();
      obs(r, c) = saved - h;
      const double down = loss_fn();
      obs(r, c) = saved;
      const double fd = (up - down) / (2.0 * h);
      if (std::abs(fd) < 1e-7 && std::abs(grad_obs(r, c)) < 1e-7) continue;
      CHECK(fd_loss_rel_err(fd, grad_obs(r, c)) <= 1e-3);
    }
  }
}

// ═══════════════════════════════════════════════════════════════════════════
// Action improvement
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("action improvement is exactly the ascent map") {
  const Vec target{{0.3, -0.5, 0.1}};
  const ActionGradFn quadratic = [&](const Vec&, const Vec& a) {
    return Vec(2.0 * (target - a));
  };
  const Vec obs(0);

  Rng rng(51);
  for (int trial = 0; trial < 100; ++trial) {
    Vec action(3);
    for (int i = 0; i < 3; ++i) action(i) = rng.uniform(-1.0, 1.0);
    CHECK(improve_action(action, obs, quadratic, 0.0) == action);
    for (const double beta : {0.05, 0.2, 0.5}) {
      const Vec improved = improve_action(action, obs, quadratic, beta);
      const Vec expected = action + beta * 2.0 * (target - action);
      CHECK((improved - expected).cwiseAbs().maxCoeff() <= 1e-10);
      if ((action - target).norm() > 1e-12) {
        CHECK((improved - target).norm() < (action - target).norm());
        // The quadratic value strictly improves for beta <= 0.5.
        CHECK(-(improved - target).squaredNorm() >
              -(action - target).squaredNorm());
      }
    }
  }

  CHECK_THROWS_AS(improve_action(vec1(0.0), obs, quadratic, -0.1),
                  std::invalid_argument);
  const ActionGradFn bad_dim = [](const Vec&, const Vec&) {
    return Vec(Vec::Zero(2));
  };
  CHECK_THROWS_AS(improve_action(vec1(0.0), obs, bad_dim, 0.1),
                  std::invalid_argument);
  const ActionGradFn bad_value = [](const Vec&, const Vec& a) {
    return Vec(Vec::Constant(a.size(), std::nan("")));
  };
  CHECK_THROWS_AS(improve_action(vec1(0.0), obs, bad_value, 0.1),
                  std::runtime_error);
}

TEST_CASE("the critic's action gradient drives the improvement step") {
  Rng rng(55);
  Critic critic = Critic::xavier(2, 2, 16, rng);
  const Vec obs{{0.3, -0.1}};
  const Vec action{{0.25, -0.4}};

  const Vec grad = critic.action_gradient(obs, action);
  const double h = 1e-5;
  for (int i = 0; i < 2; ++i) {
    Vec up = action, down = action;
    up(i) += h;
    down(i) -= h;
    const double fd =
        (critic.value(obs, up) - critic.value(obs, down)) / (2.0 * h);
    CHECK(fd_loss_rel_err(fd, grad(i)) <= 1e-3);
  }

  const double beta = 0.05;
  const Vec improved = improve_action(action, obs, critic, beta);
  const Vec expected = (action + beta * grad)
                           .cwiseMax(-kActionBound)
                           .cwiseMin(kActionBound);
  CHECK(improved == expected);
}

// ═══════════════════════════════════════════════════════════════════════════
// Critic learning
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("terminal targets are the reward alone") {
  Critic critic(4, 1);
  NoiseEstimator estimator(1, 4);
  const NoiseSchedule s = make_schedule();
  Rng rng(61);
  std::vector<AugmentedTransition> batch;
  batch.push_back(bare_transition(Vec{{1.0, 0.0}}, vec1(0.2), 0.75,
                                  Vec{{0.0, 1.0}}, true));
  batch.push_back(bare_transition(Vec{{0.0, 1.0}}, vec1(-0.2), -0.5,
                                  Vec{{1.0, 0.0}}, true));
  const Vec targets = critic_targets(critic, batch, s, estimator, 0.99, rng);
  CHECK(targets(0) == 0.75);
  CHECK(targets(1) == -0.5);
}

TEST_CASE("a constant critic with zero reward is a TD fixed point") {
  Critic critic(4, 1);  // zero weights everywhere
  // Raise the online output bias so Q is a nonzero constant, then mirror it
  // into the target.
  std::vector<taskdp::nn::ParamBlock> blocks = critic.param_blocks();
  blocks.back().value[0] = 0.37;
  critic.sync_target();
  CHECK(critic.value(Vec{{0.0, 0.0, 0.1, 0.2}}, vec1(0.5)) == 0.37);
  CHECK(critic.target_value(Vec{{0.0, 0.0, -1.0, 2.0}}, vec1(-0.5)) == 0.37);

  NoiseEstimator estimator(1, 4);
  const NoiseSchedule s = make_schedule();
  Rng rng(62);
  std::vector<AugmentedTransition> batch;
  batch.push_back(bare_transition(Vec{{1.0, 0.0}}, vec1(0.1), 0.0,
                                  Vec{{0.0, 1.0}}, false));
  const Vec targets = critic_targets(critic, batch, s, estimator,
                                     /*gamma=*/1.0, rng);
  CHECK(targets(0) == 0.37);
  critic.zero_grad();
  const double loss = critic_loss_backward(critic, obs_matrix(batch),
                                           action_matrix(batch), targets);
  CHECK(loss == 0.0);
}

TEST_CASE("a critic update moves the online net and drags the target") {
  Rng rng(63);
  Critic critic = Critic::xavier(4, 1, 16, rng);
  NoiseEstimator estimator(1, 4);
  const NoiseSchedule s = make_schedule();
  taskdp::nn::Adam opt(1e-3);

  std::vector<AugmentedTransition> batch;
  batch.push_back(bare_transition(Vec{{1.0, 0.0}}, vec1(0.1), 1.0,
                                  Vec{{0.0, 1.0}}, false));
  batch.push_back(bare_transition(Vec{{0.0, 1.0}}, vec1(-0.3), 0.0,
                                  Vec{{1.0, 0.0}}, true));

  const taskdp::nn::NamedTensors before = critic.to_tensors("c");
  const double rho = 0.9;
  const double loss =
      critic_update(critic, batch, s, estimator, opt, 0.99, rho, rng);
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0);
  const taskdp::nn::NamedTensors after = critic.to_tensors("c");

  // Pair "c.online.x" with "c.target.x" and verify the blend entrywise:
  // new target = rho * old target + (1 - rho) * new online.
  const std::size_t half = before.size() / 2;
  bool online_changed = false;
  for (std::size_t i = 0; i < half; ++i) {
    REQUIRE(after[i].first.starts_with("c.online"));
    REQUIRE(after[half + i].first.starts_with("c.target"));
    for (std::size_t j = 0; j < after[i].second.data.size(); ++j) {
      online_changed =
          online_changed || after[i].second.data[j] != before[i].second.data[j];
      const double blended = rho * before[half + i].second.data[j] +
                             (1.0 - rho) * after[i].second.data[j];
      CHECK(after[half + i].second.data[j] ==
            doctest::Approx(blended).epsilon(1e-12));
    }
  }
  CHECK(online_changed);
}

TEST_CASE("the critic converges to the chain's Bellman values") {
  // Two-state chain: state 1 steps to state 2 with reward 0; state 2 ends
  // the episode with reward 1. With gamma = 0.9 the action-independent
  // solution is Q(s1, a) = 0.9 and Q(s2, a) = 1.
  Rng rng(71);
  Critic critic = Critic::xavier(4, 1, 32, rng);
  NoiseEstimator estimator(1, 4);  // silent: bootstrap actions are benign
  const NoiseSchedule s = make_schedule();
  taskdp::nn::Adam opt(3e-3);

  const Vec s1{{1.0, 0.0}};
  const Vec s2{{0.0, 1.0}};
  const Vec s1_flat{{0.0, 0.0, 1.0, 0.0}};
  const Vec s2_flat{{0.0, 0.0, 0.0, 1.0}};
  for (int iter = 0; iter < 3000; ++iter) {
    std::vector<AugmentedTransition> batch;
    for (int i = 0; i < 16; ++i) {
      const double a1 = std::clamp(rng.normal(), -1.0, 1.0);
      const double a2 = std::clamp(rng.normal(), -1.0, 1.0);
      batch.push_back(bare_transition(s1, vec1(a1), 0.0, s2, false));
      batch.push_back(bare_transition(s2, vec1(a2), 1.0, Vec{{0.0, 0.0}},
                                      true));
    }
    critic_update(critic, batch, s, estimator, opt, 0.9, 0.99, rng);
  }

  for (const double probe : {-0.5, 0.0, 0.7}) {
    CHECK(std::abs(critic.value(s1_flat, vec1(probe)) - 0.9) <= 1e-2);
    CHECK(std::abs(critic.value(s2_flat, vec1(probe)) - 1.0) <= 1e-2);
  }
}

// ═══════════════════════════════════════════════════════════════════════════
// Distribution fitting
// ═══════════════════════════════════════════════════════════════════════════

TEST_CASE("a trained sampler recovers both action modes") {
  // Conditional one-dimensional target: modes at -1 and +1 (box edges),
  // sigma = 0.05, under a fixed observation.
  Rng init(81);
  NoiseEstimator estimator = NoiseEstimator::xavier(1, 1, 10, 64, 16, init);
  const NoiseSchedule s = make_schedule();
  taskdp::nn::Adam opt(2e-3);
  const double fixed_obs = 0.5;

  Rng data(82);
  for (int iter = 0; iter < 2500; ++iter) {
    Mat actions(256, 1);
    for (Eigen::Index r = 0; r < 256; ++r) {
      const double mode = data.uniform() < 0.5 ? -1.0 : 1.0;
      actions(r, 0) = std::clamp(mode + 0.05 * data.normal(), -1.0, 1.0);
    }
    const Mat obs = Mat::Constant(256, 1, fixed_obs);
    const CorruptedBatch batch = corrupt_actions(actions, obs, s, data);
    estimator.zero_grad();
    estimator_loss_backward(estimator, batch);
    const std::vector<taskdp::nn::ParamBlock> blocks =
        estimator.param_blocks();
    opt.step(blocks);
  }

  Rng sampler(83);
  int low = 0, high = 0, off = 0;
  for (int i = 0; i < 1000; ++i) {
    const Vec action = sample_action(vec1(fixed_obs), s, estimator,
                                     /*deploy=*/true, sampler);
    if (std::abs(action(0) - 1.0) <= 0.15) {
      ++high;
    } else if (std::abs(action(0) + 1.0) <= 0.15) {
      ++low;
    } else {
      ++off;
    }
  }
  CHECK(low + high >= 950);
  CHECK(low >= 200);
  CHECK(high >= 200);
}
