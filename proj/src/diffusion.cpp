#include "taskdp/diffusion.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "taskdp/task_encoder.hpp"

namespace taskdp::diff {

// ═══════════════════════════════════════════════════════════════════════════
// Noise schedule
// ═══════════════════════════════════════════════════════════════════════════

double NoiseSchedule::alpha_at(std::size_t k) const {
  if (k < 1 || k > alpha.size()) {
    throw std::out_of_range("schedule step index outside {1..K}");
  }
  return alpha[k - 1];
}

double NoiseSchedule::alpha_bar_at(std::size_t k) const {
  if (k < 1 || k > alpha_bar.size()) {
    throw std::out_of_range("schedule step index outside {1..K}");
  }
  return alpha_bar[k - 1];
}

NoiseSchedule schedule_from_alphas(std::vector<double> alpha) {
  if (alpha.empty()) {
    throw std::invalid_argument("schedule needs at least one step");
  }
  NoiseSchedule schedule;
  schedule.alpha_bar.resize(alpha.size());
  double bar = 1.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    if (!(alpha[i] > 0.0) || alpha[i] > 1.0) {
      throw std::invalid_argument("schedule alpha outside (0, 1]");
    }
    bar *= alpha[i];
    schedule.alpha_bar[i] = bar;
  }
  schedule.alpha = std::move(alpha);
  return schedule;
}

NoiseSchedule make_schedule(std::size_t steps, double beta_min,
                            double beta_max) {
  if (steps < 1) {
    throw std::invalid_argument("schedule needs at least one step");
  }
  if (!(beta_min > 0.0) || beta_min > beta_max || !(beta_max < 1.0)) {
    throw std::invalid_argument("schedule needs 0 < beta_min <= beta_max < 1");
  }
  std::vector<double> alpha(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = steps == 1 ? 0.0
                                : static_cast<double>(i) /
                                      static_cast<double>(steps - 1);
    alpha[i] = 1.0 - (beta_min + (beta_max - beta_min) * t);
  }
  return schedule_from_alphas(std::move(alpha));
}

// ═══════════════════════════════════════════════════════════════════════════
// Conditioning input and replay transitions
// ═══════════════════════════════════════════════════════════════════════════

std::size_t ObservationTuple::dim() const {
  return static_cast<std::size_t>(vision.size()) +
         static_cast<std::size_t>(task.size()) + 2 +
         static_cast<std::size_t>(prop.size());
}

nn::Vec ObservationTuple::concat() const {
  nn::Vec out(static_cast<Eigen::Index>(dim()));
  Eigen::Index at = 0;
  out.segment(at, vision.size()) = vision;
  at += vision.size();
  out.segment(at, task.size()) = task;
  at += task.size();
  out.segment(at, 2) = contact;
  at += 2;
  out.segment(at, prop.size()) = prop;
  if (!out.allFinite()) {
    throw std::invalid_argument("observation contains non-finite entries");
  }
  return out;
}

namespace {

nn::Mat stack_rows(std::span<const AugmentedTransition> batch,
                   const std::function<nn::Vec(const AugmentedTransition&)>&
                       row_of) {
  if (batch.empty()) {
    throw std::invalid_argument("transition batch is empty");
  }
  const nn::Vec first = row_of(batch.front());
  nn::Mat rows(static_cast<Eigen::Index>(batch.size()), first.size());
  rows.row(0) = first.transpose();
  for (std::size_t i = 1; i < batch.size(); ++i) {
    const nn::Vec row = row_of(batch[i]);
    if (row.size() != first.size()) {
      throw std::invalid_argument("transition batch rows disagree on width");
    }
    rows.row(static_cast<Eigen::Index>(i)) = row.transpose();
  }
  return rows;
}

}  // namespace

nn::Mat obs_matrix(std::span<const AugmentedTransition> batch) {
  return stack_rows(
      batch, [](const AugmentedTransition& t) { return t.obs.concat(); });
}

nn::Mat next_obs_matrix(std::span<const AugmentedTransition> batch) {
  return stack_rows(
      batch, [](const AugmentedTransition& t) { return t.next_obs.concat(); });
}

nn::Mat action_matrix(std::span<const AugmentedTransition> batch) {
  return stack_rows(batch,
                    [](const AugmentedTransition& t) { return t.action; });
}

// ═══════════════════════════════════════════════════════════════════════════
// Noise estimator
// ═══════════════════════════════════════════════════════════════════════════

namespace {

std::vector<nn::LayerSpec> estimator_layers(std::size_t in, std::size_t hidden,
                                            std::size_t out) {
  return {{in, hidden, nn::Activation::kRelu},
          {hidden, hidden, nn::Activation::kRelu},
          {hidden, out, nn::Activation::kIdentity}};
}

}  // namespace

NoiseEstimator::NoiseEstimator(std::size_t action_dim, std::size_t obs_dim,
                               std::size_t steps, std::size_t hidden,
                               std::size_t embed_dim)
    : action_dim_(action_dim),
      obs_dim_(obs_dim),
      steps_(steps),
      embed_dim_(embed_dim) {
  if (action_dim < 1 || steps < 1 || hidden < 1) {
    throw std::invalid_argument("estimator dimensions must be positive");
  }
  k_table_ = enc::positional_embedding(steps + 1, embed_dim);
  net_ = nn::DenseNet(
      estimator_layers(action_dim + obs_dim + embed_dim, hidden, action_dim));
}

NoiseEstimator NoiseEstimator::xavier(std::size_t action_dim,
                                      std::size_t obs_dim, std::size_t steps,
                                      std::size_t hidden,
                                      std::size_t embed_dim, Rng& rng) {
  NoiseEstimator estimator(action_dim, obs_dim, steps, hidden, embed_dim);
  estimator.net_ = nn::DenseNet::xavier(
      estimator_layers(action_dim + obs_dim + embed_dim, hidden, action_dim),
      rng);
  return estimator;
}

std::size_t NoiseEstimator::parameter_count() const {
  return net_.parameter_count();
}

nn::Mat NoiseEstimator::assemble(const nn::Mat& actions, const nn::Mat& obs,
                                 const std::vector<std::size_t>& ks) const {
  const Eigen::Index rows = actions.rows();
  if (obs.rows() != rows ||
      ks.size() != static_cast<std::size_t>(rows)) {
    throw std::invalid_argument("estimator batch row counts disagree");
  }
  if (actions.cols() != static_cast<Eigen::Index>(action_dim_) ||
      obs.cols() != static_cast<Eigen::Index>(obs_dim_)) {
    throw std::invalid_argument("estimator batch width mismatch");
  }
  nn::Mat input(rows, actions.cols() + obs.cols() +
                          static_cast<Eigen::Index>(embed_dim_));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const std::size_t k = ks[static_cast<std::size_t>(r)];
    if (k < 1 || k > steps_) {
      throw std::invalid_argument("estimator step index outside {1..K}");
    }
    input.row(r) << actions.row(r), obs.row(r),
        k_table_.row(static_cast<Eigen::Index>(k));
  }
  return input;
}

nn::Vec NoiseEstimator::predict(const nn::Vec& action, const nn::Vec& obs,
                                std::size_t k) const {
  const nn::Mat out = net_.infer(
      assemble(action.transpose(), obs.transpose(), {k}));
  return out.row(0).transpose();
}

nn::Mat NoiseEstimator::infer(const nn::Mat& actions, const nn::Mat& obs,
                              std::size_t k) const {
  const std::vector<std::size_t> ks(static_cast<std::size_t>(actions.rows()),
                                    k);
  return net_.infer(assemble(actions, obs, ks));
}

nn::Mat NoiseEstimator::forward(const nn::Mat& actions, const nn::Mat& obs,
                                const std::vector<std::size_t>& ks) {
  return net_.forward(assemble(actions, obs, ks));
}

nn::Mat NoiseEstimator::backward(const nn::Mat& grad_predictions) {
  return net_.backward(grad_predictions);
}

void NoiseEstimator::zero_grad() { net_.zero_grad(); }

std::vector<nn::ParamBlock> NoiseEstimator::param_blocks() {
  return net_.param_blocks();
}

nn::NamedTensors NoiseEstimator::to_tensors(const std::string& prefix) const {
  return net_.to_tensors(prefix);
}

void NoiseEstimator::load_tensors(const nn::Checkpoint& ckpt,
                                  const std::string& prefix) {
  net_.load_tensors(ckpt, prefix);
}

// ═══════════════════════════════════════════════════════════════════════════
// Reverse denoising sampler
// ═══════════════════════════════════════════════════════════════════════════

namespace {

nn::Vec clamp_to_box(nn::Vec action) {
  return action.cwiseMax(-kActionBound).cwiseMin(kActionBound);
}

}  // namespace

nn::Vec denoise(nn::Vec action, const nn::Vec& obs,
                const NoiseSchedule& schedule, const EstimatorFn& estimator,
                bool deploy, Rng* rng, nn::Mat* trace) {
  const std::size_t steps = schedule.steps();
  if (steps == 0) {
    throw std::invalid_argument("denoise needs a nonempty schedule");
  }
  if (!deploy && rng == nullptr) {
    throw std::invalid_argument("exploration-mode denoise needs an rng");
  }
  const Eigen::Index dim = action.size();
  if (trace != nullptr) {
    trace->resize(static_cast<Eigen::Index>(steps) + 1, dim);
    trace->row(0) = action.transpose();
  }
  for (std::size_t k = steps; k >= 1; --k) {
    const double alpha = schedule.alpha_at(k);
    const double bar = schedule.alpha_bar_at(k);
    const nn::Vec eps = estimator(action, obs, k);
    if (eps.size() != dim) {
      throw std::invalid_argument("estimator output does not match action");
    }
    const double spread = std::sqrt(std::max(1.0 - bar, kVarianceFloor));
    action = (action - ((1.0 - alpha) / spread) * eps) / std::sqrt(alpha);
    if (!deploy) {
      const double sigma_k = std::sqrt((1.0 - alpha) / alpha);
      for (Eigen::Index i = 0; i < dim; ++i) {
        action(i) += sigma_k * rng->normal();
      }
    }
    if (!action.allFinite()) {
      throw std::runtime_error("denoising iterate turned non-finite");
    }
    if (trace != nullptr) {
      trace->row(static_cast<Eigen::Index>(steps - k) + 1) =
          action.transpose();
    }
  }
  action = clamp_to_box(std::move(action));
  if (trace != nullptr) {
    trace->row(static_cast<Eigen::Index>(steps)) = action.transpose();
  }
  return action;
}

nn::Vec sample_action(const nn::Vec& obs, const NoiseSchedule& schedule,
                      const EstimatorFn& estimator, std::size_t action_dim,
                      bool deploy, Rng& rng, nn::Mat* trace) {
  nn::Vec start(static_cast<Eigen::Index>(action_dim));
  for (Eigen::Index i = 0; i < start.size(); ++i) {
    start(i) = rng.normal();
  }
  return denoise(std::move(start), obs, schedule, estimator, deploy, &rng,
                 trace);
}

nn::Vec sample_action(const nn::Vec& obs, const NoiseSchedule& schedule,
                      const NoiseEstimator& estimator, bool deploy, Rng& rng,
                      nn::Mat* trace) {
  return sample_action(
      obs, schedule,
      [&estimator](const nn::Vec& action, const nn::Vec& o, std::size_t k) {
        return estimator.predict(action, o, k);
      },
      estimator.action_dim(), deploy, rng, trace);
}

nn::Mat sample_actions(const nn::Mat& obs, const NoiseSchedule& schedule,
                       const NoiseEstimator& estimator, bool deploy,
                       Rng& rng) {
  const Eigen::Index rows = obs.rows();
  if (rows == 0) {
    throw std::invalid_argument("batched sampling over an empty batch");
  }
  const std::size_t steps = schedule.steps();
  if (steps == 0) {
    throw std::invalid_argument("batched sampling needs a nonempty schedule");
  }
  nn::Mat actions(rows, static_cast<Eigen::Index>(estimator.action_dim()));
  for (Eigen::Index r = 0; r < actions.rows(); ++r) {
    for (Eigen::Index c = 0; c < actions.cols(); ++c) {
      actions(r, c) = rng.normal();
    }
  }
  for (std::size_t k = steps; k >= 1; --k) {
    const double alpha = schedule.alpha_at(k);
    const double bar = schedule.alpha_bar_at(k);
    const double spread = std::sqrt(std::max(1.0 - bar, kVarianceFloor));
    const nn::Mat eps = estimator.infer(actions, obs, k);
    actions = (actions - ((1.0 - alpha) / spread) * eps) / std::sqrt(alpha);
    if (!deploy) {
      const double sigma_k = std::sqrt((1.0 - alpha) / alpha);
      for (Eigen::Index r = 0; r < actions.rows(); ++r) {
        for (Eigen::Index c = 0; c < actions.cols(); ++c) {
          actions(r, c) += sigma_k * rng.normal();
        }
      }
    }
    if (!actions.allFinite()) {
      throw std::runtime_error("denoising iterate turned non-finite");
    }
  }
  return actions.cwiseMax(-kActionBound).cwiseMin(kActionBound);
}

void save_sampler_trace(const nn::Mat& trace, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open sampler trace for writing: " + path);
  }
  out << "step";
  for (Eigen::Index c = 0; c < trace.cols(); ++c) {
    out << ",a" << c;
  }
  out << "\n";
  char buffer[64];
  for (Eigen::Index r = 0; r < trace.rows(); ++r) {
    out << r;
    for (Eigen::Index c = 0; c < trace.cols(); ++c) {
      std::snprintf(buffer, sizeof buffer, ",%.17g", trace(r, c));
      out << buffer;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("failed writing sampler trace: " + path);
}

// ═══════════════════════════════════════════════════════════════════════════
// Estimator regression
// ═══════════════════════════════════════════════════════════════════════════

CorruptedBatch corrupt_actions(const nn::Mat& actions, const nn::Mat& obs,
                               const NoiseSchedule& schedule, Rng& rng) {
  if (actions.rows() == 0) {
    throw std::invalid_argument("corruption batch is empty");
  }
  if (obs.rows() != actions.rows()) {
    throw std::invalid_argument("corruption batch row counts disagree");
  }
  if ((actions.array().abs() > kActionBound).any()) {
    throw std::invalid_argument("corruption batch action outside the box");
  }
  CorruptedBatch batch;
  batch.obs = obs;
  batch.ks.resize(static_cast<std::size_t>(actions.rows()));
  batch.noise.resize(actions.rows(), actions.cols());
  batch.corrupted.resize(actions.rows(), actions.cols());
  for (Eigen::Index r = 0; r < actions.rows(); ++r) {
    const std::size_t k = static_cast<std::size_t>(
        rng.uniform_int(1, static_cast<std::int64_t>(schedule.steps())));
    batch.ks[static_cast<std::size_t>(r)] = k;
    const double bar = schedule.alpha_bar_at(k);
    const double keep = std::sqrt(bar);
    const double spread = std::sqrt(1.0 - bar);
    for (Eigen::Index c = 0; c < actions.cols(); ++c) {
      const double z = rng.normal();
      batch.noise(r, c) = z;
      batch.corrupted(r, c) = keep * actions(r, c) + spread * z;
    }
  }
  return batch;
}

double noise_loss(const nn::Mat& predicted, const nn::Mat& noise) {
  if (predicted.rows() != noise.rows() || predicted.cols() != noise.cols()) {
    throw std::invalid_argument("noise loss shape mismatch");
  }
  if (predicted.rows() == 0) {
    throw std::invalid_argument("noise loss over an empty batch");
  }
  return (predicted - noise).rowwise().squaredNorm().mean();
}

double estimator_loss_backward(NoiseEstimator& estimator,
                               const CorruptedBatch& batch) {
  const nn::Mat predicted =
      estimator.forward(batch.corrupted, batch.obs, batch.ks);
  const double loss = noise_loss(predicted, batch.noise);
  if (!std::isfinite(loss)) {
    throw std::runtime_error("estimator loss turned non-finite");
  }
  const nn::Mat grad = 2.0 * (predicted - batch.noise) /
                       static_cast<double>(predicted.rows());
  estimator.backward(grad);
  return loss;
}

// ═══════════════════════════════════════════════════════════════════════════
// Critic
// ═══════════════════════════════════════════════════════════════════════════

namespace {

std::vector<nn::LayerSpec> critic_layers(std::size_t in, std::size_t hidden) {
  return {{in, hidden, nn::Activation::kRelu},
          {hidden, hidden, nn::Activation::kRelu},
          {hidden, 1, nn::Activation::kIdentity}};
}

}  // namespace

Critic::Critic(std::size_t obs_dim, std::size_t action_dim,
               std::size_t hidden)
    : obs_dim_(obs_dim), action_dim_(action_dim) {
  if (obs_dim < 1 || action_dim < 1 || hidden < 1) {
    throw std::invalid_argument("critic dimensions must be positive");
  }
  online_ = nn::DenseNet(critic_layers(obs_dim + action_dim, hidden));
  target_ = nn::DenseNet(critic_layers(obs_dim + action_dim, hidden));
}

Critic Critic::xavier(std::size_t obs_dim, std::size_t action_dim,
                      std::size_t hidden, Rng& rng) {
  Critic critic(obs_dim, action_dim, hidden);
  critic.online_ =
      nn::DenseNet::xavier(critic_layers(obs_dim + action_dim, hidden), rng);
  critic.sync_target();
  return critic;
}

std::size_t Critic::parameter_count() const {
  return online_.parameter_count() + target_.parameter_count();
}

namespace {

nn::Mat joined_row(const nn::Vec& obs, const nn::Vec& action) {
  nn::Mat row(1, obs.size() + action.size());
  row << obs.transpose(), action.transpose();
  return row;
}

nn::Mat joined_rows(const nn::Mat& obs, const nn::Mat& actions) {
  if (obs.rows() != actions.rows()) {
    throw std::invalid_argument("critic batch row counts disagree");
  }
  nn::Mat input(obs.rows(), obs.cols() + actions.cols());
  input << obs, actions;
  return input;
}

}  // namespace

double Critic::value(const nn::Vec& obs, const nn::Vec& action) const {
  return online_.infer(joined_row(obs, action))(0, 0);
}

double Critic::target_value(const nn::Vec& obs, const nn::Vec& action) const {
  return target_.infer(joined_row(obs, action))(0, 0);
}

nn::Vec Critic::values(const nn::Mat& obs, const nn::Mat& actions) const {
  return online_.infer(joined_rows(obs, actions)).col(0);
}

nn::Vec Critic::target_values(const nn::Mat& obs,
                              const nn::Mat& actions) const {
  return target_.infer(joined_rows(obs, actions)).col(0);
}

nn::Vec Critic::action_gradient(const nn::Vec& obs, const nn::Vec& action) {
  online_.forward(joined_row(obs, action));
  const nn::Mat grad = online_.backward(nn::Mat::Ones(1, 1));
  return grad.row(0).tail(action.size()).transpose();
}

nn::Vec Critic::forward(const nn::Mat& obs, const nn::Mat& actions) {
  return online_.forward(joined_rows(obs, actions)).col(0);
}

nn::Mat Critic::backward(const nn::Vec& grad_values) {
  return online_.backward(grad_values);
}

void Critic::blend_target(double rho) { target_.blend_from(online_, rho); }

void Critic::sync_target() { target_.blend_from(online_, 0.0); }

void Critic::zero_grad() { online_.zero_grad(); }

std::vector<nn::ParamBlock> Critic::param_blocks() {
  return online_.param_blocks();
}

nn::NamedTensors Critic::to_tensors(const std::string& prefix) const {
  nn::NamedTensors tensors = online_.to_tensors(prefix + ".online");
  nn::NamedTensors target = target_.to_tensors(prefix + ".target");
  tensors.insert(tensors.end(), target.begin(), target.end());
  return tensors;
}

void Critic::load_tensors(const nn::Checkpoint& ckpt,
                          const std::string& prefix) {
  online_.load_tensors(ckpt, prefix + ".online");
  target_.load_tensors(ckpt, prefix + ".target");
}

// ═══════════════════════════════════════════════════════════════════════════
// Action improvement and critic learning
// ═══════════════════════════════════════════════════════════════════════════

nn::Vec improve_action(const nn::Vec& action, const nn::Vec& obs,
                       const ActionGradFn& grad_q, double beta) {
  if (beta < 0.0) {
    throw std::invalid_argument("improvement rate must be nonnegative");
  }
  const nn::Vec grad = grad_q(obs, action);
  if (grad.size() != action.size()) {
    throw std::invalid_argument("critic gradient does not match action");
  }
  if (!grad.allFinite()) {
    throw std::runtime_error("critic action gradient turned non-finite");
  }
  return clamp_to_box(action + beta * grad);
}

nn::Vec improve_action(const nn::Vec& action, const nn::Vec& obs,
                       Critic& critic, double beta) {
  return improve_action(
      action, obs,
      [&critic](const nn::Vec& o, const nn::Vec& a) {
        return critic.action_gradient(o, a);
      },
      beta);
}

nn::Vec critic_targets(const Critic& critic,
                       std::span<const AugmentedTransition> batch,
                       const NoiseSchedule& schedule,
                       const NoiseEstimator& estimator, double gamma,
                       Rng& rng) {
  if (batch.empty()) {
    throw std::invalid_argument("critic target batch is empty");
  }
  nn::Vec targets(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const AugmentedTransition& t = batch[i];
    double y = t.reward;
    if (!t.done) {
      const nn::Vec next = t.next_obs.concat();
      const nn::Vec next_action =
          sample_action(next, schedule, estimator, /*deploy=*/true, rng);
      y += gamma * critic.target_value(next, next_action);
    }
    targets(static_cast<Eigen::Index>(i)) = y;
  }
  return targets;
}

double critic_loss_backward(Critic& critic, const nn::Mat& obs,
                            const nn::Mat& actions, const nn::Vec& targets,
                            nn::Mat* grad_obs) {
  if (targets.size() != obs.rows()) {
    throw std::invalid_argument("critic targets do not match batch rows");
  }
  const nn::Vec values = critic.forward(obs, actions);
  const nn::Vec residual = values - targets;
  const double loss =
      residual.squaredNorm() / static_cast<double>(residual.size());
  if (!std::isfinite(loss)) {
    throw std::runtime_error("critic loss turned non-finite");
  }
  const nn::Mat grad_input =
      critic.backward(2.0 * residual / static_cast<double>(residual.size()));
  if (grad_obs != nullptr) {
    *grad_obs = grad_input.leftCols(obs.cols());
  }
  return loss;
}

double critic_update(Critic& critic,
                     std::span<const AugmentedTransition> batch,
                     const NoiseSchedule& schedule,
                     const NoiseEstimator& estimator, nn::Adam& optimizer,
                     double gamma, double rho, Rng& rng) {
  const nn::Vec targets =
      critic_targets(critic, batch, schedule, estimator, gamma, rng);
  critic.zero_grad();
  const double loss = critic_loss_backward(critic, obs_matrix(batch),
                                           action_matrix(batch), targets);
  const std::vector<nn::ParamBlock> blocks = critic.param_blocks();
  optimizer.step(blocks);
  critic.blend_target(rho);
  return loss;
}

}  // namespace taskdp::diff
