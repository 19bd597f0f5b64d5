#pragma once
// Diffusion policy: linear-beta noise schedule, K-step reverse denoising
// sampler, noise-estimator regression, gradient-ascent action improvement,
// and a critic with a Polyak-averaged target.
//
// Conventions:
//  - Step indices are 1-based: k runs over {1..K}, alpha_at(k) reads the
//    k-th coefficient. The sampler starts from pure noise (iterate 0) and
//    sweeps the coefficient index from K down to 1, so the emitted action is
//    iterate K.
//  - Actions live in the box [-kActionBound, kActionBound]^dim; the sampler
//    and the improvement step both clamp their output to it.
//  - deploy = true silences the per-step exploration noise (sigma = 0);
//    training-time sampling uses sigma = 1.

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "taskdp/nn.hpp"
#include "taskdp/rng.hpp"

namespace taskdp::diff {

using Vec2 = Eigen::Vector2d;

inline constexpr std::size_t kDefaultSteps = 10;  // K
inline constexpr double kDefaultBetaMin = 1e-4;
inline constexpr double kDefaultBetaMax = 0.2;
inline constexpr double kDefaultGamma = 0.99;        // discount
inline constexpr double kDefaultPolyak = 0.995;      // target blend rho
inline constexpr double kDefaultImproveRate = 0.05;  // ascent step beta
inline constexpr double kActionBound = 1.0;
inline constexpr double kVarianceFloor = 1e-8;  // floor for 1 - alpha_bar

// ═══════════════════════════════════════════════════════════════════════════
// Noise schedule
// ═══════════════════════════════════════════════════════════════════════════

struct NoiseSchedule {
  std::vector<double> alpha;      // alpha[k-1] = 1 - beta_k, in (0, 1]
  std::vector<double> alpha_bar;  // alpha_bar[k-1] = alpha_1 * ... * alpha_k

  std::size_t steps() const { return alpha.size(); }
  double alpha_at(std::size_t k) const;      // 1-indexed; throws out_of_range
  double alpha_bar_at(std::size_t k) const;  // 1-indexed; throws out_of_range
};

// beta_k climbs linearly from beta_min to beta_max over K steps and
// alpha_k = 1 - beta_k. Throws std::invalid_argument unless K >= 1 and
// 0 < beta_min <= beta_max < 1.
NoiseSchedule make_schedule(std::size_t steps = kDefaultSteps,
                            double beta_min = kDefaultBetaMin,
                            double beta_max = kDefaultBetaMax);

// Schedule from explicit alpha values (each in (0, 1]); the cumulative
// products are formed left to right so alpha_bar[k] = alpha_bar[k-1] *
// alpha[k] holds bitwise.
NoiseSchedule schedule_from_alphas(std::vector<double> alpha);

// ═══════════════════════════════════════════════════════════════════════════
// Conditioning input and replay transitions
// ═══════════════════════════════════════════════════════════════════════════

// What the policy and critic condition on: pooled point-cloud feature, task
// embedding, max-affordance point, and proprioception, flattened in that
// order.
struct ObservationTuple {
  nn::Vec vision;               // pooled scene feature o_pn
  nn::Vec task;                 // task embedding phi
  Vec2 contact = Vec2::Zero();  // max-affordance point o_MP
  nn::Vec prop;                 // (eff.x, eff.y, grasp, lid angle)

  std::size_t dim() const;
  // Throws std::invalid_argument when any entry is non-finite.
  nn::Vec concat() const;
};

struct AugmentedTransition {
  ObservationTuple obs;
  nn::Vec action;
  double reward = 0.0;
  ObservationTuple next_obs;
  bool done = false;
};

// Row-stacked views of a batch; every tuple must flatten to the same width.
nn::Mat obs_matrix(std::span<const AugmentedTransition> batch);
nn::Mat next_obs_matrix(std::span<const AugmentedTransition> batch);
nn::Mat action_matrix(std::span<const AugmentedTransition> batch);

// ═══════════════════════════════════════════════════════════════════════════
// Noise estimator
// ═══════════════════════════════════════════════════════════════════════════

// Predicts the injected noise from the corrupted action, the conditioning
// vector, and a sinusoidal embedding of the step index (row k of the same
// positional table the task encoder uses).
class NoiseEstimator {
 public:
  NoiseEstimator(std::size_t action_dim, std::size_t obs_dim,
                 std::size_t steps = kDefaultSteps, std::size_t hidden = 128,
                 std::size_t embed_dim = 16);  // zero-initialized
  static NoiseEstimator xavier(std::size_t action_dim, std::size_t obs_dim,
                               std::size_t steps, std::size_t hidden,
                               std::size_t embed_dim, Rng& rng);

  std::size_t action_dim() const { return action_dim_; }
  std::size_t obs_dim() const { return obs_dim_; }
  std::size_t steps() const { return steps_; }
  std::size_t parameter_count() const;

  // eps(action, obs, k) without recording a trace; k is 1-indexed.
  nn::Vec predict(const nn::Vec& action, const nn::Vec& obs,
                  std::size_t k) const;

  // Batched predictions at a shared step, one sample per row, no trace.
  nn::Mat infer(const nn::Mat& actions, const nn::Mat& obs,
                std::size_t k) const;

  // Trace-recording batch forward (one sample per row), paired with one
  // backward that accumulates parameter gradients and returns the gradient
  // with respect to the assembled [action | obs | embedding] rows.
  nn::Mat forward(const nn::Mat& actions, const nn::Mat& obs,
                  const std::vector<std::size_t>& ks);
  nn::Mat backward(const nn::Mat& grad_predictions);

  void zero_grad();
  std::vector<nn::ParamBlock> param_blocks();
  nn::NamedTensors to_tensors(const std::string& prefix) const;
  void load_tensors(const nn::Checkpoint& ckpt, const std::string& prefix);

 private:
  nn::Mat assemble(const nn::Mat& actions, const nn::Mat& obs,
                   const std::vector<std::size_t>& ks) const;

  std::size_t action_dim_ = 0;
  std::size_t obs_dim_ = 0;
  std::size_t steps_ = 0;
  std::size_t embed_dim_ = 0;
  nn::Mat k_table_;   // (steps + 1) x embed_dim, row k = embedding of step k
  nn::DenseNet net_;  // [action | obs | embedding] -> hidden -> hidden -> action
};

// Estimator hook for the sampler, so analytic stubs can stand in for the
// trained network.
using EstimatorFn = std::function<nn::Vec(
    const nn::Vec& action, const nn::Vec& obs, std::size_t k)>;

// ═══════════════════════════════════════════════════════════════════════════
// Reverse denoising sampler
// ═══════════════════════════════════════════════════════════════════════════

// Runs the K-step reverse update from the given start iterate:
//   a <- (a - ((1 - alpha_k) / sqrt(1 - alpha_bar_k)) eps(a, obs, k))
//          / sqrt(alpha_k)  +  sigma sqrt((1 - alpha_k) / alpha_k) z
// with k sweeping K..1, sigma = 0 when deploy and 1 otherwise, and
// 1 - alpha_bar floored at kVarianceFloor. The result is clamped to the
// action box. rng may be null only in deploy mode. When trace is given it
// receives one row per iterate (row 0 = start, row K = clamped output).
// Throws std::runtime_error when an iterate turns non-finite.
nn::Vec denoise(nn::Vec action, const nn::Vec& obs,
                const NoiseSchedule& schedule, const EstimatorFn& estimator,
                bool deploy, Rng* rng, nn::Mat* trace = nullptr);

// Draws the start iterate from a standard normal, then denoises.
nn::Vec sample_action(const nn::Vec& obs, const NoiseSchedule& schedule,
                      const EstimatorFn& estimator, std::size_t action_dim,
                      bool deploy, Rng& rng, nn::Mat* trace = nullptr);
nn::Vec sample_action(const nn::Vec& obs, const NoiseSchedule& schedule,
                      const NoiseEstimator& estimator, bool deploy, Rng& rng,
                      nn::Mat* trace = nullptr);

// Batched reverse sampler: one action row per observation row. The start
// iterates are drawn row-major, then each sweep step adds its exploration
// noise row-major, so the draw order is fixed regardless of batch content.
nn::Mat sample_actions(const nn::Mat& obs, const NoiseSchedule& schedule,
                       const NoiseEstimator& estimator, bool deploy,
                       Rng& rng);

// Iterate-per-row trace as CSV: header "step,a0,a1,..." then one row per
// iterate, floats at full precision.
void save_sampler_trace(const nn::Mat& trace, const std::string& path);

// ═══════════════════════════════════════════════════════════════════════════
// Estimator regression
// ═══════════════════════════════════════════════════════════════════════════

// Forward-process corruption: per action row, a step k uniform in {1..K}
// and a standard-normal z form sqrt(alpha_bar_k) a + sqrt(1 - alpha_bar_k) z,
// with z kept as the regression target.
struct CorruptedBatch {
  nn::Mat corrupted;  // rows x action_dim
  nn::Mat obs;        // rows x obs_dim
  std::vector<std::size_t> ks;
  nn::Mat noise;  // rows x action_dim, the targets
};

// Throws std::invalid_argument on an empty batch, mismatched row counts, or
// an action outside the box.
CorruptedBatch corrupt_actions(const nn::Mat& actions, const nn::Mat& obs,
                               const NoiseSchedule& schedule, Rng& rng);

// Mean over rows of the squared norm of (predicted - noise).
double noise_loss(const nn::Mat& predicted, const nn::Mat& noise);

// Estimator forward plus noise_loss backward; accumulates parameter
// gradients and returns the loss. Throws std::runtime_error when the loss
// turns non-finite.
double estimator_loss_backward(NoiseEstimator& estimator,
                               const CorruptedBatch& batch);

// ═══════════════════════════════════════════════════════════════════════════
// Critic
// ═══════════════════════════════════════════════════════════════════════════

// Scalar action-value network over [obs | action] with a target copy that
// trails the online parameters through Polyak blending.
class Critic {
 public:
  Critic(std::size_t obs_dim, std::size_t action_dim,
         std::size_t hidden = 128);  // zero-initialized
  static Critic xavier(std::size_t obs_dim, std::size_t action_dim,
                       std::size_t hidden, Rng& rng);  // target = online copy

  std::size_t obs_dim() const { return obs_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  std::size_t parameter_count() const;  // online and target together

  double value(const nn::Vec& obs, const nn::Vec& action) const;
  double target_value(const nn::Vec& obs, const nn::Vec& action) const;

  // Batched no-trace evaluations, one sample per row.
  nn::Vec values(const nn::Mat& obs, const nn::Mat& actions) const;
  nn::Vec target_values(const nn::Mat& obs, const nn::Mat& actions) const;

  // d value / d action on the online net. Runs a throwaway forward and
  // backward, so it also perturbs the stored parameter gradients; call
  // zero_grad() before accumulating a training loss.
  nn::Vec action_gradient(const nn::Vec& obs, const nn::Vec& action);

  // Trace-recording batch forward -> one value per row, paired with one
  // backward that accumulates online-net gradients and returns the gradient
  // with respect to the [obs | action] rows.
  nn::Vec forward(const nn::Mat& obs, const nn::Mat& actions);
  nn::Mat backward(const nn::Vec& grad_values);

  void blend_target(double rho);  // target <- rho target + (1 - rho) online
  void sync_target();             // hard copy

  void zero_grad();
  std::vector<nn::ParamBlock> param_blocks();  // online net only
  // Saves and restores both copies, "<prefix>.online.*" / "<prefix>.target.*".
  nn::NamedTensors to_tensors(const std::string& prefix) const;
  void load_tensors(const nn::Checkpoint& ckpt, const std::string& prefix);

 private:
  std::size_t obs_dim_ = 0;
  std::size_t action_dim_ = 0;
  nn::DenseNet online_;
  nn::DenseNet target_;
};

// ═══════════════════════════════════════════════════════════════════════════
// Action improvement and critic learning
// ═══════════════════════════════════════════════════════════════════════════

// Hook returning d Q / d action, so analytic stubs can stand in.
using ActionGradFn =
    std::function<nn::Vec(const nn::Vec& obs, const nn::Vec& action)>;

// One gradient-ascent step on the action value: action + beta * dQ/da,
// clamped to the action box. Throws std::invalid_argument on beta < 0 or a
// dimension mismatch and std::runtime_error on a non-finite gradient.
nn::Vec improve_action(const nn::Vec& action, const nn::Vec& obs,
                       const ActionGradFn& grad_q, double beta);
nn::Vec improve_action(const nn::Vec& action, const nn::Vec& obs,
                       Critic& critic, double beta);

// Bootstrap targets y = reward + gamma * (1 - done) * Q_target(next_obs, a')
// where a' comes from the deploy-mode sampler on next_obs.
nn::Vec critic_targets(const Critic& critic,
                       std::span<const AugmentedTransition> batch,
                       const NoiseSchedule& schedule,
                       const NoiseEstimator& estimator, double gamma,
                       Rng& rng);

// Mean squared TD error against fixed targets; accumulates online-net
// parameter gradients. grad_obs, when given, receives d loss / d obs rows so
// upstream encoders can continue the chain.
double critic_loss_backward(Critic& critic, const nn::Mat& obs,
                            const nn::Mat& actions, const nn::Vec& targets,
                            nn::Mat* grad_obs = nullptr);

// One full update: targets, loss backward, one optimizer step on the online
// net, then a Polyak blend of the target. Returns the loss.
double critic_update(Critic& critic, std::span<const AugmentedTransition> batch,
                     const NoiseSchedule& schedule,
                     const NoiseEstimator& estimator, nn::Adam& optimizer,
                     double gamma, double rho, Rng& rng);

}  // namespace taskdp::diff
