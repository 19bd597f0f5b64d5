#pragma once
// Dense networks with explicit reverse-mode gradients, the Adam optimizer,
// and a central-difference gradient checker.
//
// Conventions:
//  - Batches are row-major: X is (batch, features), layer l maps A_{l-1} to
//    Z_l = A_{l-1} W_l^T + b_l, A_l = act(Z_l), with W_l of shape (out, in).
//  - forward() records activations for one subsequent backward(); backward()
//    accumulates parameter gradients in place and returns dLoss/dInput.
//  - infer() is const and records nothing.
//  - Optimizers see parameters through ParamBlock views, so any module that
//    exposes its parameter/gradient storage can share Adam and the checker.

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "taskdp/rng.hpp"
#include "taskdp/tensor.hpp"

namespace taskdp::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class Activation { kRelu, kTanh, kIdentity };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation act);

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::kIdentity;
};

// A mutable view of one parameter array and its gradient accumulator.
struct ParamBlock {
  double* value = nullptr;
  double* grad = nullptr;
  std::size_t size = 0;
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<LayerSpec> layers);  // zero-initialized

  // Xavier-uniform weights (bound sqrt(6/(in+out))), zero biases, drawn in a
  // fixed row-major order so equal seeds give bitwise-equal parameters.
  static DenseNet xavier(std::vector<LayerSpec> layers, Rng& rng);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
  const std::vector<LayerSpec>& layers() const { return layers_; }

  Mat forward(const Mat& x);
  Mat infer(const Mat& x) const;

  // Backpropagates dLoss/dOutput of the most recent forward(). Throws
  // std::logic_error when no forward pass is pending.
  Mat backward(const Mat& grad_output);

  void zero_grad();
  std::vector<ParamBlock> param_blocks();

  // Named parameters as "<prefix>.w0", "<prefix>.b0", ...
  NamedTensors to_tensors(const std::string& prefix) const;
  void load_tensors(const Checkpoint& ckpt, const std::string& prefix);

  // In-place Polyak blend: theta <- rho * theta + (1 - rho) * other.
  void blend_from(const DenseNet& other, double rho);

 private:
  std::vector<LayerSpec> layers_;
  std::vector<Mat> weights_;  // (out, in) per layer
  std::vector<Vec> biases_;
  std::vector<Mat> grad_w_;
  std::vector<Vec> grad_b_;

  // Trace of the pending forward pass: inputs_[l] feeds layer l and
  // outputs_[l] is its post-activation value.
  std::vector<Mat> inputs_;
  std::vector<Mat> outputs_;
  bool trace_valid_ = false;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  // Applies one update from the gradients currently held in the blocks.
  // First-moment/second-moment state is sized on the first call; a later
  // call with a different total size throws std::logic_error, and a
  // non-finite gradient entry throws std::runtime_error.
  void step(std::span<const ParamBlock> params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t steps_taken() const { return t_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
};

// Central-difference check of the gradients currently stored in the blocks
// against the scalar loss closure. The closure must recompute the loss from
// the present parameter values and leave the gradients untouched. Probes
// every entry unless max_probes_per_block caps it, in which case probe
// indices are drawn with rng (required for capped runs). Returns the largest
// relative error max|fd - an| / max(|fd| + |an|, 1e-9). Central differences
// resolve a derivative only down to roundoff (~eps/step), so entries where
// both readings fall below zero_tol count as exact agreement.
double gradcheck_max_rel_err(const std::function<double()>& loss,
                             std::span<const ParamBlock> params,
                             double step = 1e-5, double zero_tol = 1e-7,
                             std::size_t max_probes_per_block = SIZE_MAX,
                             Rng* rng = nullptr);

}  // namespace taskdp::nn
