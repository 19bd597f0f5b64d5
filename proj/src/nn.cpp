#include "taskdp/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace taskdp::nn {

namespace {

Mat apply_activation(Activation act, const Mat& z) {
  switch (act) {
    case Activation::kRelu:
      return z.cwiseMax(0.0);
    case Activation::kTanh:
      return z.array().tanh().matrix();
    case Activation::kIdentity:
      return z;
  }
  throw std::logic_error("unknown activation");
}

// Derivative expressed through the post-activation value: relu and tanh both
// admit that form, which saves caching the pre-activation.
Mat activation_grad_from_output(Activation act, const Mat& a) {
  switch (act) {
    case Activation::kRelu:
      return (a.array() > 0.0).cast<double>().matrix();
    case Activation::kTanh:
      return (1.0 - a.array().square()).matrix();
    case Activation::kIdentity:
      return Mat::Ones(a.rows(), a.cols());
  }
  throw std::logic_error("unknown activation");
}

void validate_layers(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) {
    throw std::invalid_argument("a dense net needs at least one layer");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].in == 0 || layers[l].out == 0) {
      throw std::invalid_argument("layer dimensions must be positive");
    }
    if (l > 0 && layers[l].in != layers[l - 1].out) {
      throw std::invalid_argument(
          "layer " + std::to_string(l) + " expects input width " +
          std::to_string(layers[l].in) + " but the previous layer emits " +
          std::to_string(layers[l - 1].out));
    }
  }
}

}  // namespace

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  if (name == "identity") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation: " + name);
}

std::string to_string(Activation act) {
  switch (act) {
    case Activation::kRelu:
      return "relu";
    case Activation::kTanh:
      return "tanh";
    case Activation::kIdentity:
      return "identity";
  }
  throw std::logic_error("unknown activation");
}

DenseNet::DenseNet(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
  validate_layers(layers_);
  for (const LayerSpec& spec : layers_) {
    const auto rows = static_cast<Eigen::Index>(spec.out);
    const auto cols = static_cast<Eigen::Index>(spec.in);
    weights_.push_back(Mat::Zero(rows, cols));
    biases_.push_back(Vec::Zero(rows));
    grad_w_.push_back(Mat::Zero(rows, cols));
    grad_b_.push_back(Vec::Zero(rows));
  }
  inputs_.resize(layers_.size());
  outputs_.resize(layers_.size());
}

DenseNet DenseNet::xavier(std::vector<LayerSpec> layers, Rng& rng) {
  DenseNet net(std::move(layers));
  for (std::size_t l = 0; l < net.layers_.size(); ++l) {
    const LayerSpec& spec = net.layers_[l];
    const double bound =
        std::sqrt(6.0 / static_cast<double>(spec.in + spec.out));
    Mat& w = net.weights_[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        w(r, c) = rng.uniform(-bound, bound);
      }
    }
  }
  return net;
}

std::size_t DenseNet::input_dim() const {
  if (layers_.empty()) throw std::logic_error("dense net is uninitialized");
  return layers_.front().in;
}

std::size_t DenseNet::output_dim() const {
  if (layers_.empty()) throw std::logic_error("dense net is uninitialized");
  return layers_.back().out;
}

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const LayerSpec& spec : layers_) n += spec.out * (spec.in + 1);
  return n;
}

Mat DenseNet::forward(const Mat& x) {
  if (static_cast<std::size_t>(x.cols()) != input_dim()) {
    throw std::invalid_argument(
        "forward expected " + std::to_string(input_dim()) +
        " input columns, got " + std::to_string(x.cols()));
  }
  Mat a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    inputs_[l] = a;
    Mat z = a * weights_[l].transpose();
    z.rowwise() += biases_[l].transpose();
    a = apply_activation(layers_[l].act, z);
    outputs_[l] = a;
  }
  trace_valid_ = true;
  return a;
}

Mat DenseNet::infer(const Mat& x) const {
  if (static_cast<std::size_t>(x.cols()) != input_dim()) {
    throw std::invalid_argument(
        "infer expected " + std::to_string(input_dim()) +
        " input columns, got " + std::to_string(x.cols()));
  }
  Mat a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Mat z = a * weights_[l].transpose();
    z.rowwise() += biases_[l].transpose();
    a = apply_activation(layers_[l].act, z);
  }
  return a;
}

Mat DenseNet::backward(const Mat& grad_output) {
  if (!trace_valid_) {
    throw std::logic_error("backward called before forward");
  }
  const Mat& last = outputs_.back();
  if (grad_output.rows() != last.rows() || grad_output.cols() != last.cols()) {
    throw std::invalid_argument("gradient shape does not match the output of "
                                "the pending forward pass");
  }
  Mat d = grad_output;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    Mat dz =
        d.cwiseProduct(activation_grad_from_output(layers_[l].act,
                                                   outputs_[l]));
    grad_w_[l] += dz.transpose() * inputs_[l];
    grad_b_[l] += dz.colwise().sum().transpose();
    d = dz * weights_[l];
  }
  trace_valid_ = false;
  return d;
}

void DenseNet::zero_grad() {
  for (Mat& g : grad_w_) g.setZero();
  for (Vec& g : grad_b_) g.setZero();
}

std::vector<ParamBlock> DenseNet::param_blocks() {
  std::vector<ParamBlock> blocks;
  blocks.reserve(2 * layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    blocks.push_back({weights_[l].data(), grad_w_[l].data(),
                      static_cast<std::size_t>(weights_[l].size())});
    blocks.push_back({biases_[l].data(), grad_b_[l].data(),
                      static_cast<std::size_t>(biases_[l].size())});
  }
  return blocks;
}

NamedTensors DenseNet::to_tensors(const std::string& prefix) const {
  NamedTensors out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Mat& w = weights_[l];
    Tensor wt;
    wt.shape = {layers_[l].out, layers_[l].in};
    wt.data.resize(wt.numel());
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        wt.data[static_cast<std::size_t>(r) * layers_[l].in +
                static_cast<std::size_t>(c)] = w(r, c);
      }
    }
    Tensor bt;
    bt.shape = {layers_[l].out};
    bt.data.assign(biases_[l].data(), biases_[l].data() + biases_[l].size());
    out.emplace_back(prefix + ".w" + std::to_string(l), std::move(wt));
    out.emplace_back(prefix + ".b" + std::to_string(l), std::move(bt));
  }
  return out;
}

void DenseNet::load_tensors(const Checkpoint& ckpt, const std::string& prefix) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Tensor& wt = ckpt.expect(prefix + ".w" + std::to_string(l),
                                   {layers_[l].out, layers_[l].in});
    Mat& w = weights_[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        w(r, c) = wt.data[static_cast<std::size_t>(r) * layers_[l].in +
                          static_cast<std::size_t>(c)];
      }
    }
    const Tensor& bt =
        ckpt.expect(prefix + ".b" + std::to_string(l), {layers_[l].out});
    for (Eigen::Index r = 0; r < biases_[l].size(); ++r) {
      biases_[l](r) = bt.data[static_cast<std::size_t>(r)];
    }
  }
}

void DenseNet::blend_from(const DenseNet& other, double rho) {
  if (rho < 0.0 || rho > 1.0) {
    throw std::invalid_argument("blend factor must lie in [0, 1]");
  }
  if (layers_.size() != other.layers_.size()) {
    throw std::logic_error("blend_from requires identical architectures");
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (layers_[l].in != other.layers_[l].in ||
        layers_[l].out != other.layers_[l].out ||
        layers_[l].act != other.layers_[l].act) {
      throw std::logic_error("blend_from requires identical architectures");
    }
    weights_[l] = rho * weights_[l] + (1.0 - rho) * other.weights_[l];
    biases_[l] = rho * biases_[l] + (1.0 - rho) * other.biases_[l];
  }
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0) || !(eps > 0.0) || beta1 < 0.0 || beta1 >= 1.0 ||
      beta2 < 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("invalid Adam hyperparameters");
  }
}

void Adam::step(std::span<const ParamBlock> params) {
  std::size_t total = 0;
  for (const ParamBlock& block : params) total += block.size;
  if (m_.empty()) {
    m_.assign(total, 0.0);
    v_.assign(total, 0.0);
  } else if (m_.size() != total) {
    throw std::logic_error("Adam state was sized for " +
                           std::to_string(m_.size()) + " parameters, got " +
                           std::to_string(total));
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t offset = 0;
  for (const ParamBlock& block : params) {
    for (std::size_t i = 0; i < block.size; ++i) {
      const double g = block.grad[i];
      if (!std::isfinite(g)) {
        throw std::runtime_error("non-finite gradient in Adam step");
      }
      double& m = m_[offset + i];
      double& v = v_[offset + i];
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v + (1.0 - beta2_) * g * g;
      const double m_hat = m / bc1;
      const double v_hat = v / bc2;
      block.value[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
    offset += block.size;
  }
}

double gradcheck_max_rel_err(const std::function<double()>& loss,
                             std::span<const ParamBlock> params, double step,
                             double zero_tol,
                             std::size_t max_probes_per_block, Rng* rng) {
  if (!(step > 0.0) || !(zero_tol >= 0.0)) {
    throw std::invalid_argument("finite-difference step must be positive");
  }
  double worst = 0.0;
  for (const ParamBlock& block : params) {
    std::vector<std::size_t> probes;
    if (block.size <= max_probes_per_block) {
      probes.resize(block.size);
      for (std::size_t i = 0; i < block.size; ++i) probes[i] = i;
    } else {
      if (rng == nullptr) {
        throw std::invalid_argument(
            "capped gradient checks need an rng to pick probe indices");
      }
      probes.resize(max_probes_per_block);
      for (std::size_t& p : probes) p = rng->index(block.size);
    }
    for (std::size_t i : probes) {
      const double saved = block.value[i];
      block.value[i] = saved + step;
      const double f_plus = loss();
      block.value[i] = saved - step;
      const double f_minus = loss();
      block.value[i] = saved;
      const double fd = (f_plus - f_minus) / (2.0 * step);
      const double an = block.grad[i];
      if (std::abs(fd) < zero_tol && std::abs(an) < zero_tol) continue;
      const double rel = std::abs(fd - an) /
                         std::max(std::abs(fd) + std::abs(an), 1e-9);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace taskdp::nn
