#pragma once
// Flat float64 tensors and the named-tensor checkpoint container.
//
// Checkpoint layout (all integers little-endian):
//   magic "TDPCKPT\0" | u32 version | u32 kind_len | kind bytes
//   u32 tensor_count | per tensor: u32 name_len, name, u32 ndim, u64 dims[]
//   then one contiguous float64 block per tensor, in header order.
// The kind string names the network architecture the parameters belong to;
// loaders reject checkpoints whose kind or shapes do not match what the
// caller is reconstructing.

#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace taskdp::nn {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;  // row-major

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_, std::vector<double> data_)
      : shape(std::move(shape_)), data(std::move(data_)) {}

  static Tensor zeros(std::vector<std::size_t> shape);

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
  }

  // Throws std::invalid_argument unless data length matches the shape and
  // every entry is finite.
  void validate() const;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const std::string& kind,
                     const NamedTensors& tensors);

struct Checkpoint {
  std::string kind;
  NamedTensors tensors;

  // Tensor by name; throws std::runtime_error when missing or of a
  // different shape than expected.
  const Tensor& expect(const std::string& name,
                       const std::vector<std::size_t>& shape) const;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace taskdp::nn
