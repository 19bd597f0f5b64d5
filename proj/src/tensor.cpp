#include "taskdp/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

// The serializer writes raw host bytes, so the format is little-endian only
// as long as the host is. Every deployment target here is x86-64.
static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace taskdp::nn {

namespace {

constexpr char kMagic[8] = {'T', 'D', 'P', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("incompatible checkpoint: truncated " + what);
  }
  return v;
}

std::uint64_t read_u64(std::istream& in, const std::string& what) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("incompatible checkpoint: truncated " + what);
  }
  return v;
}

std::string read_string(std::istream& in, const std::string& what) {
  std::uint32_t len = read_u32(in, what + " length");
  if (len > (1u << 20)) {
    throw std::runtime_error("incompatible checkpoint: implausible " + what +
                             " length");
  }
  std::string s(len, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(len))) {
    throw std::runtime_error("incompatible checkpoint: truncated " + what);
  }
  return s;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(t.numel(), 0.0);
  return t;
}

void Tensor::validate() const {
  if (data.size() != numel()) {
    throw std::invalid_argument("tensor data length " +
                                std::to_string(data.size()) +
                                " does not match shape " +
                                shape_string(shape));
  }
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("tensor contains a non-finite entry");
    }
  }
}

void save_checkpoint(const std::string& path, const std::string& kind,
                     const NamedTensors& tensors) {
  for (const auto& [name, tensor] : tensors) {
    tensor.validate();
    if (name.empty()) {
      throw std::invalid_argument("checkpoint tensors must be named");
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open checkpoint for writing: " + path);
  }
  out.write(kMagic, sizeof kMagic);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(kind.size()));
  out.write(kind.data(), static_cast<std::streamsize>(kind.size()));
  write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(tensor.shape.size()));
    for (std::size_t d : tensor.shape) {
      write_u64(out, static_cast<std::uint64_t>(d));
    }
  }
  for (const auto& [name, tensor] : tensors) {
    (void)name;
    out.write(reinterpret_cast<const char*>(tensor.data.data()),
              static_cast<std::streamsize>(tensor.data.size() *
                                           sizeof(double)));
  }
  if (!out) {
    throw std::runtime_error("failed writing checkpoint: " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open checkpoint: " + path);
  }
  char magic[sizeof kMagic] = {};
  if (!in.read(magic, sizeof magic) ||
      std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("incompatible checkpoint: bad magic in " + path);
  }
  std::uint32_t version = read_u32(in, "version");
  if (version != kVersion) {
    throw std::runtime_error("incompatible checkpoint: version " +
                             std::to_string(version) + " (expected " +
                             std::to_string(kVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.kind = read_string(in, "kind");
  std::uint32_t count = read_u32(in, "tensor count");
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(in, "tensor name");
    std::uint32_t ndim = read_u32(in, "tensor rank");
    if (ndim > 8) {
      throw std::runtime_error("incompatible checkpoint: implausible rank");
    }
    Tensor t;
    t.shape.resize(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape[d] = static_cast<std::size_t>(read_u64(in, "tensor dim"));
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  for (auto& [name, tensor] : ckpt.tensors) {
    tensor.data.resize(tensor.numel());
    if (!in.read(reinterpret_cast<char*>(tensor.data.data()),
                 static_cast<std::streamsize>(tensor.data.size() *
                                              sizeof(double)))) {
      throw std::runtime_error("incompatible checkpoint: truncated data for " +
                               name);
    }
  }
  return ckpt;
}

const Tensor& Checkpoint::expect(const std::string& name,
                                 const std::vector<std::size_t>& shape) const {
  for (const auto& [n, t] : tensors) {
    if (n != name) continue;
    if (t.shape != shape) {
      throw std::runtime_error("incompatible checkpoint: tensor " + name +
                               " has shape " + shape_string(t.shape) +
                               ", expected " + shape_string(shape));
    }
    return t;
  }
  throw std::runtime_error("incompatible checkpoint: missing tensor " + name);
}

}  // namespace taskdp::nn
