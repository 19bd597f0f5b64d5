#pragma once
// Fixed-length task embeddings for temporal-logic formulas.
//
// A formula is serialized to a prefix (Polish) token sequence, embedded with
// a learned token table plus a fixed sinusoidal positional table, and pushed
// through a small residual self-attention encoder. The first (CLS) position
// of the final layer is the embedding. Padding keys are excluded from
// attention with an additive mask large enough that their softmax weight
// underflows to exactly zero, and a trailing padding run is stripped before
// any linear algebra, so appending extra padding never changes the result,
// bit for bit.
//
// The encoder receives no supervised objective of its own: gradients arrive
// only through losses that consume the embedding downstream.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "taskdp/ltl.hpp"
#include "taskdp/nn.hpp"
#include "taskdp/rng.hpp"

namespace taskdp::enc {

inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;

// Token table: padding and CLS first, then the fixed operator alphabet, then
// the declared propositions in sorted order.
class TokenVocab {
 public:
  static TokenVocab build(const std::vector<std::string>& propositions);

  int at(const std::string& token) const;  // throws std::out_of_range
  bool contains(const std::string& token) const;
  std::size_t size() const { return index_.size(); }
  const std::map<std::string, int>& entries() const { return index_; }

  void save_json(const std::string& path) const;
  // Validates injectivity and the PAD=0 / CLS=1 pins.
  static TokenVocab load_json(const std::string& path);

 private:
  std::map<std::string, int> index_;
};

struct EncoderConfig {
  std::size_t model_dim = 32;  // D, split evenly across heads
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ff_dim = 64;
  std::size_t max_tokens = 24;  // padded sequence length from tokenize()

  void validate() const;  // throws std::invalid_argument
};

// CLS followed by the prefix traversal of the syntax tree, padded to
// max_tokens. Throws std::length_error when the traversal does not fit.
std::vector<int> tokenize(const ltl::Formula& phi, const TokenVocab& vocab,
                          std::size_t max_tokens);

// Sinusoidal table: entry(pos, 2i) = sin(pos / 10000^(2i/D)) and
// entry(pos, 2i+1) = cos of the same argument.
nn::Mat positional_embedding(std::size_t rows, std::size_t model_dim);

class TaskEncoder {
 public:
  TaskEncoder(const EncoderConfig& config, std::size_t vocab_size);
  static TaskEncoder xavier(const EncoderConfig& config,
                            std::size_t vocab_size, Rng& rng);

  const EncoderConfig& config() const { return config_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t parameter_count() const;

  // Embedding without recording a trace. Accepts any sequence length >= 1;
  // position 0 is read out.
  nn::Vec encode(const std::vector<int>& tokens) const;

  // Trace-recording forward, paired with one backward(d loss / d embedding).
  nn::Vec forward(const std::vector<int>& tokens);
  void backward(const nn::Vec& grad_embedding);

  void zero_grad();
  std::vector<nn::ParamBlock> param_blocks();

  nn::NamedTensors to_tensors(const std::string& prefix) const;
  void load_tensors(const nn::Checkpoint& ckpt, const std::string& prefix);

 private:
  struct Layer {
    nn::DenseNet q_proj, k_proj, v_proj, o_proj;  // single identity layers
    nn::DenseNet ff;                              // relu then identity
  };

  struct LayerTrace {
    nn::Mat input;                  // rows = positions
    nn::Mat q, k, v;                // projected, heads side by side
    std::vector<nn::Mat> attn;      // per-head softmax weights
    nn::Mat attended;               // concatenated head outputs
    nn::Mat post_attn;              // input + o_proj(attended)
  };

  nn::Mat embed_tokens(const std::vector<int>& tokens) const;
  nn::Mat run_layer(const Layer& layer, const nn::Mat& x,
                    const std::vector<int>& tokens, LayerTrace* trace,
                    bool record) const;

  EncoderConfig config_;
  std::size_t vocab_size_ = 0;
  nn::Mat embedding_;       // vocab_size x D
  nn::Mat grad_embedding_;  // same shape
  std::vector<Layer> layers_;

  std::vector<int> trace_tokens_;
  std::vector<LayerTrace> trace_;
  bool trace_valid_ = false;
};

}  // namespace taskdp::enc
