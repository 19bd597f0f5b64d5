#include "taskdp/task_encoder.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace taskdp::enc {

namespace {

using nn::Mat;
using nn::Vec;

// Additive score penalty for padding keys. After the stable-softmax shift
// the masked exponent is below -700, so exp() underflows to exactly 0.0 and
// padded positions carry literally no attention weight.
constexpr double kMaskPenalty = -1e9;

const std::vector<std::string>& builtin_tokens() {
  static const std::vector<std::string> tokens = {
      "<pad>", "<cls>", "true", "false", "!", "&", "|", "X", "F", "U"};
  return tokens;
}

struct Attention {
  std::vector<Mat> weights;  // one row-stochastic matrix per head
  Mat attended;
};

Attention attend(const Mat& q, const Mat& k, const Mat& v,
                 const std::vector<int>& tokens, std::size_t heads) {
  const Eigen::Index n = q.rows();
  const Eigen::Index dh = q.cols() / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Attention out;
  out.weights.reserve(heads);
  out.attended.resize(n, q.cols());
  // Reductions over the sequence run as explicit sequential loops that skip
  // exactly-masked entries, so a sequence extended with padding reproduces
  // the shorter sequence's arithmetic bit for bit.
  for (std::size_t h = 0; h < heads; ++h) {
    const auto col = static_cast<Eigen::Index>(h) * dh;
    const auto qh = q.middleCols(col, dh);
    const auto kh = k.middleCols(col, dh);
    const auto vh = v.middleCols(col, dh);
    Mat weights(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
      Eigen::VectorXd scores(n);
      double peak = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        double s = scale * qh.row(r).dot(kh.row(j));
        if (tokens[static_cast<std::size_t>(j)] == kPadToken) {
          s += kMaskPenalty;
        }
        scores(j) = s;
        peak = std::max(peak, s);
      }
      double denom = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        scores(j) = std::exp(scores(j) - peak);
        denom += scores(j);
      }
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dh);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double w = scores(j) / denom;
        weights(r, j) = w;
        if (w != 0.0) acc += w * vh.row(j);
      }
      out.attended.block(r, col, 1, dh) = acc;
    }
    out.weights.push_back(std::move(weights));
  }
  return out;
}

void validate_tokens(const std::vector<int>& tokens, std::size_t vocab_size) {
  if (tokens.empty()) {
    throw std::invalid_argument("cannot encode an empty token sequence");
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) +
                                  " is outside the vocabulary");
    }
  }
}

// Padding keys are masked out of attention and every other stage acts per
// position, so a trailing run of padding cannot influence the readout.
// Dropping it before any linear algebra makes that exact: a sequence and its
// padded extension run literally the same arithmetic.
std::vector<int> strip_padding_suffix(const std::vector<int>& tokens,
                                      std::size_t vocab_size) {
  validate_tokens(tokens, vocab_size);
  std::size_t used = tokens.size();
  while (used > 0 && tokens[used - 1] == kPadToken) --used;
  if (used == 0) {
    throw std::invalid_argument("token sequence contains only padding");
  }
  return std::vector<int>(tokens.begin(),
                          tokens.begin() + static_cast<std::ptrdiff_t>(used));
}

}  // namespace

// ═══════════════════════════════════════════════════════════════════════════
// Vocabulary
// ═══════════════════════════════════════════════════════════════════════════

TokenVocab TokenVocab::build(const std::vector<std::string>& propositions) {
  TokenVocab vocab;
  int next = 0;
  for (const std::string& token : builtin_tokens()) {
    vocab.index_[token] = next++;
  }
  std::vector<std::string> props = propositions;
  std::sort(props.begin(), props.end());
  props.erase(std::unique(props.begin(), props.end()), props.end());
  for (const std::string& prop : props) {
    // Reuse the formula-side name validation so the vocabulary can never
    // contain a token that a parsed formula could not produce.
    (void)ltl::Formula::atom(prop);
    vocab.index_[prop] = next++;
  }
  return vocab;
}

int TokenVocab::at(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) {
    throw std::out_of_range("token not in vocabulary: " + token);
  }
  return it->second;
}

bool TokenVocab::contains(const std::string& token) const {
  return index_.count(token) > 0;
}

void TokenVocab::save_json(const std::string& path) const {
  nlohmann::json j(index_);
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open vocabulary for writing: " + path);
  }
  out << j.dump(2) << "\n";
}

TokenVocab TokenVocab::load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open vocabulary: " + path);
  }
  nlohmann::json j;
  in >> j;
  if (!j.is_object()) {
    throw std::runtime_error("vocabulary must be a JSON object");
  }
  TokenVocab vocab;
  std::vector<bool> seen(j.size(), false);
  for (const auto& [token, value] : j.items()) {
    if (!value.is_number_integer()) {
      throw std::runtime_error("vocabulary index for '" + token +
                               "' is not an integer");
    }
    const int idx = value.get<int>();
    if (idx < 0 || static_cast<std::size_t>(idx) >= j.size() || seen[idx]) {
      throw std::runtime_error("vocabulary indices must be a permutation of "
                               "0..n-1");
    }
    seen[idx] = true;
    vocab.index_[token] = idx;
  }
  if (vocab.at("<pad>") != kPadToken || vocab.at("<cls>") != kClsToken) {
    throw std::runtime_error("vocabulary must pin <pad>=0 and <cls>=1");
  }
  return vocab;
}

// ═══════════════════════════════════════════════════════════════════════════
// Tokenization and positions
// ═══════════════════════════════════════════════════════════════════════════

void EncoderConfig::validate() const {
  if (model_dim == 0 || heads == 0 || layers == 0 || ff_dim == 0) {
    throw std::invalid_argument("encoder dimensions must be positive");
  }
  if (model_dim % heads != 0) {
    throw std::invalid_argument("model dim " + std::to_string(model_dim) +
                                " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (model_dim % 2 != 0) {
    throw std::invalid_argument("model dim must be even for the sinusoidal "
                                "positional table");
  }
  if (max_tokens < 2) {
    throw std::invalid_argument("max tokens must cover CLS plus a formula");
  }
}

std::vector<int> tokenize(const ltl::Formula& phi, const TokenVocab& vocab,
                          std::size_t max_tokens) {
  std::vector<int> tokens = {kClsToken};
  auto emit = [&](auto&& self, const ltl::Formula& f) -> void {
    using ltl::Op;
    switch (f.op()) {
      case Op::True:
        tokens.push_back(vocab.at("true"));
        return;
      case Op::False:
        tokens.push_back(vocab.at("false"));
        return;
      case Op::Atom:
        tokens.push_back(vocab.at(f.name()));
        return;
      case Op::Not:
        tokens.push_back(vocab.at("!"));
        self(self, f.lhs());
        return;
      case Op::And:
        tokens.push_back(vocab.at("&"));
        self(self, f.lhs());
        self(self, f.rhs());
        return;
      case Op::Or:
        tokens.push_back(vocab.at("|"));
        self(self, f.lhs());
        self(self, f.rhs());
        return;
      case Op::Next:
        tokens.push_back(vocab.at("X"));
        self(self, f.lhs());
        return;
      case Op::Eventually:
        tokens.push_back(vocab.at("F"));
        self(self, f.lhs());
        return;
      case Op::Until:
        tokens.push_back(vocab.at("U"));
        self(self, f.lhs());
        self(self, f.rhs());
        return;
    }
    throw std::logic_error("unknown operator during tokenization");
  };
  emit(emit, phi);
  if (tokens.size() > max_tokens) {
    throw std::length_error("formula tokenizes to " +
                            std::to_string(tokens.size()) +
                            " tokens, exceeding the limit of " +
                            std::to_string(max_tokens) + ": " +
                            ltl::format(phi));
  }
  tokens.resize(max_tokens, kPadToken);
  return tokens;
}

Mat positional_embedding(std::size_t rows, std::size_t model_dim) {
  if (model_dim == 0 || model_dim % 2 != 0) {
    throw std::invalid_argument("positional table needs an even model dim");
  }
  Mat table(rows, model_dim);
  for (std::size_t pos = 0; pos < rows; ++pos) {
    for (std::size_t i = 0; i < model_dim / 2; ++i) {
      const double arg =
          static_cast<double>(pos) /
          std::pow(10000.0, (2.0 * static_cast<double>(i)) /
                                static_cast<double>(model_dim));
      table(static_cast<Eigen::Index>(pos),
            static_cast<Eigen::Index>(2 * i)) = std::sin(arg);
      table(static_cast<Eigen::Index>(pos),
            static_cast<Eigen::Index>(2 * i + 1)) = std::cos(arg);
    }
  }
  return table;
}

// ═══════════════════════════════════════════════════════════════════════════
// Encoder
// ═══════════════════════════════════════════════════════════════════════════

TaskEncoder::TaskEncoder(const EncoderConfig& config, std::size_t vocab_size)
    : config_(config), vocab_size_(vocab_size) {
  config_.validate();
  if (vocab_size_ < 2) {
    throw std::invalid_argument("vocabulary must contain at least PAD and "
                                "CLS");
  }
  const std::size_t d = config_.model_dim;
  embedding_ = Mat::Zero(static_cast<Eigen::Index>(vocab_size_),
                         static_cast<Eigen::Index>(d));
  grad_embedding_ = embedding_;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    Layer layer;
    layer.q_proj = nn::DenseNet({{d, d, nn::Activation::kIdentity}});
    layer.k_proj = nn::DenseNet({{d, d, nn::Activation::kIdentity}});
    layer.v_proj = nn::DenseNet({{d, d, nn::Activation::kIdentity}});
    layer.o_proj = nn::DenseNet({{d, d, nn::Activation::kIdentity}});
    layer.ff = nn::DenseNet({{d, config_.ff_dim, nn::Activation::kRelu},
                             {config_.ff_dim, d, nn::Activation::kIdentity}});
    layers_.push_back(std::move(layer));
  }
  trace_.resize(config_.layers);
}

TaskEncoder TaskEncoder::xavier(const EncoderConfig& config,
                                std::size_t vocab_size, Rng& rng) {
  TaskEncoder enc(config, vocab_size);
  const std::size_t d = config.model_dim;
  const double bound =
      std::sqrt(6.0 / static_cast<double>(vocab_size + d));
  for (Eigen::Index r = 0; r < enc.embedding_.rows(); ++r) {
    for (Eigen::Index c = 0; c < enc.embedding_.cols(); ++c) {
      enc.embedding_(r, c) = rng.uniform(-bound, bound);
    }
  }
  for (Layer& layer : enc.layers_) {
    layer.q_proj =
        nn::DenseNet::xavier({{d, d, nn::Activation::kIdentity}}, rng);
    layer.k_proj =
        nn::DenseNet::xavier({{d, d, nn::Activation::kIdentity}}, rng);
    layer.v_proj =
        nn::DenseNet::xavier({{d, d, nn::Activation::kIdentity}}, rng);
    layer.o_proj =
        nn::DenseNet::xavier({{d, d, nn::Activation::kIdentity}}, rng);
    layer.ff = nn::DenseNet::xavier(
        {{d, config.ff_dim, nn::Activation::kRelu},
         {config.ff_dim, d, nn::Activation::kIdentity}},
        rng);
  }
  return enc;
}

std::size_t TaskEncoder::parameter_count() const {
  std::size_t n = vocab_size_ * config_.model_dim;
  for (const Layer& layer : layers_) {
    n += layer.q_proj.parameter_count() + layer.k_proj.parameter_count() +
         layer.v_proj.parameter_count() + layer.o_proj.parameter_count() +
         layer.ff.parameter_count();
  }
  return n;
}

Mat TaskEncoder::embed_tokens(const std::vector<int>& tokens) const {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Mat x(n, static_cast<Eigen::Index>(config_.model_dim));
  const Mat pos = positional_embedding(tokens.size(), config_.model_dim);
  for (Eigen::Index t = 0; t < n; ++t) {
    x.row(t) = embedding_.row(tokens[static_cast<std::size_t>(t)]) +
               pos.row(t);
  }
  return x;
}

Vec TaskEncoder::encode(const std::vector<int>& tokens) const {
  const std::vector<int> active = strip_padding_suffix(tokens, vocab_size_);
  Mat x = embed_tokens(active);
  for (const Layer& layer : layers_) {
    Attention att = attend(layer.q_proj.infer(x), layer.k_proj.infer(x),
                           layer.v_proj.infer(x), active, config_.heads);
    Mat z = x + layer.o_proj.infer(att.attended);
    x = z + layer.ff.infer(z);
  }
  return x.row(0).transpose();
}

Vec TaskEncoder::forward(const std::vector<int>& tokens) {
  const std::vector<int> active = strip_padding_suffix(tokens, vocab_size_);
  Mat x = embed_tokens(active);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Layer& layer = layers_[l];
    LayerTrace& tr = trace_[l];
    tr.input = x;
    tr.q = layer.q_proj.forward(x);
    tr.k = layer.k_proj.forward(x);
    tr.v = layer.v_proj.forward(x);
    Attention att = attend(tr.q, tr.k, tr.v, active, config_.heads);
    tr.attn = std::move(att.weights);
    tr.attended = std::move(att.attended);
    tr.post_attn = x + layer.o_proj.forward(tr.attended);
    x = tr.post_attn + layer.ff.forward(tr.post_attn);
  }
  trace_tokens_ = active;
  trace_valid_ = true;
  return x.row(0).transpose();
}

void TaskEncoder::backward(const Vec& grad_embedding) {
  if (!trace_valid_) {
    throw std::logic_error("backward called before forward");
  }
  if (grad_embedding.size() !=
      static_cast<Eigen::Index>(config_.model_dim)) {
    throw std::invalid_argument("embedding gradient has the wrong length");
  }
  const auto n = static_cast<Eigen::Index>(trace_tokens_.size());
  const auto dh = static_cast<Eigen::Index>(config_.model_dim /
                                            config_.heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dx = Mat::Zero(n, static_cast<Eigen::Index>(config_.model_dim));
  dx.row(0) = grad_embedding.transpose();

  for (std::size_t l = layers_.size(); l-- > 0;) {
    Layer& layer = layers_[l];
    LayerTrace& tr = trace_[l];

    // x_next = z + ff(z) with z = x + o_proj(attended)
    Mat dz = dx + layer.ff.backward(dx);
    Mat datt = layer.o_proj.backward(dz);

    Mat dq(n, static_cast<Eigen::Index>(config_.model_dim));
    Mat dk(n, static_cast<Eigen::Index>(config_.model_dim));
    Mat dv(n, static_cast<Eigen::Index>(config_.model_dim));
    for (std::size_t h = 0; h < config_.heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      const Mat& p = tr.attn[h];
      const auto vh = tr.v.middleCols(col, dh);
      const auto doh = datt.middleCols(col, dh);

      Mat dp = doh * vh.transpose();
      dv.middleCols(col, dh) = p.transpose() * doh;

      // Row-wise softmax backward; masked columns have p == 0 exactly, so
      // they receive zero score gradient.
      Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
      Mat ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix();

      dq.middleCols(col, dh) = scale * (ds * tr.k.middleCols(col, dh));
      dk.middleCols(col, dh) =
          scale * (ds.transpose() * tr.q.middleCols(col, dh));
    }

    dx = dz + layer.q_proj.backward(dq) + layer.k_proj.backward(dk) +
         layer.v_proj.backward(dv);
  }

  for (Eigen::Index t = 0; t < n; ++t) {
    grad_embedding_.row(trace_tokens_[static_cast<std::size_t>(t)]) +=
        dx.row(t);
  }
  trace_valid_ = false;
}

void TaskEncoder::zero_grad() {
  grad_embedding_.setZero();
  for (Layer& layer : layers_) {
    layer.q_proj.zero_grad();
    layer.k_proj.zero_grad();
    layer.v_proj.zero_grad();
    layer.o_proj.zero_grad();
    layer.ff.zero_grad();
  }
}

std::vector<nn::ParamBlock> TaskEncoder::param_blocks() {
  std::vector<nn::ParamBlock> blocks;
  blocks.push_back({embedding_.data(), grad_embedding_.data(),
                    static_cast<std::size_t>(embedding_.size())});
  for (Layer& layer : layers_) {
    for (nn::DenseNet* net : {&layer.q_proj, &layer.k_proj, &layer.v_proj,
                              &layer.o_proj, &layer.ff}) {
      auto sub = net->param_blocks();
      blocks.insert(blocks.end(), sub.begin(), sub.end());
    }
  }
  return blocks;
}

nn::NamedTensors TaskEncoder::to_tensors(const std::string& prefix) const {
  nn::NamedTensors out;
  nn::Tensor embed;
  embed.shape = {vocab_size_, config_.model_dim};
  embed.data.resize(embed.numel());
  for (Eigen::Index r = 0; r < embedding_.rows(); ++r) {
    for (Eigen::Index c = 0; c < embedding_.cols(); ++c) {
      embed.data[static_cast<std::size_t>(r) * config_.model_dim +
                 static_cast<std::size_t>(c)] = embedding_(r, c);
    }
  }
  out.emplace_back(prefix + ".embed", std::move(embed));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string base = prefix + ".l" + std::to_string(l);
    for (const auto& [net, tag] :
         std::initializer_list<std::pair<const nn::DenseNet*, const char*>>{
             {&layers_[l].q_proj, ".q"},
             {&layers_[l].k_proj, ".k"},
             {&layers_[l].v_proj, ".v"},
             {&layers_[l].o_proj, ".o"},
             {&layers_[l].ff, ".ff"}}) {
      nn::NamedTensors sub = net->to_tensors(base + tag);
      out.insert(out.end(), std::make_move_iterator(sub.begin()),
                 std::make_move_iterator(sub.end()));
    }
  }
  return out;
}

void TaskEncoder::load_tensors(const nn::Checkpoint& ckpt,
                               const std::string& prefix) {
  const nn::Tensor& embed =
      ckpt.expect(prefix + ".embed", {vocab_size_, config_.model_dim});
  for (Eigen::Index r = 0; r < embedding_.rows(); ++r) {
    for (Eigen::Index c = 0; c < embedding_.cols(); ++c) {
      embedding_(r, c) =
          embed.data[static_cast<std::size_t>(r) * config_.model_dim +
                     static_cast<std::size_t>(c)];
    }
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string base = prefix + ".l" + std::to_string(l);
    layers_[l].q_proj.load_tensors(ckpt, base + ".q");
    layers_[l].k_proj.load_tensors(ckpt, base + ".k");
    layers_[l].v_proj.load_tensors(ckpt, base + ".v");
    layers_[l].o_proj.load_tensors(ckpt, base + ".o");
    layers_[l].ff.load_tensors(ckpt, base + ".ff");
  }
}

}  // namespace taskdp::enc
