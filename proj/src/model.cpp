#include "tempo/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>

#include "tempo/error.hpp"

namespace tempo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using ConstRowVecMap = Eigen::Map<const RowVec>;

Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

// x [1×in] · W [in×out] + b.
std::vector<double> linear_row(std::span<const double> x, const Tensor& w, const Tensor& b) {
  const auto in = static_cast<Eigen::Index>(w.shape()[0]);
  const auto out = static_cast<Eigen::Index>(w.shape()[1]);
  std::vector<double> y(static_cast<std::size_t>(out));
  Eigen::Map<RowVec> ym(y.data(), out);
  ym.noalias() = ConstRowVecMap(x.data(), in) * ConstMatMap(w.raw(), in, out);
  ym += ConstRowVecMap(b.raw(), out);
  return y;
}

std::vector<bool> valid_mask(const TokenBatch& tokens) {
  std::vector<bool> mask(tokens.ids.size());
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) mask[i] = tokens.ids[i] != kPadId;
  return mask;
}

}  // namespace

double positional_encoding(std::size_t position, std::size_t channel, std::size_t dim) {
  const double pair = static_cast<double>(channel / 2 * 2);
  const double angle =
      static_cast<double>(position) / std::pow(10000.0, pair / static_cast<double>(dim));
  return channel % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (model_dim == 0) fail("model_dim must be positive");
  if (num_heads == 0) fail("num_heads must be positive");
  if (model_dim % num_heads != 0) fail("model_dim must be divisible by num_heads");
  if (ff_dim == 0) fail("ff_dim must be positive");
  if (source_vocab == 0 || target_vocab == 0) fail("vocabulary sizes must be positive");
  if (max_positions == 0) fail("max_positions must be positive");
  for (double rate : {attention_dropout, embedding_dropout, layer_dropout}) {
    if (!(rate >= 0.0 && rate < 1.0)) fail("dropout rates must lie in [0, 1)");
  }
  if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
}

void ModelConfig::disable_dropout() {
  attention_dropout = 0.0;
  embedding_dropout = 0.0;
  layer_dropout = 0.0;
}

std::size_t ParameterSet::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter " + name);
  index_.emplace(name, values_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

const Tensor& ParameterSet::at(const std::string& name) const { return values_[index(name)]; }

std::size_t ParameterSet::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : values_) n += t.size();
  return n;
}

TokenBatch TokenBatch::from_sequences(std::span<const TokenIds> seqs) {
  TokenBatch out;
  out.batch = seqs.size();
  for (const auto& s : seqs) out.length = std::max(out.length, s.size());
  out.ids.assign(out.batch * out.length, kPadId);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    std::copy(seqs[b].begin(), seqs[b].end(), out.ids.begin() + static_cast<std::ptrdiff_t>(b * out.length));
  }
  return out;
}

// ---------------------------------------------------------------------------

TransformerModel TransformerModel::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TransformerModel m;
  m.cfg_ = cfg;
  m.build_layout(true, seed);
  return m;
}

TransformerModel TransformerModel::from_parameters(const ModelConfig& cfg, ParameterSet params) {
  cfg.validate();
  TransformerModel m;
  m.cfg_ = cfg;
  m.params_ = std::move(params);
  m.build_layout(false, 0);
  return m;
}

void TransformerModel::build_layout(bool allocate, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = cfg_.model_dim;
  enum class Init { kXavier, kEmbedding, kZero, kOne };
  std::size_t expected = 0;

  auto param = [&](const std::string& name, Shape shape, Init init) -> std::size_t {
    ++expected;
    if (!allocate) {
      if (!params_.contains(name)) throw DataError("missing parameter " + name);
      const std::size_t idx = params_.index(name);
      if (params_.value(idx).shape() != shape) {
        throw DataError("parameter " + name + " has shape " + shape_string(params_.value(idx).shape()) +
                        ", expected " + shape_string(shape));
      }
      return idx;
    }
    Tensor t = Tensor::zeros(shape);
    switch (init) {
      case Init::kXavier: {
        const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
        for (double& x : t.mutable_data()) x = rng.uniform(-limit, limit);
        break;
      }
      case Init::kEmbedding: {
        const double limit = std::sqrt(3.0 / static_cast<double>(d));
        for (double& x : t.mutable_data()) x = rng.uniform(-limit, limit);
        break;
      }
      case Init::kOne:
        for (double& x : t.mutable_data()) x = 1.0;
        break;
      case Init::kZero:
        break;
    }
    return params_.add(name, std::move(t));
  };
  auto attention = [&](const std::string& prefix) {
    AttentionParams a{};
    a.wq = param(prefix + ".wq", {d, d}, Init::kXavier);
    a.bq = param(prefix + ".bq", {d}, Init::kZero);
    a.wk = param(prefix + ".wk", {d, d}, Init::kXavier);
    a.bk = param(prefix + ".bk", {d}, Init::kZero);
    a.wv = param(prefix + ".wv", {d, d}, Init::kXavier);
    a.bv = param(prefix + ".bv", {d}, Init::kZero);
    a.wo = param(prefix + ".wo", {d, d}, Init::kXavier);
    a.bo = param(prefix + ".bo", {d}, Init::kZero);
    return a;
  };
  auto norm = [&](const std::string& prefix) {
    return NormParams{param(prefix + ".gain", {d}, Init::kOne), param(prefix + ".bias", {d}, Init::kZero)};
  };
  auto feed_forward = [&](const std::string& prefix) {
    FeedForwardParams f{};
    f.w1 = param(prefix + ".w1", {d, cfg_.ff_dim}, Init::kXavier);
    f.b1 = param(prefix + ".b1", {cfg_.ff_dim}, Init::kZero);
    f.w2 = param(prefix + ".w2", {cfg_.ff_dim, d}, Init::kXavier);
    f.b2 = param(prefix + ".b2", {d}, Init::kZero);
    return f;
  };

  src_embed_ = param("src_embed", {cfg_.source_vocab, d}, Init::kEmbedding);
  tgt_embed_ = param("tgt_embed", {cfg_.target_vocab, d}, Init::kEmbedding);
  const std::size_t stacks = cfg_.recurrent_stacking ? std::min<std::size_t>(1, cfg_.num_layers) : cfg_.num_layers;
  encoder_.clear();
  decoder_.clear();
  for (std::size_t l = 0; l < stacks; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncoderLayer layer{};
    layer.self = attention(p + ".self_attn");
    layer.norm1 = norm(p + ".norm1");
    layer.ff = feed_forward(p + ".ff");
    layer.norm2 = norm(p + ".norm2");
    encoder_.push_back(layer);
  }
  for (std::size_t l = 0; l < stacks; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayer layer{};
    layer.self = attention(p + ".self_attn");
    layer.norm1 = norm(p + ".norm1");
    layer.cross = attention(p + ".cross_attn");
    layer.norm2 = norm(p + ".norm2");
    layer.ff = feed_forward(p + ".ff");
    layer.norm3 = norm(p + ".norm3");
    decoder_.push_back(layer);
  }
  out_w_ = param("out.w", {d, cfg_.target_vocab}, Init::kXavier);
  out_b_ = param("out.b", {cfg_.target_vocab}, Init::kZero);
  if (!allocate && expected != params_.size()) {
    throw DataError("parameter set has " + std::to_string(params_.size()) + " entries, expected " +
                    std::to_string(expected));
  }
}

const TransformerModel::EncoderLayer& TransformerModel::encoder_layer(std::size_t pos) const {
  return encoder_[cfg_.recurrent_stacking ? 0 : pos];
}

const TransformerModel::DecoderLayer& TransformerModel::decoder_layer(std::size_t pos) const {
  return decoder_[cfg_.recurrent_stacking ? 0 : pos];
}

std::vector<Var> TransformerModel::bind(Tape& tape, bool tracked) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    vars.push_back(tracked ? tape.variable(params_.value(i)) : tape.constant(params_.value(i)));
  }
  return vars;
}

Var TransformerModel::embed(Tape& tape, Var table, const TokenBatch& tokens,
                            const ForwardOptions& opts) const {
  const std::size_t d = cfg_.model_dim;
  if (tokens.length > cfg_.max_positions) {
    throw DataError("sequence length " + std::to_string(tokens.length) + " exceeds max_positions " +
                    std::to_string(cfg_.max_positions));
  }
  Var x = scale(embedding(table, tokens.ids), std::sqrt(static_cast<double>(d)));
  Tensor pos = Tensor::zeros({tokens.batch * tokens.length, d});
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    for (std::size_t t = 0; t < tokens.length; ++t) {
      for (std::size_t c = 0; c < d; ++c) pos[(b * tokens.length + t) * d + c] = positional_encoding(t, c, d);
    }
  }
  x = add(x, tape.constant(std::move(pos)));
  if (opts.training && cfg_.embedding_dropout > 0.0) x = dropout(x, cfg_.embedding_dropout, *opts.rng);
  return x;
}

Var TransformerModel::encode_batch(Tape& tape, std::span<const Var> p, const TokenBatch& source,
                                   const ForwardOptions& opts) const {
  const bool train = opts.training;
  if (train && opts.rng == nullptr) throw ContractError("training forward requires an rng");
  auto branch_dropout = [&](Var v) {
    return train && cfg_.layer_dropout > 0.0 ? dropout(v, cfg_.layer_dropout, *opts.rng) : v;
  };
  const double attn_drop = train ? cfg_.attention_dropout : 0.0;

  AttentionShape enc_shape;
  enc_shape.batch = source.batch;
  enc_shape.query_len = source.length;
  enc_shape.key_len = source.length;
  enc_shape.heads = cfg_.num_heads;
  enc_shape.key_valid = valid_mask(source);

  Var x = embed(tape, p[src_embed_], source, opts);
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const EncoderLayer& L = encoder_layer(l);
    Var a = multi_head_attention(linear(x, p[L.self.wq], p[L.self.bq]), linear(x, p[L.self.wk], p[L.self.bk]),
                                 linear(x, p[L.self.wv], p[L.self.bv]), enc_shape, attn_drop, opts.rng);
    a = linear(a, p[L.self.wo], p[L.self.bo]);
    x = layer_norm(add(x, branch_dropout(a)), p[L.norm1.gain], p[L.norm1.bias], cfg_.layer_norm_eps);
    Var f = linear(relu(linear(x, p[L.ff.w1], p[L.ff.b1])), p[L.ff.w2], p[L.ff.b2]);
    x = layer_norm(add(x, branch_dropout(f)), p[L.norm2.gain], p[L.norm2.bias], cfg_.layer_norm_eps);
  }
  return x;
}

Var TransformerModel::forward(Tape& tape, std::span<const Var> p, const TokenBatch& source,
                              const TokenBatch& target, const ForwardOptions& opts) const {
  if (p.size() != params_.size()) throw ContractError("bound parameter count mismatch");
  if (source.batch != target.batch) throw ContractError("source/target batch sizes differ");
  if (source.batch == 0 || source.length == 0 || target.length == 0) {
    throw ContractError("empty batch");
  }
  for (std::size_t b = 0; b < target.batch; ++b) {
    if (target.at(b, 0) != kBosId) throw DataError("target row " + std::to_string(b) + " does not start with BOS");
  }
  const bool train = opts.training;
  auto branch_dropout = [&](Var v) {
    return train && cfg_.layer_dropout > 0.0 ? dropout(v, cfg_.layer_dropout, *opts.rng) : v;
  };
  const double attn_drop = train ? cfg_.attention_dropout : 0.0;

  Var memory = encode_batch(tape, p, source, opts);

  AttentionShape self_shape;
  self_shape.batch = target.batch;
  self_shape.query_len = target.length;
  self_shape.key_len = target.length;
  self_shape.heads = cfg_.num_heads;
  self_shape.causal = true;
  self_shape.key_valid = valid_mask(target);
  AttentionShape cross_shape;
  cross_shape.batch = target.batch;
  cross_shape.query_len = target.length;
  cross_shape.key_len = source.length;
  cross_shape.heads = cfg_.num_heads;
  cross_shape.key_valid = valid_mask(source);

  Var x = embed(tape, p[tgt_embed_], target, opts);
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const DecoderLayer& L = decoder_layer(l);
    Var a = multi_head_attention(linear(x, p[L.self.wq], p[L.self.bq]), linear(x, p[L.self.wk], p[L.self.bk]),
                                 linear(x, p[L.self.wv], p[L.self.bv]), self_shape, attn_drop, opts.rng);
    a = linear(a, p[L.self.wo], p[L.self.bo]);
    x = layer_norm(add(x, branch_dropout(a)), p[L.norm1.gain], p[L.norm1.bias], cfg_.layer_norm_eps);
    Var c = multi_head_attention(linear(x, p[L.cross.wq], p[L.cross.bq]),
                                 linear(memory, p[L.cross.wk], p[L.cross.bk]),
                                 linear(memory, p[L.cross.wv], p[L.cross.bv]), cross_shape, attn_drop, opts.rng);
    c = linear(c, p[L.cross.wo], p[L.cross.bo]);
    x = layer_norm(add(x, branch_dropout(c)), p[L.norm2.gain], p[L.norm2.bias], cfg_.layer_norm_eps);
    Var f = linear(relu(linear(x, p[L.ff.w1], p[L.ff.b1])), p[L.ff.w2], p[L.ff.b2]);
    x = layer_norm(add(x, branch_dropout(f)), p[L.norm3.gain], p[L.norm3.bias], cfg_.layer_norm_eps);
  }
  return linear(x, p[out_w_], p[out_b_]);
}

Tensor TransformerModel::forward_teacher_forced(const TokenBatch& source, const TokenBatch& target) const {
  Tape tape;
  const auto p = bind(tape, false);
  Var logits = forward(tape, p, source, target, ForwardOptions{});
  const Tensor& v = logits.value();
  return Tensor({target.batch, target.length, cfg_.target_vocab},
                std::vector<double>(v.data().begin(), v.data().end()));
}

// ---------------------------------------------------------------------------
// Incremental decoding

EncoderMemory TransformerModel::encode(std::span<const int> source) const {
  if (source.empty()) throw ContractError("empty source sentence");
  const TokenIds ids(source.begin(), source.end());
  TokenBatch batch = TokenBatch::from_sequences(std::span<const TokenIds>(&ids, 1));
  for (int id : ids) {
    if (id == kPadId) throw DataError("padding token inside source sentence");
  }
  Tape tape;
  const auto p = bind(tape, false);
  Var memory = encode_batch(tape, p, batch, ForwardOptions{});
  EncoderMemory out;
  out.length = source.size();
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const DecoderLayer& L = decoder_layer(l);
    out.keys.push_back(linear(memory, p[L.cross.wk], p[L.cross.bk]).value());
    out.values.push_back(linear(memory, p[L.cross.wv], p[L.cross.bv]).value());
  }
  return out;
}

DecoderState TransformerModel::start_state() const {
  DecoderState s;
  s.keys.resize(cfg_.num_layers);
  s.values.resize(cfg_.num_layers);
  return s;
}

namespace {

// Attention of one query row over `len` cached key/value rows of width d.
std::vector<double> attend_row(std::span<const double> q, const double* keys, const double* values,
                               std::size_t len, std::size_t d, std::size_t heads) {
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(d, 0.0), w(len);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t j = 0; j < len; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += q[h * dh + c] * keys[j * d + h * dh + c];
      w[j] = s * inv_sqrt;
    }
    kernels::softmax_inplace(w);
    for (std::size_t j = 0; j < len; ++j) {
      for (std::size_t c = 0; c < dh; ++c) out[h * dh + c] += w[j] * values[j * d + h * dh + c];
    }
  }
  return out;
}

}  // namespace

std::vector<double> TransformerModel::step(const EncoderMemory& memory, DecoderState& state,
                                           int token) const {
  const std::size_t d = cfg_.model_dim;
  const std::size_t pos = state.position;
  if (pos >= cfg_.max_positions) throw DataError("decoding exceeded max_positions");
  if (token < 0 || static_cast<std::size_t>(token) >= cfg_.target_vocab) {
    throw DataError("token id " + std::to_string(token) + " at position " + std::to_string(pos) +
                    " outside target vocabulary");
  }
  const Tensor& emb = params_.value(tgt_embed_);
  const double emb_scale = std::sqrt(static_cast<double>(d));
  std::vector<double> x(d), tmp(d);
  for (std::size_t c = 0; c < d; ++c) {
    x[c] = emb[static_cast<std::size_t>(token) * d + c] * emb_scale + positional_encoding(pos, c, d);
  }
  auto residual_norm = [&](std::vector<double>& base, const std::vector<double>& branch, const NormParams& n) {
    for (std::size_t c = 0; c < d; ++c) tmp[c] = base[c] + branch[c];
    kernels::layer_norm_row(tmp, params_.value(n.gain).data(), params_.value(n.bias).data(),
                            cfg_.layer_norm_eps, base);
  };
  const auto& P = params_;
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const DecoderLayer& L = decoder_layer(l);
    const auto q = linear_row(x, P.value(L.self.wq), P.value(L.self.bq));
    const auto k = linear_row(x, P.value(L.self.wk), P.value(L.self.bk));
    const auto v = linear_row(x, P.value(L.self.wv), P.value(L.self.bv));
    state.keys[l].insert(state.keys[l].end(), k.begin(), k.end());
    state.values[l].insert(state.values[l].end(), v.begin(), v.end());
    auto a = attend_row(q, state.keys[l].data(), state.values[l].data(), pos + 1, d, cfg_.num_heads);
    residual_norm(x, linear_row(a, P.value(L.self.wo), P.value(L.self.bo)), L.norm1);

    const auto cq = linear_row(x, P.value(L.cross.wq), P.value(L.cross.bq));
    auto c = attend_row(cq, memory.keys[l].raw(), memory.values[l].raw(), memory.length, d, cfg_.num_heads);
    residual_norm(x, linear_row(c, P.value(L.cross.wo), P.value(L.cross.bo)), L.norm2);

    auto hidden = linear_row(x, P.value(L.ff.w1), P.value(L.ff.b1));
    for (double& h : hidden) h = h > 0.0 ? h : 0.0;
    residual_norm(x, linear_row(hidden, P.value(L.ff.w2), P.value(L.ff.b2)), L.norm3);
  }
  ++state.position;
  return linear_row(x, P.value(out_w_), P.value(out_b_));
}

std::vector<double> TransformerModel::decode_step(const EncoderMemory& memory,
                                                  std::span<const int> prefix) const {
  if (prefix.empty() || prefix.front() != kBosId) throw ContractError("prefix must start with BOS");
  DecoderState state = start_state();
  std::vector<double> logits;
  for (int tok : prefix) logits = step(memory, state, tok);
  return logits;
}

}  // namespace tempo
