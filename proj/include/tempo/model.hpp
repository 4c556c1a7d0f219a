#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tempo/tensor.hpp"
#include "tempo/tokens.hpp"

namespace tempo {

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ff_dim = 128;
  double attention_dropout = 0.1;
  double embedding_dropout = 0.1;
  double layer_dropout = 0.1;
  // One encoder layer and one decoder layer reused at every stack position.
  bool recurrent_stacking = false;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;
  std::size_t max_positions = 128;
  double layer_norm_eps = 1e-6;

  void validate() const;
  // Zeroes the attention, embedding and residual-branch dropout rates.
  void disable_dropout();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Ordered named parameters.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value);
  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& at(const std::string& name) const;
  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t scalar_count() const;

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Row-major padded token matrix [batch × length]; PAD entries are kPadId.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;

  static TokenBatch from_sequences(std::span<const TokenIds> seqs);
  int at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with non-zero dropout
};

// Encoder output prepared for incremental decoding of one sentence.
struct EncoderMemory {
  std::size_t length = 0;
  // Per decoder stack position: projected cross-attention keys and values,
  // each [length × model_dim].
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
};

// Self-attention caches for one partially decoded sentence.
struct DecoderState {
  std::size_t position = 0;
  std::vector<std::vector<double>> keys;    // per stack position, position × dim
  std::vector<std::vector<double>> values;
};

// Post-norm transformer encoder-decoder with sinusoidal positions and untied
// embeddings/output projection.
class TransformerModel {
 public:
  static TransformerModel init(const ModelConfig& cfg, std::uint64_t seed);
  // Rebuilds a model around existing parameters (e.g. from a checkpoint);
  // names and shapes must match what init() would create.
  static TransformerModel from_parameters(const ModelConfig& cfg, ParameterSet params);

  const ModelConfig& config() const { return cfg_; }
  const ParameterSet& parameters() const { return params_; }
  ParameterSet& parameters() { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  // Places every parameter on the tape, as variables when `tracked`.
  std::vector<Var> bind(Tape& tape, bool tracked) const;

  // Logits [batch*target_len × target_vocab]. Row (b, i) scores the token that
  // follows target position i, seeing target positions <= i only.
  Var forward(Tape& tape, std::span<const Var> params, const TokenBatch& source,
              const TokenBatch& target, const ForwardOptions& opts) const;

  // Evaluation-mode logits shaped [batch × target_len × target_vocab].
  Tensor forward_teacher_forced(const TokenBatch& source, const TokenBatch& target) const;

  EncoderMemory encode(std::span<const int> source) const;
  DecoderState start_state() const;
  // Feeds `token` at the state's next position and returns the logits for
  // the following token.
  std::vector<double> step(const EncoderMemory& memory, DecoderState& state, int token) const;
  // Logits after the whole prefix (which must start with BOS).
  std::vector<double> decode_step(const EncoderMemory& memory, std::span<const int> prefix) const;

 private:
  struct AttentionParams {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FeedForwardParams {
    std::size_t w1, b1, w2, b2;
  };
  struct NormParams {
    std::size_t gain, bias;
  };
  struct EncoderLayer {
    AttentionParams self;
    NormParams norm1;
    FeedForwardParams ff;
    NormParams norm2;
  };
  struct DecoderLayer {
    AttentionParams self;
    NormParams norm1;
    AttentionParams cross;
    NormParams norm2;
    FeedForwardParams ff;
    NormParams norm3;
  };

  TransformerModel() = default;
  void build_layout(bool allocate, std::uint64_t seed);
  const EncoderLayer& encoder_layer(std::size_t pos) const;
  const DecoderLayer& decoder_layer(std::size_t pos) const;
  Var encode_batch(Tape& tape, std::span<const Var> params, const TokenBatch& source,
                   const ForwardOptions& opts) const;
  Var embed(Tape& tape, Var table, const TokenBatch& tokens, const ForwardOptions& opts) const;

  ModelConfig cfg_;
  ParameterSet params_;
  std::size_t src_embed_ = 0, tgt_embed_ = 0, out_w_ = 0, out_b_ = 0;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
};

// Sinusoidal position encoding value for (position, channel).
double positional_encoding(std::size_t position, std::size_t channel, std::size_t dim);

}  // namespace tempo
