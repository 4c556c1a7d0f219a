#include "tempo/decoding.hpp"

#include <string>

namespace tempo {

void BeamConfig::validate() const {
  if (beam_size == 0) throw ConfigError("beam_size must be at least 1");
  if (!(length_penalty_alpha >= 0.0)) throw ConfigError("length penalty alpha must be >= 0");
  if (max_length == 0) throw ConfigError("max_length must be positive");
}

double length_penalty(std::size_t length, double alpha) {
  if (length == 0) throw ContractError("length_penalty: length must be >= 1");
  if (alpha == 0.0) return 1.0;
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

double hypothesis_score(double log_prob, std::size_t tokens_with_bos, double alpha) {
  const std::size_t len = tokens_with_bos > 1 ? tokens_with_bos - 1 : 1;
  return log_prob / length_penalty(len, alpha);
}

Hypothesis greedy_decode(const TransformerModel& model, std::span<const int> source, std::size_t max_length) {
  return greedy_decode(TransformerScorer(model, source), max_length);
}

std::vector<Hypothesis> beam_decode(const TransformerModel& model, std::span<const int> source,
                                    const BeamConfig& cfg) {
  return beam_decode(TransformerScorer(model, source), cfg);
}

TokenIds strip_special(const TokenIds& tokens) {
  TokenIds out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i == 0 && tokens[i] == kBosId) continue;
    if (tokens[i] == kEosId) break;
    out.push_back(tokens[i]);
  }
  return out;
}

}  // namespace tempo
