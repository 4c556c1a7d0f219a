#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "tempo/tokens.hpp"

namespace tempo {

inline constexpr std::size_t kBleuOrder = 4;

// n-gram counts for n = 1..4 of one token sequence.
class NgramProfile {
 public:
  explicit NgramProfile(std::span<const int> tokens);
  const std::map<TokenIds, std::size_t>& counts(std::size_t n) const { return counts_[n - 1]; }
  std::size_t total(std::size_t n) const { return totals_[n - 1]; }

 private:
  std::array<std::map<TokenIds, std::size_t>, kBleuOrder> counts_;
  std::array<std::size_t, kBleuOrder> totals_{};
};

// Pooled sufficient statistics for corpus BLEU.
struct BleuStats {
  std::array<std::size_t, kBleuOrder> matched{};
  std::array<std::size_t, kBleuOrder> total{};
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;

  BleuStats& operator+=(const BleuStats& other);
  // Geometric mean of clipped precisions times the brevity penalty, in
  // [0, 100]. Orders with no hypothesis n-grams are dropped from the mean.
  double score() const;
};

BleuStats sentence_stats(std::span<const int> hypothesis, std::span<const int> reference);

double corpus_bleu(std::span<const TokenIds> hypotheses, std::span<const TokenIds> references);

struct BootstrapResult {
  double bleu_a = 0.0;
  double bleu_b = 0.0;
  // Fraction of resamples with bleu(b) >= bleu(a).
  double p_value = 0.0;
  // Fraction of resamples with bleu(b) == bleu(a).
  double tie_fraction = 0.0;
  std::size_t resamples = 0;
  std::uint64_t seed = 0;
};

// Paired bootstrap: resamples sentence indices with replacement and reports
// how often system b scores at least as well as system a. A small p-value
// supports "a is better than b".
BootstrapResult paired_bootstrap(std::span<const TokenIds> hyp_a, std::span<const TokenIds> hyp_b,
                                 std::span<const TokenIds> references, std::size_t resamples,
                                 std::uint64_t seed);

// BLEU of beam outputs against greedy outputs used as references.
double output_similarity_bleu(std::span<const TokenIds> greedy_outputs, std::span<const TokenIds> beam_outputs);

}  // namespace tempo
