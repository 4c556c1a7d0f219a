#include "tempo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tempo/error.hpp"
#include "tempo/rng.hpp"

namespace tempo {

NgramProfile::NgramProfile(std::span<const int> tokens) {
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    if (tokens.size() < n) continue;
    totals_[n - 1] = tokens.size() - n + 1;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      ++counts_[n - 1][TokenIds(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
  }
}

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    matched[n] += other.matched[n];
    total[n] += other.total[n];
  }
  hyp_length += other.hyp_length;
  ref_length += other.ref_length;
  return *this;
}

double BleuStats::score() const {
  if (hyp_length == 0) return 0.0;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    if (total[n] == 0) continue;
    if (matched[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
    ++orders;
  }
  const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_length) / static_cast<double>(hyp_length)));
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(orders));
}

BleuStats sentence_stats(std::span<const int> hypothesis, std::span<const int> reference) {
  BleuStats s;
  s.hyp_length = hypothesis.size();
  s.ref_length = reference.size();
  const NgramProfile hyp(hypothesis), ref(reference);
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    s.total[n - 1] = hyp.total(n);
    const auto& rc = ref.counts(n);
    for (const auto& [gram, count] : hyp.counts(n)) {
      auto it = rc.find(gram);
      if (it != rc.end()) s.matched[n - 1] += std::min(count, it->second);
    }
  }
  return s;
}

namespace {

void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ContractError(std::string(what) + ": " + std::to_string(a) + " hypotheses vs " + std::to_string(b) +
                        " references");
  }
  if (a == 0) throw ContractError(std::string(what) + ": empty corpus");
}

}  // namespace

double corpus_bleu(std::span<const TokenIds> hypotheses, std::span<const TokenIds> references) {
  check_aligned(hypotheses.size(), references.size(), "corpus_bleu");
  BleuStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) total += sentence_stats(hypotheses[i], references[i]);
  return total.score();
}

BootstrapResult paired_bootstrap(std::span<const TokenIds> hyp_a, std::span<const TokenIds> hyp_b,
                                 std::span<const TokenIds> references, std::size_t resamples,
                                 std::uint64_t seed) {
  check_aligned(hyp_a.size(), references.size(), "paired_bootstrap");
  check_aligned(hyp_b.size(), references.size(), "paired_bootstrap");
  if (resamples < 100) throw ConfigError("paired_bootstrap needs at least 100 resamples");
  const std::size_t n = references.size();
  std::vector<BleuStats> stats_a(n), stats_b(n);
  BleuStats full_a, full_b;
  for (std::size_t i = 0; i < n; ++i) {
    stats_a[i] = sentence_stats(hyp_a[i], references[i]);
    stats_b[i] = sentence_stats(hyp_b[i], references[i]);
    full_a += stats_a[i];
    full_b += stats_b[i];
  }
  BootstrapResult r;
  r.bleu_a = full_a.score();
  r.bleu_b = full_b.score();
  r.resamples = resamples;
  r.seed = seed;
  Rng rng(seed);
  std::size_t b_wins = 0, ties = 0;
  for (std::size_t s = 0; s < resamples; ++s) {
    BleuStats a, b;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = rng.below(n);
      a += stats_a[i];
      b += stats_b[i];
    }
    const double sa = a.score(), sb = b.score();
    if (sb >= sa) ++b_wins;
    if (sb == sa) ++ties;
  }
  r.p_value = static_cast<double>(b_wins) / static_cast<double>(resamples);
  r.tie_fraction = static_cast<double>(ties) / static_cast<double>(resamples);
  return r;
}

double output_similarity_bleu(std::span<const TokenIds> greedy_outputs, std::span<const TokenIds> beam_outputs) {
  return corpus_bleu(beam_outputs, greedy_outputs);
}

}  // namespace tempo
