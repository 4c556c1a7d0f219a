#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "tempo/tokens.hpp"

namespace tempo::testing {

// Corpus BLEU by direct enumeration: every n-gram occurrence is counted by
// scanning, clipped against the reference scan, and pooled.
inline double brute_force_bleu(const std::vector<TokenIds>& hyps, const std::vector<TokenIds>& refs) {
  std::size_t matched[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0}, c = 0, r = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const TokenIds& h = hyps[s];
    const TokenIds& g = refs[s];
    c += h.size();
    r += g.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      if (h.size() < n) continue;
      std::map<TokenIds, std::size_t> hc, rc;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hc[TokenIds(h.begin() + i, h.begin() + i + n)];
      for (std::size_t i = 0; i + n <= g.size(); ++i) ++rc[TokenIds(g.begin() + i, g.begin() + i + n)];
      for (const auto& [gram, k] : hc) {
        total[n - 1] += k;
        matched[n - 1] += std::min(k, rc[gram]);
      }
    }
  }
  if (c == 0) return 0.0;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (total[n] == 0) continue;
    if (matched[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
    ++orders;
  }
  const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(r) / static_cast<double>(c)));
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(orders));
}

}  // namespace tempo::testing
