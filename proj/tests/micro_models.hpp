#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "tempo/decoding.hpp"
#include "tempo/rng.hpp"

namespace tempo::testing {

// First-order toy model: next-token probabilities depend only on the last
// token. Rows are indexed by the previous token id.
class MarkovScorer {
 public:
  using State = int;  // last token

  explicit MarkovScorer(std::vector<std::vector<double>> probs) : probs_(std::move(probs)) {}

  State initial_state() const { return -1; }
  std::vector<double> advance(State& state, int token) const {
    state = token;
    std::vector<double> logits;
    for (double p : probs_[static_cast<std::size_t>(token)]) logits.push_back(std::log(p));
    return logits;
  }
  std::size_t vocab() const { return probs_.size(); }
  double prob(int prev, int next) const { return probs_[static_cast<std::size_t>(prev)][static_cast<std::size_t>(next)]; }

 private:
  std::vector<std::vector<double>> probs_;
};

static_assert(StepScorer<MarkovScorer>);

// Ids: 0 PAD, 1 BOS, 2 EOS, 3 'a', 4 'b'. PAD and BOS are nearly impossible.
inline MarkovScorer hand_model() {
  const double tiny = 1e-6;
  std::vector<std::vector<double>> p(5, std::vector<double>(5, 0.2));
  p[kBosId] = {tiny, tiny, tiny, 0.6, 0.4 - 3 * tiny};
  p[3] = {tiny, tiny, 0.4, 0.3, 0.3 - 2 * tiny};
  p[4] = {tiny, tiny, 0.9, 0.05, 0.05 - 2 * tiny};
  return MarkovScorer(p);
}

inline MarkovScorer random_model(Rng& rng, std::size_t vocab) {
  std::vector<std::vector<double>> p(vocab, std::vector<double>(vocab));
  for (auto& row : p) {
    double s = 0.0;
    for (double& x : row) {
      x = std::exp(rng.uniform(-3.0, 1.0));
      s += x;
    }
    for (double& x : row) x /= s;
  }
  return MarkovScorer(p);
}

struct Best {
  TokenIds tokens;
  double score = -std::numeric_limits<double>::infinity();
};

// Scores every EOS-terminated sequence of at most max_length generated tokens.
inline Best exhaustive_best(const MarkovScorer& m, std::size_t max_length, double alpha) {
  Best best;
  std::function<void(TokenIds&, double)> rec = [&](TokenIds& seq, double logp) {
    const std::size_t generated = seq.size() - 1;
    if (generated > 0 && seq.back() == kEosId) {
      const double score = logp / length_penalty(generated, alpha);
      if (score > best.score) best = {seq, score};
      return;
    }
    if (generated == max_length) return;
    for (std::size_t t = 0; t < m.vocab(); ++t) {
      seq.push_back(static_cast<int>(t));
      rec(seq, logp + std::log(m.prob(seq[seq.size() - 2], static_cast<int>(t))));
      seq.pop_back();
    }
  };
  TokenIds seq{kBosId};
  rec(seq, 0.0);
  return best;
}

}  // namespace tempo::testing
