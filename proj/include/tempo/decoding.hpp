#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <cstddef>
#include <span>
#include <vector>

#include "tempo/error.hpp"
#include "tempo/model.hpp"
#include "tempo/tensor.hpp"
#include "tempo/tokens.hpp"

namespace tempo {

struct BeamConfig {
  std::size_t beam_size = 4;
  double length_penalty_alpha = 1.0;
  // Maximum number of generated tokens after BOS, EOS included.
  std::size_t max_length = 64;

  void validate() const;
};

struct Hypothesis {
  TokenIds tokens;  // BOS ... [EOS]
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;
};

// ((5 + length) / 6)^alpha.
double length_penalty(std::size_t length, double alpha);

// log_prob / length_penalty(tokens without BOS).
double hypothesis_score(double log_prob, std::size_t tokens_with_bos, double alpha);

// A step scorer produces next-token logits for an incrementally extended
// prefix. advance(state, tok) appends tok and returns the logits that follow.
template <class S>
concept StepScorer = requires(const S& s, typename S::State& st, int tok) {
  { s.initial_state() } -> std::convertible_to<typename S::State>;
  { s.advance(st, tok) } -> std::convertible_to<std::vector<double>>;
};

// Incremental scorer backed by a transformer and one encoded source sentence.
class TransformerScorer {
 public:
  using State = DecoderState;
  TransformerScorer(const TransformerModel& model, std::span<const int> source)
      : model_(model), memory_(model.encode(source)) {}

  State initial_state() const { return model_.start_state(); }
  std::vector<double> advance(State& state, int token) const { return model_.step(memory_, state, token); }

 private:
  const TransformerModel& model_;
  EncoderMemory memory_;
};

namespace detail {

inline std::vector<double> log_probs(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  kernels::log_softmax(logits, out);
  return out;
}

}  // namespace detail

template <StepScorer S>
Hypothesis greedy_decode(const S& scorer, std::size_t max_length) {
  if (max_length == 0) throw ConfigError("max_length must be positive");
  auto state = scorer.initial_state();
  std::vector<double> logits = scorer.advance(state, kBosId);
  Hypothesis hyp;
  hyp.tokens.push_back(kBosId);
  for (std::size_t t = 0; t < max_length; ++t) {
    const auto lp = detail::log_probs(logits);
    const auto tok = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    hyp.log_prob += lp[static_cast<std::size_t>(tok)];
    hyp.tokens.push_back(tok);
    if (tok == kEosId) {
      hyp.finished = true;
      break;
    }
    if (t + 1 < max_length) logits = scorer.advance(state, tok);
  }
  hyp.score = hypothesis_score(hyp.log_prob, hyp.tokens.size(), 0.0);
  return hyp;
}

// Beam search with a retired pool of finished hypotheses. Each live
// hypothesis proposes its beam_size best continuations; the merged candidates
// are ranked by log-probability (all share one length) with ties broken by
// (parent, token) order. EOS candidates inside the top beam_size retire; the
// best non-EOS candidates refill the beam. Search stops once no live
// hypothesis can beat the worst of beam_size finished ones even at the most
// favorable length penalty, or at max_length. The result is sorted by score,
// best first; when nothing finished, the best unfinished hypotheses are
// returned instead.
template <StepScorer S>
std::vector<Hypothesis> beam_decode(const S& scorer, const BeamConfig& cfg) {
  cfg.validate();
  struct Live {
    Hypothesis hyp;
    typename S::State state;
    std::vector<double> logits;
  };
  struct Candidate {
    std::size_t parent;
    int token;
    double log_prob;
  };
  const double alpha = cfg.length_penalty_alpha;
  auto by_score = [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; };

  std::vector<Live> live;
  {
    Live root{Hypothesis{}, scorer.initial_state(), {}};
    root.hyp.tokens.push_back(kBosId);
    root.logits = scorer.advance(root.state, kBosId);
    live.push_back(std::move(root));
  }
  std::vector<Hypothesis> finished;

  for (std::size_t t = 0; t < cfg.max_length && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const auto lp = detail::log_probs(live[i].logits);
      std::vector<std::size_t> order(lp.size());
      for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
      const std::size_t keep = std::min(cfg.beam_size, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                        [&](std::size_t a, std::size_t b) { return lp[a] > lp[b] || (lp[a] == lp[b] && a < b); });
      for (std::size_t k = 0; k < keep; ++k) {
        cands.push_back({i, static_cast<int>(order[k]), live[i].hyp.log_prob + lp[order[k]]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });

    std::vector<Live> next;
    const bool last_step = t + 1 == cfg.max_length;
    for (std::size_t rank = 0; rank < cands.size() && next.size() < cfg.beam_size; ++rank) {
      const Candidate& c = cands[rank];
      Hypothesis h = live[c.parent].hyp;
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      h.score = hypothesis_score(h.log_prob, h.tokens.size(), alpha);
      if (c.token == kEosId) {
        if (rank < cfg.beam_size) {
          h.finished = true;
          finished.push_back(std::move(h));
        }
        continue;
      }
      Live child{std::move(h), live[c.parent].state, {}};
      if (!last_step) child.logits = scorer.advance(child.state, c.token);
      next.push_back(std::move(child));
    }
    live = std::move(next);

    if (finished.size() >= cfg.beam_size && !live.empty()) {
      std::stable_sort(finished.begin(), finished.end(), by_score);
      const double worst_kept = finished[cfg.beam_size - 1].score;
      double best_possible = -std::numeric_limits<double>::infinity();
      for (const auto& l : live) {
        best_possible = std::max(best_possible, l.hyp.log_prob / length_penalty(cfg.max_length, alpha));
      }
      if (best_possible <= worst_kept) break;
    }
  }

  std::vector<Hypothesis> out;
  if (finished.empty()) {
    for (auto& l : live) out.push_back(std::move(l.hyp));
  } else {
    out = std::move(finished);
  }
  std::stable_sort(out.begin(), out.end(), by_score);
  if (out.size() > cfg.beam_size) out.resize(cfg.beam_size);
  return out;
}

// Convenience wrappers decoding one source sentence (ids ending in EOS).
Hypothesis greedy_decode(const TransformerModel& model, std::span<const int> source, std::size_t max_length);
std::vector<Hypothesis> beam_decode(const TransformerModel& model, std::span<const int> source,
                                    const BeamConfig& cfg);

// Tokens of a hypothesis with BOS, EOS and anything after EOS removed.
TokenIds strip_special(const TokenIds& tokens);

}  // namespace tempo
