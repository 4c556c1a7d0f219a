#include <algorithm>
#include <cmath>
#include <map>

#include "bleu_oracle.hpp"
#include "doctest.h"
#include "tempo/error.hpp"
#include "tempo/metrics.hpp"
#include "tempo/rng.hpp"

using namespace tempo;
using namespace tempo::testing;

namespace {

TokenIds random_sentence(Rng& rng, std::size_t max_len, std::size_t alphabet) {
  TokenIds s(rng.below(max_len + 1));
  for (int& t : s) t = static_cast<int>(4 + rng.below(alphabet));
  return s;
}

}  // namespace

TEST_CASE("hand example: the cat sat / the cat sat down") {
  // the=4 cat=5 sat=6 down=7
  const std::vector<TokenIds> hyp{{4, 5, 6}};
  const std::vector<TokenIds> ref{{4, 5, 6, 7}};
  const double bleu = corpus_bleu(hyp, ref);
  CHECK(bleu == doctest::Approx(71.65).epsilon(1e-4));
  CHECK(std::abs(bleu - 71.65) <= 0.01);
  CHECK(bleu == doctest::Approx(100.0 * std::exp(-1.0 / 3.0)).epsilon(1e-14));
}

TEST_CASE("identity and zero overlap") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenIds> h;
    for (int i = 0; i < 10; ++i) h.push_back(random_sentence(rng, 12, 20));
    h.push_back({4, 5, 6, 7, 8});
    CHECK(corpus_bleu(h, h) == doctest::Approx(100.0).epsilon(1e-14));
  }
  const std::vector<TokenIds> a{{4, 5, 6}}, b{{7, 8, 9}};
  CHECK(corpus_bleu(a, b) == 0.0);
  const std::vector<TokenIds> empty_hyp{{}}, some_ref{{4, 5}};
  CHECK(corpus_bleu(empty_hyp, some_ref) == 0.0);
}

TEST_CASE("corpus BLEU equals the brute-force counting oracle on random corpora") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const std::size_t alphabet = 2 + rng.below(5);
    std::vector<TokenIds> hyps, refs;
    for (std::size_t i = 0; i < n; ++i) {
      refs.push_back(random_sentence(rng, 9, alphabet));
      TokenIds h = refs.back();
      for (int& t : h) {
        if (rng.bernoulli(0.3)) t = static_cast<int>(4 + rng.below(alphabet));
      }
      if (rng.bernoulli(0.3) && !h.empty()) h.pop_back();
      if (rng.bernoulli(0.3)) h.push_back(static_cast<int>(4 + rng.below(alphabet)));
      hyps.push_back(h);
    }
    CHECK(corpus_bleu(hyps, refs) == brute_force_bleu(hyps, refs));
  }
}

TEST_CASE("clipping") {
  const std::vector<TokenIds> hyp{{4, 4, 4, 4}};
  const std::vector<TokenIds> ref{{4, 5, 6, 7}};
  const BleuStats s = sentence_stats(hyp[0], ref[0]);
  CHECK(s.matched[0] == 1);
  CHECK(s.total[0] == 4);
}

TEST_CASE("corpus BLEU is permutation invariant") {
  Rng rng(9);
  std::vector<TokenIds> hyps, refs;
  for (int i = 0; i < 30; ++i) {
    refs.push_back(random_sentence(rng, 10, 4));
    hyps.push_back(random_sentence(rng, 10, 4));
  }
  const double base = corpus_bleu(hyps, refs);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> order(hyps.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    std::vector<TokenIds> h2, r2;
    for (auto i : order) {
      h2.push_back(hyps[i]);
      r2.push_back(refs[i]);
    }
    CHECK(corpus_bleu(h2, r2) == base);
  }
}

TEST_CASE("corpus BLEU contract") {
  const std::vector<TokenIds> one{{4}}, two{{4}, {5}}, none;
  CHECK_THROWS_AS(corpus_bleu(one, two), ContractError);
  CHECK_THROWS_AS(corpus_bleu(none, none), ContractError);
}

TEST_CASE("paired bootstrap") {
  Rng rng(3);
  std::vector<TokenIds> refs, perfect, noise;
  for (int i = 0; i < 200; ++i) {
    refs.push_back(random_sentence(rng, 12, 30));
    refs.back().push_back(4);
    perfect.push_back(refs.back());
    noise.push_back(random_sentence(rng, 12, 30));
  }
  const auto good = paired_bootstrap(perfect, noise, refs, 1000, 7);
  CHECK(good.p_value < 0.05);
  CHECK(good.bleu_a == doctest::Approx(100.0));
  CHECK(good.resamples == 1000);
  CHECK(good.seed == 7);

  const auto again = paired_bootstrap(perfect, noise, refs, 1000, 7);
  CHECK(again.p_value == good.p_value);

  const auto same = paired_bootstrap(noise, noise, refs, 500, 1);
  CHECK(same.p_value == 1.0);
  CHECK(same.tie_fraction == 1.0);

  const auto reversed = paired_bootstrap(noise, perfect, refs, 1000, 7);
  CHECK(reversed.p_value > 0.95);
  for (const auto& r : {good, same, reversed}) {
    CHECK(r.p_value >= 0.0);
    CHECK(r.p_value <= 1.0);
  }
  CHECK_THROWS_AS(paired_bootstrap(perfect, noise, refs, 10, 1), ConfigError);
}

TEST_CASE("greedy-beam similarity") {
  const std::vector<TokenIds> g{{4, 5, 6, 7}, {8, 9, 10}};
  CHECK(output_similarity_bleu(g, g) == doctest::Approx(100.0));
  const std::vector<TokenIds> disjoint{{11, 12, 13}, {14, 15}};
  CHECK(output_similarity_bleu(g, disjoint) == 0.0);
  const std::vector<TokenIds> partial{{4, 5, 6, 7}, {8, 9, 11}};
  CHECK(output_similarity_bleu(g, partial) == corpus_bleu(partial, g));
}
