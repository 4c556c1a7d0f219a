#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "tempo/error.hpp"
#include "tempo/tempering.hpp"
#include "tempo/tokens.hpp"

using namespace tempo;
using namespace tempo::testing;

TEST_CASE("tempered_softmax values") {
  const std::vector<double> two{2.0, 0.0};
  const auto p = tempered_softmax(two, 2.0);
  CHECK(p[0] == doctest::Approx(0.731059).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.268941).epsilon(1e-6));

  const std::vector<double> zeros(8, 0.0);
  for (double t : {0.5, 1.0, 3.0, 10.0}) {
    for (double x : tempered_softmax(zeros, t)) CHECK(x == doctest::Approx(0.125).epsilon(1e-15));
  }

  CHECK(shannon_entropy(tempered_softmax(two, 10.0)) > shannon_entropy(tempered_softmax(two, 1.0)));

  CHECK_THROWS_AS(tempered_softmax(two, 0.0), ConfigError);
  CHECK_THROWS_AS(tempered_softmax(two, -1.0), ConfigError);
  const std::vector<double> bad{1.0, std::nan("")};
  CHECK_THROWS_AS(tempered_softmax(bad, 1.0), NumericError);
}

TEST_CASE("tempered_cross_entropy values") {
  TemperingConfig cfg;
  cfg.label_smoothing = 0.0;

  cfg.temperature = 2.0;
  const std::vector<double> uniform(8, 0.0);
  const LabelDistribution onehot(3, 8, 0.0);
  CHECK(tempered_cross_entropy(uniform, onehot, cfg) == doctest::Approx(4.158883).epsilon(1e-6));
  CHECK(tempered_cross_entropy(uniform, onehot, cfg) == doctest::Approx(2.0 * std::log(8.0)).epsilon(1e-14));

  cfg.temperature = 1.0;
  const std::vector<double> sharp{10.0, -10.0};
  const double l = tempered_cross_entropy(sharp, LabelDistribution(0, 2, 0.0), cfg);
  CHECK(l == doctest::Approx(2.06e-9).epsilon(1e-2));
  CHECK(l == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-10));

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = random_vector(16, rng, -4.0, 4.0);
    const LabelDistribution label(static_cast<int>(rng.below(16)), 16, 0.1);
    TemperingConfig on{2.0, true, 0.1};
    TemperingConfig off{2.0, false, 0.1};
    CHECK(tempered_cross_entropy(d, label, on) == 2.0 * tempered_cross_entropy(d, label, off));
  }
}

TEST_CASE("loss is non-negative") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t v = 2 + rng.below(30);
    const auto d = random_vector(v, rng, -8.0, 8.0);
    const TemperingConfig cfg{rng.uniform(0.5, 10.0), rng.bernoulli(0.5), rng.bernoulli(0.5) ? 0.1 : 0.0};
    CHECK(tempered_cross_entropy(d, LabelDistribution(static_cast<int>(rng.below(v)), v, cfg.label_smoothing), cfg) >=
          0.0);
  }
}

TEST_CASE("analytic gradient") {
  SUBCASE("T=1, one-hot: softmax minus one-hot") {
    Rng rng(1);
    const auto d = random_vector(10, rng, -3.0, 3.0);
    const auto g = analytic_logit_gradient(d, LabelDistribution(4, 10, 0.0), TemperingConfig{1.0, true, 0.0});
    const auto p = tempered_softmax(d, 1.0);
    for (std::size_t k = 0; k < 10; ++k) CHECK(g[k] == p[k] - (k == 4 ? 1.0 : 0.0));
  }
  SUBCASE("sums to zero with rescaling") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
      const auto d = random_vector(12, rng, -5.0, 5.0);
      const auto g = analytic_logit_gradient(d, LabelDistribution(static_cast<int>(rng.below(12)), 12, 0.1),
                                             TemperingConfig{rng.uniform(1.0, 10.0), true, 0.1});
      CHECK(std::abs(std::accumulate(g.begin(), g.end(), 0.0)) <= 1e-12);
    }
  }
  SUBCASE("matches central differences at v=16, T=3, eps=0.1") {
    Rng rng(3);
    const auto d = random_vector(16, rng, -3.0, 3.0);
    const LabelDistribution label(7, 16, 0.1);
    for (bool rescale : {true, false}) {
      const TemperingConfig cfg{3.0, rescale, 0.1};
      const auto g = analytic_logit_gradient(d, label, cfg);
      const Tensor numeric = finite_difference_gradient(
          [&](const Tensor& x) { return tempered_cross_entropy(x.data(), label, cfg); }, Tensor::vector(d), 1e-5);
      CHECK(relative_error(g, numeric.data()) < 1e-6);
    }
  }
  SUBCASE("without rescaling the gradient is divided by T") {
    Rng rng(4);
    const auto d = random_vector(9, rng, -3.0, 3.0);
    const LabelDistribution label(2, 9, 0.1);
    const auto on = analytic_logit_gradient(d, label, TemperingConfig{4.0, true, 0.1});
    const auto off = analytic_logit_gradient(d, label, TemperingConfig{4.0, false, 0.1});
    for (std::size_t k = 0; k < 9; ++k) CHECK(off[k] == doctest::Approx(on[k] / 4.0).epsilon(1e-14));
  }
}

TEST_CASE("T=1 reduces to standard label-smoothed cross-entropy") {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t v = 2 + rng.below(60);
    const auto d = random_vector(v, rng, -6.0, 6.0);
    const int target = static_cast<int>(rng.below(v));
    const double eps = rng.bernoulli(0.5) ? 0.1 : 0.0;
    const double ours = tempered_cross_entropy(d, LabelDistribution(target, v, eps), TemperingConfig{1.0, true, eps});
    CHECK(std::abs(ours - reference_smoothed_ce(d, target, eps)) <= 1e-12);
  }
}

TEST_CASE("label distribution") {
  const LabelDistribution l(1, 5, 0.1);
  CHECK(l[1] == doctest::Approx(0.9));
  CHECK(l[0] == doctest::Approx(0.025));
  const auto dense = l.dense();
  CHECK(std::accumulate(dense.begin(), dense.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(LabelDistribution(5, 5, 0.1), DataError);
  CHECK_THROWS_AS(LabelDistribution(-1, 5, 0.1), DataError);
  CHECK_THROWS_AS(LabelDistribution(0, 5, 1.0), ConfigError);
  CHECK_THROWS_AS(LabelDistribution(0, 1, 0.1), ConfigError);
}

TEST_CASE("entropy") {
  const std::vector<double> uniform(8, 0.125);
  CHECK(shannon_entropy(uniform) == doctest::Approx(2.079442).epsilon(1e-6));
  const std::vector<double> onehot{0.0, 1.0, 0.0};
  CHECK(shannon_entropy(onehot) == 0.0);
  const std::vector<double> pair{0.731059, 0.268941};
  CHECK(shannon_entropy(pair) == doctest::Approx(0.582203).epsilon(1e-6));
}

TEST_CASE("entropy rises with T and argmax is T-invariant") {
  Rng rng(12);
  const std::vector<double> grid{0.5, 1.0, 2.0, 3.0, 5.0, 10.0};
  for (int trial = 0; trial < 200; ++trial) {
    const auto d = random_vector(2 + rng.below(40), rng, -5.0, 5.0);
    const std::size_t am = argmax(d);
    double prev = -1.0;
    for (double t : grid) {
      const auto p = tempered_softmax(d, t);
      const double h = shannon_entropy(p);
      CHECK(h > prev);
      prev = h;
      CHECK(argmax(p) == am);
    }
  }
  const std::vector<double> tie{1.0, 3.0, 3.0};
  CHECK(argmax(tie) == 1);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(TemperingConfig{}.validate());
  CHECK_THROWS_AS((TemperingConfig{0.0, true, 0.1}.validate()), ConfigError);
  CHECK_THROWS_AS((TemperingConfig{std::nan(""), true, 0.1}.validate()), ConfigError);
  CHECK_THROWS_AS((TemperingConfig{1.0, true, -0.1}.validate()), ConfigError);
  CHECK_THROWS_AS((TemperingConfig{1.0, true, 1.0}.validate()), ConfigError);
}

TEST_CASE("batched tempered_loss") {
  Rng rng(20);
  const std::size_t n = 6, v = 7;
  const Tensor logits = random_tensor({n, v}, rng, -3.0, 3.0);
  const std::vector<int> targets{3, 0, 5, 1, 0, 6};  // rows 1 and 4 are padding
  const TemperingConfig cfg{2.5, true, 0.1};

  Tape tape;
  Var x = tape.variable(logits);
  LossStats stats;
  Var loss = tempered_loss(x, targets, cfg, &stats);
  const double value = loss.value().item();
  const GradientMap g = tape.backward(loss);

  double expected = 0.0, tent = 0.0, raw = 0.0;
  std::size_t tokens = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const std::vector<double> row(logits.data().begin() + r * v, logits.data().begin() + (r + 1) * v);
    if (targets[r] == kPadId) {
      for (std::size_t k = 0; k < v; ++k) CHECK(g.at(x).at(r, k) == 0.0);
      continue;
    }
    const LabelDistribution label(targets[r], v, 0.1);
    expected += tempered_cross_entropy(row, label, cfg);
    tent += shannon_entropy(tempered_softmax(row, 2.5));
    raw += shannon_entropy(tempered_softmax(row, 1.0));
    ++tokens;
    const auto grad = analytic_logit_gradient(row, label, cfg);
    for (std::size_t k = 0; k < v; ++k) CHECK(g.at(x).at(r, k) == doctest::Approx(grad[k] / 4.0).epsilon(1e-14));
  }
  CHECK(tokens == 4);
  CHECK(value == doctest::Approx(expected / 4.0).epsilon(1e-14));
  CHECK(stats.tokens == 4);
  CHECK(stats.mean_tempered_entropy() == doctest::Approx(tent / 4.0).epsilon(1e-14));
  CHECK(stats.mean_raw_entropy() == doctest::Approx(raw / 4.0).epsilon(1e-14));

  const Tensor numeric = finite_difference_gradient(
      [&](const Tensor& l) {
        Tape t;
        return tempered_loss(t.constant(l), targets, cfg).value().item();
      },
      logits, 1e-5);
  CHECK(relative_error(g.at(x).data(), numeric.data()) < 1e-6);

  const std::vector<int> all_pad(n, kPadId);
  CHECK_THROWS_AS(tempered_loss(x, all_pad, cfg), ContractError);
  const std::vector<int> short_targets{1, 2};
  CHECK_THROWS_AS(tempered_loss(x, short_targets, cfg), ContractError);
}
