#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "tempo/error.hpp"
#include "tempo/tensor.hpp"

using namespace tempo;
using namespace tempo::testing;

namespace {

// sum(out ⊙ W) for a fixed random W, so every output element reaches the loss
// with a distinct weight.
Var weighted_sum(Tape& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  Var w = tape.constant(random_tensor(out.value().shape(), rng, -1.0, 1.0));
  return sum(mul(out, w));
}

}  // namespace

TEST_CASE("matmul values") {
  Tape tape;
  Var eye = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  const Tensor product = matmul(eye, a).value();
  CHECK(product == a.value());

  Var ones = tape.constant(Tensor::matrix({{1}, {1}}));
  const Tensor r = matmul(a, ones).value();
  CHECK(r.shape() == Shape{2, 1});
  CHECK(r[0] == 3.0);
  CHECK(r[1] == 7.0);

  CHECK_THROWS_AS(matmul(a, tape.constant(Tensor::zeros({3, 1}))), DimensionError);
}

TEST_CASE("gradient of sum(A x B) wrt A is B summed over columns") {
  Rng rng(3);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 5}, rng);
  GraphBuilder f = [](Tape&, std::span<const Var> v) { return sum(matmul(v[0], v[1])); };
  const auto grads = tape_gradients(f, {a, b});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 4; ++k) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < 5; ++j) row_sum += b.at(k, j);
      CHECK(grads[0].at(i, k) == doctest::Approx(row_sum).epsilon(1e-12));
    }
  }
  const Tensor numeric = numeric_gradient(f, {a, b}, 0, 1e-6);
  CHECK(relative_error(grads[0].data(), numeric.data()) < 1e-8);
}

TEST_CASE("row_softmax values and stability") {
  Tape tape;
  const Tensor u = row_softmax(tape.constant(Tensor::matrix({{0, 0, 0, 0}}))).value();
  for (double p : u.data()) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  const Tensor big = row_softmax(tape.constant(Tensor::matrix({{1000, 0}}))).value();
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));

  const Tensor two = row_softmax(tape.constant(Tensor::matrix({{2, 0}}))).value();
  CHECK(two[0] == doctest::Approx(0.880797).epsilon(1e-6));
  CHECK(two[1] == doctest::Approx(0.119203).epsilon(1e-6));

  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(row_softmax(tape.constant(Tensor::matrix({{inf, 0}}))), NumericError);
}

TEST_CASE("row_softmax rows sum to one and are shift invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, -5.0, 5.0);
    Tensor shifted = x;
    for (std::size_t r = 0; r < 4; ++r) {
      const double c = rng.uniform(-50.0, 50.0);
      for (std::size_t j = 0; j < 7; ++j) shifted[r * 7 + j] += c;
    }
    Tape tape;
    const Tensor p = row_softmax(tape.constant(x)).value();
    const Tensor q = row_softmax(tape.constant(shifted)).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) s += p.at(r, j);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    CHECK(max_abs_diff(p.data(), q.data()) <= 1e-12);
  }
}

TEST_CASE("layer_norm values") {
  Tape tape;
  Var gain = tape.constant(Tensor::vector({1, 1, 1}));
  Var bias = tape.constant(Tensor::vector({0, 0, 0}));
  const Tensor c = layer_norm(tape.constant(Tensor::matrix({{5, 5, 5}})), gain, bias, 1e-6).value();
  for (double x : c.data()) CHECK(x == 0.0);

  Var g2 = tape.constant(Tensor::vector({1, 1}));
  Var b2 = tape.constant(Tensor::vector({0, 0}));
  const Tensor r = layer_norm(tape.constant(Tensor::matrix({{1, -1}})), g2, b2, 1e-12).value();
  CHECK(r[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r[1] == doctest::Approx(-1.0).epsilon(1e-9));

  CHECK_THROWS_AS(layer_norm(tape.constant(Tensor::matrix({{1, -1}})), g2, b2, 0.0), ConfigError);
}

TEST_CASE("every primitive agrees with central differences") {
  Rng rng(2024);
  const double tol = 1e-4;

  SUBCASE("matmul") {
    GraphBuilder f = [](Tape& t, std::span<const Var> v) { return weighted_sum(t, matmul(v[0], v[1]), 1); };
    CHECK(gradient_check(f, {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}) < tol);
  }
  SUBCASE("add sub mul scale") {
    GraphBuilder f = [](Tape& t, std::span<const Var> v) {
      return weighted_sum(t, scale(mul(add(v[0], v[1]), sub(v[0], v[1])), -1.7), 2);
    };
    CHECK(gradient_check(f, {random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)}) < tol);
  }
  SUBCASE("add_bias") {
    GraphBuilder f = [](Tape& t, std::span<const Var> v) { return weighted_sum(t, add_bias(v[0], v[1]), 3); };
    CHECK(gradient_check(f, {random_tensor({4, 3}, rng), random_tensor({3}, rng)}) < tol);
  }
  SUBCASE("relu away from the kink") {
    Tensor x = random_tensor({5, 4}, rng);
    for (double& e : x.mutable_data()) {
      if (std::abs(e) < 0.05) e = 0.5;
    }
    GraphBuilder f = [](Tape& t, std::span<const Var> v) { return weighted_sum(t, relu(v[0]), 4); };
    CHECK(gradient_check(f, {x}) < tol);
  }
  SUBCASE("sum and mean") {
    GraphBuilder g = [](Tape&, std::span<const Var> v) { return add(sum(mul(v[0], v[0])), scale(mean(v[0]), 3.0)); };
    CHECK(gradient_check(g, {random_tensor({3, 3}, rng)}) < tol);
  }
  SUBCASE("row_softmax and row_log_softmax") {
    GraphBuilder f = [](Tape& t, std::span<const Var> v) { return weighted_sum(t, row_softmax(v[0]), 5); };
    GraphBuilder g = [](Tape& t, std::span<const Var> v) { return weighted_sum(t, row_log_softmax(v[0]), 6); };
    const Tensor x = random_tensor({3, 6}, rng);
    CHECK(gradient_check(f, {x}) < tol);
    CHECK(gradient_check(g, {x}) < tol);
  }
  SUBCASE("layer_norm") {
    GraphBuilder f = [](Tape& t, std::span<const Var> v) {
      return weighted_sum(t, layer_norm(v[0], v[1], v[2], 1e-6), 7);
    };
    CHECK(gradient_check(f, {random_tensor({4, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)}) < tol);
  }
  SUBCASE("dropout with a fixed mask") {
    GraphBuilder f = [](Tape& t, std::span<const Var> v) {
      Rng mask_rng(99);
      return weighted_sum(t, dropout(v[0], 0.3, mask_rng), 8);
    };
    CHECK(gradient_check(f, {random_tensor({4, 6}, rng)}) < tol);
  }
  SUBCASE("embedding") {
    const std::vector<int> ids{2, 0, 2, 3, 1};
    GraphBuilder f = [&](Tape& t, std::span<const Var> v) { return weighted_sum(t, embedding(v[0], ids), 9); };
    CHECK(gradient_check(f, {random_tensor({4, 3}, rng)}) < tol);
  }
  SUBCASE("multi_head_attention, masked and causal") {
    AttentionShape cross{2, 3, 4, 2, false, {true, true, true, false, true, true, false, false}};
    GraphBuilder f = [&](Tape& t, std::span<const Var> v) {
      return weighted_sum(t, multi_head_attention(v[0], v[1], v[2], cross, 0.0, nullptr), 10);
    };
    CHECK(gradient_check(f, {random_tensor({6, 4}, rng), random_tensor({8, 4}, rng), random_tensor({8, 4}, rng)}) <
          tol);

    AttentionShape causal{2, 3, 3, 2, true, {}};
    GraphBuilder g = [&](Tape& t, std::span<const Var> v) {
      Rng drop(5);
      return weighted_sum(t, multi_head_attention(v[0], v[1], v[2], causal, 0.2, &drop), 11);
    };
    CHECK(gradient_check(g, {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)}) <
          tol);
  }
}

TEST_CASE("attention respects the causal mask") {
  Rng rng(8);
  const Tensor q = random_tensor({4, 4}, rng), k = random_tensor({4, 4}, rng), v = random_tensor({4, 4}, rng);
  Tensor v2 = v;
  for (std::size_t c = 0; c < 4; ++c) v2[3 * 4 + c] += 10.0;  // last position only
  AttentionShape s{1, 4, 4, 2, true, {}};
  Tape tape;
  const Tensor a = multi_head_attention(tape.constant(q), tape.constant(k), tape.constant(v), s, 0.0, nullptr).value();
  const Tensor b = multi_head_attention(tape.constant(q), tape.constant(k), tape.constant(v2), s, 0.0, nullptr).value();
  for (std::size_t i = 0; i < 3 * 4; ++i) CHECK(a[i] == b[i]);
  CHECK(a[12] != b[12]);
}

TEST_CASE("backward on simple losses") {
  Rng rng(4);
  const Tensor x = random_tensor({2, 3}, rng);
  const auto ones = tape_gradients([](Tape&, std::span<const Var> v) { return sum(v[0]); }, {x});
  for (double g : ones[0].data()) CHECK(g == 1.0);

  const auto sq = tape_gradients([](Tape&, std::span<const Var> v) { return sum(mul(v[0], v[0])); }, {x});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(sq[0][i] == doctest::Approx(2.0 * x[i]).epsilon(1e-14));
}

TEST_CASE("composite two-layer network matches finite differences") {
  Rng rng(77);
  GraphBuilder net = [](Tape&, std::span<const Var> v) {
    Var h = relu(add_bias(matmul(v[0], v[1]), v[2]));
    Var logits = add_bias(matmul(h, v[3]), v[4]);
    return mean(row_log_softmax(logits));
  };
  const std::vector<Tensor> inputs{random_tensor({5, 4}, rng), random_tensor({4, 6}, rng), random_tensor({6}, rng),
                                   random_tensor({6, 3}, rng), random_tensor({3}, rng)};
  CHECK(gradient_check(net, inputs) < 1e-4);
}

TEST_CASE("finite_difference_gradient") {
  auto f_sum = [](const Tensor& x) {
    double s = 0.0;
    for (double e : x.data()) s += e;
    return s;
  };
  Rng rng(1);
  const Tensor g = finite_difference_gradient(f_sum, random_tensor({7}, rng), 1e-5);
  for (double e : g.data()) CHECK(e == doctest::Approx(1.0).epsilon(1e-9));

  auto f_sq = [](const Tensor& x) { return x[0] * x[0] + x[1] * x[1]; };
  const Tensor s = finite_difference_gradient(f_sq, Tensor::vector({1, 2}), 1e-5);
  CHECK(std::abs(s[0] - 2.0) <= 1e-8);
  CHECK(std::abs(s[1] - 4.0) <= 1e-8);

  CHECK_THROWS_AS(finite_difference_gradient(f_sq, Tensor::vector({1, 2}), 0.0), ConfigError);
}

TEST_CASE("random three-op graphs: backward agrees with finite differences") {
  Rng rng(31337);
  for (int trial = 0; trial < 40; ++trial) {
    const auto op1 = rng.below(3), op2 = rng.below(3), op3 = rng.below(2);
    GraphBuilder f = [=](Tape&, std::span<const Var> v) {
      Var a = op1 == 0 ? matmul(v[0], v[1]) : op1 == 1 ? row_softmax(matmul(v[0], v[1])) : relu(matmul(v[0], v[1]));
      Var b = op2 == 0 ? mul(a, a) : op2 == 1 ? row_log_softmax(a) : scale(a, 0.5);
      return op3 == 0 ? sum(b) : mean(b);
    };
    Tensor x = random_tensor({3, 4}, rng), y = random_tensor({4, 3}, rng);
    if (op1 == 2) {
      Tape probe;
      const Tensor pre = matmul(probe.constant(x), probe.constant(y)).value();
      bool near_kink = false;
      for (double e : pre.data()) near_kink |= std::abs(e) < 1e-3;
      if (near_kink) continue;
    }
    CHECK(gradient_check(f, {x, y}) < 1e-4);
  }
}

TEST_CASE("backward is deterministic") {
  Rng rng(6);
  const Tensor x = random_tensor({4, 4}, rng), w = random_tensor({4, 4}, rng);
  GraphBuilder f = [](Tape&, std::span<const Var> v) {
    Rng r(12);
    return mean(row_log_softmax(dropout(matmul(v[0], v[1]), 0.25, r)));
  };
  const auto a = tape_gradients(f, {x, w});
  const auto b = tape_gradients(f, {x, w});
  CHECK(a[0] == b[0]);
  CHECK(a[1] == b[1]);
}

TEST_CASE("tape contracts") {
  Tape tape;
  Var x = tape.variable(Tensor::matrix({{1, 2}}));
  CHECK_THROWS_AS(tape.backward(x), ContractError);

  Var untracked = tape.constant(Tensor::matrix({{1, 2}}));
  Var y = sum(mul(untracked, untracked));
  CHECK_FALSE(y.tracked());

  Var z = sum(mul(x, untracked));
  const GradientMap g = tape.backward(z);
  CHECK(g.find(untracked) == nullptr);
  CHECK(g.at(x)[0] == 1.0);
  CHECK(g.at(x)[1] == 2.0);

  Tape other;
  Var foreign = other.variable(Tensor::matrix({{1, 2}}));
  CHECK_THROWS_AS(add(x, foreign), ContractError);
}

TEST_CASE("dropout and embedding edge cases") {
  Tape tape;
  Rng rng(1);
  Var x = tape.variable(Tensor::matrix({{1, 2, 3}}));
  CHECK(dropout(x, 0.0, rng).value() == x.value());
  CHECK_THROWS_AS(dropout(x, 1.0, rng), ConfigError);

  Rng r2(2);
  const Tensor big = Tensor::filled({200, 50}, 1.0);
  const Tensor d = dropout(tape.constant(big), 0.5, r2).value();
  double mean_value = 0.0;
  for (double e : d.data()) {
    CHECK((e == 0.0 || e == 2.0));
    mean_value += e;
  }
  CHECK(mean_value / static_cast<double>(d.size()) == doctest::Approx(1.0).epsilon(0.05));

  Var table = tape.variable(Tensor::matrix({{1, 2}, {3, 4}}));
  const std::vector<int> bad{0, 5};
  CHECK_THROWS_AS(embedding(table, bad), DataError);
  try {
    embedding(table, bad);
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("position 1") != std::string::npos);
  }
}
