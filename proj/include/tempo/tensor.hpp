#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tempo/rng.hpp"

namespace tempo {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array of 64-bit reals.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  // Leading dimension, with all trailing dimensions folded into cols().
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  // Invalidated when anything else is recorded on the same tape; copy it to keep it.
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool tracked() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Access given to a backward rule while it runs.
class BackwardContext {
 public:
  BackwardContext(const Tape& tape, std::size_t node, const Tensor& grad_output,
                  std::span<Tensor* const> grad_inputs)
      : tape_(tape), node_(node), grad_output_(grad_output), grad_inputs_(grad_inputs) {}

  const Tensor& input(std::size_t k) const;
  const Tensor& output() const;
  const Tensor& grad_output() const { return grad_output_; }
  // Null when input k does not require a gradient.
  Tensor* grad_input(std::size_t k) const { return grad_inputs_[k]; }

 private:
  const Tape& tape_;
  std::size_t node_;
  const Tensor& grad_output_;
  std::span<Tensor* const> grad_inputs_;
};

using BackwardRule = std::function<void(const BackwardContext&)>;

class GradientMap {
 public:
  GradientMap() = default;
  explicit GradientMap(std::vector<std::unique_ptr<Tensor>> grads) : grads_(std::move(grads)) {}

  // Null for untracked leaves and for values the loss does not depend on.
  const Tensor* find(Var v) const;
  const Tensor& at(Var v) const;
  bool contains(Var v) const { return find(v) != nullptr; }

 private:
  std::vector<std::unique_ptr<Tensor>> grads_;
};

// Records primitive applications in evaluation order. Nodes are appended only
// after their operands, so the node vector is already topologically sorted.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  // Appends a derived value. The node is tracked iff any input is tracked; the
  // rule is dropped for untracked nodes.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardRule rule);

  GradientMap backward(Var loss) const;

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool tracked(std::size_t id) const { return nodes_[id].tracked; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    Tensor value;
    bool tracked = false;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. All operands must live on the same tape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// x [m×n] plus bias [n] broadcast over rows.
Var add_bias(Var x, Var bias);
Var relu(Var x);
Var sum(Var x);
Var mean(Var x);
Var row_softmax(Var x);
Var row_log_softmax(Var x);
// Normalizes each row (last dimension) then applies gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps);
// Inverted dropout: kept units are divided by (1 - rate). Identity when rate == 0.
Var dropout(Var x, double rate, Rng& rng);
// Gathers rows of table [vocab × dim] by id; result [ids.size() × dim].
Var embedding(Var table, std::span<const int> ids);

struct AttentionShape {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  std::size_t heads = 1;
  bool causal = false;
  // batch*key_len flags; empty means every key is visible.
  std::vector<bool> key_valid;
};

// Scaled dot-product attention over `heads` column groups. q is
// [batch*query_len × d]; k and v are [batch*key_len × d]. Dropout (rate > 0,
// rng non-null) is applied to the attention weights.
Var multi_head_attention(Var q, Var k, Var v, const AttentionShape& shape, double dropout_rate,
                         Rng* rng);

// ---------------------------------------------------------------------------
// Plain kernels shared by the tape primitives and by incremental decoding.
namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b);
// Softmax of one row in place, with max subtraction.
void softmax_inplace(std::span<double> row);
// Log-softmax of `row` written to `out`.
void log_softmax(std::span<const double> row, std::span<double> out);
void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                    std::span<const double> bias, double eps, std::span<double> out);

}  // namespace kernels

// Central differences (f(x+h·e_i) − f(x−h·e_i)) / 2h for every coordinate i.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h);

}  // namespace tempo
