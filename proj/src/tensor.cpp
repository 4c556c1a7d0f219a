#include "tempo/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tempo/error.hpp"

namespace tempo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.raw(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

MatMap as_matrix(Tensor& t) {
  return MatMap(t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractError("operands recorded on different tapes");
  }
}

void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

void accumulate(Tensor* target, const Tensor& delta) {
  if (target == nullptr) return;
  double* out = target->raw();
  const double* in = delta.raw();
  for (std::size_t i = 0; i < delta.size(); ++i) out[i] += in[i];
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
  }
  if (product(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 1;
  return shape_.size() == 1 ? 1 : data_.size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::tracked() const { return tape_->tracked(id_); }

const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_.value(tape_.inputs(node_)[k]);
}
const Tensor& BackwardContext::output() const { return tape_.value(node_); }

const Tensor* GradientMap::find(Var v) const {
  if (v.id() >= grads_.size()) return nullptr;
  return grads_[v.id()].get();
}

const Tensor& GradientMap::at(Var v) const {
  const Tensor* g = find(v);
  if (g == nullptr) throw ContractError("no gradient recorded for node " + std::to_string(v.id()));
  return *g;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardRule rule) {
  const bool any_tracked =
      std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].tracked; });
  if (!any_tracked) {
    rule = nullptr;
    inputs.clear();
  }
  nodes_.push_back(Node{std::move(value), any_tracked, std::move(inputs), std::move(rule)});
  return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(Var loss) const {
  if (loss.tape() != this) throw ContractError("loss was not recorded on this tape");
  const Tensor& lv = value(loss.id());
  if (lv.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_string(lv.shape()));
  }
  std::vector<std::unique_ptr<Tensor>> grads(nodes_.size());
  if (!nodes_[loss.id()].tracked) return GradientMap(std::move(grads));
  grads[loss.id()] = std::make_unique<Tensor>(Tensor::filled(lv.shape(), 1.0));

  std::vector<Tensor*> targets;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!grads[i] || !node.rule) continue;
    targets.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t j = node.inputs[k];
      if (!nodes_[j].tracked) continue;
      if (!grads[j]) grads[j] = std::make_unique<Tensor>(Tensor::zeros(nodes_[j].value.shape()));
      targets[k] = grads[j].get();
    }
    node.rule(BackwardContext(*this, i, *grads[i], targets));
    // Interior gradients are no longer needed once propagated.
    grads[i].reset();
  }
  return GradientMap(std::move(grads));
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros({a.shape()[0], b.shape()[1]});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

void softmax_inplace(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (double& x : row) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : row) x /= total;
}

void log_softmax(std::span<const double> row, std::span<double> out) {
  const double mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (double x : row) total += std::exp(x - mx);
  const double lse = mx + std::log(total);
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
}

void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                    std::span<const double> bias, double eps, std::span<double> out) {
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * (x[i] - mu) * inv + bias[i];
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Primitives

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Tensor out = kernels::matmul(a.value(), b.value());
  return a.tape()->record(std::move(out), {a.id(), b.id()}, [](const BackwardContext& ctx) {
    const auto g = as_matrix(ctx.grad_output());
    if (Tensor* ga = ctx.grad_input(0)) as_matrix(*ga).noalias() += g * as_matrix(ctx.input(1)).transpose();
    if (Tensor* gb = ctx.grad_input(1)) as_matrix(*gb).noalias() += as_matrix(ctx.input(0)).transpose() * g;
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape()->record(std::move(out), {a.id(), b.id()}, [](const BackwardContext& ctx) {
    accumulate(ctx.grad_input(0), ctx.grad_output());
    accumulate(ctx.grad_input(1), ctx.grad_output());
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape()->record(std::move(out), {a.id(), b.id()}, [](const BackwardContext& ctx) {
    accumulate(ctx.grad_input(0), ctx.grad_output());
    if (Tensor* gb = ctx.grad_input(1)) {
      const Tensor& g = ctx.grad_output();
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape()->record(std::move(out), {a.id(), b.id()}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& x = ctx.input(0);
    const Tensor& y = ctx.input(1);
    if (Tensor* ga = ctx.grad_input(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
    }
    if (Tensor* gb = ctx.grad_input(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& x : out.mutable_data()) x *= factor;
  return a.tape()->record(std::move(out), {a.id()}, [factor](const BackwardContext& ctx) {
    Tensor* ga = ctx.grad_input(0);
    const Tensor& g = ctx.grad_output();
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += factor * g[i];
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  }
  return x.tape()->record(std::move(out), {x.id(), bias.id()}, [n](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    accumulate(ctx.grad_input(0), g);
    if (Tensor* gb = ctx.grad_input(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % n] += g[i];
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.mutable_data()) v = v > 0.0 ? v : 0.0;
  return x.tape()->record(std::move(out), {x.id()}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    const Tensor& in = ctx.input(0);
    Tensor* gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > 0.0) (*gx)[i] += g[i];
    }
  });
}

Var sum(Var x) {
  const auto& d = x.value().data();
  const double total = std::accumulate(d.begin(), d.end(), 0.0);
  return x.tape()->record(Tensor::scalar(total), {x.id()}, [](const BackwardContext& ctx) {
    const double g = ctx.grad_output()[0];
    for (double& v : ctx.grad_input(0)->mutable_data()) v += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var row_softmax(Var x) {
  require_finite(x.value(), "row_softmax");
  Tensor out = x.value();
  const std::size_t n = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    kernels::softmax_inplace(out.mutable_data().subspan(r * n, n));
  }
  return x.tape()->record(std::move(out), {x.id()}, [n](const BackwardContext& ctx) {
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.grad_output();
    Tensor* gx = ctx.grad_input(0);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) (*gx)[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

Var row_log_softmax(Var x) {
  require_finite(x.value(), "row_log_softmax");
  const Tensor& in = x.value();
  Tensor out = Tensor::zeros(in.shape());
  const std::size_t n = in.cols();
  for (std::size_t r = 0; r < in.rows(); ++r) {
    kernels::log_softmax(in.data().subspan(r * n, n), out.mutable_data().subspan(r * n, n));
  }
  return x.tape()->record(std::move(out), {x.id()}, [n](const BackwardContext& ctx) {
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.grad_output();
    Tensor* gx = ctx.grad_input(0);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < n; ++c) gsum += g[r * n + c];
      for (std::size_t c = 0; c < n; ++c) {
        (*gx)[r * n + c] += g[r * n + c] - std::exp(y[r * n + c]) * gsum;
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.value().shape()) +
                         " do not match last dimension of " + shape_string(xv.shape()));
  }
  Tensor out = Tensor::zeros(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    kernels::layer_norm_row(xv.data().subspan(r * n, n), gain.value().data(), bias.value().data(),
                            eps, out.mutable_data().subspan(r * n, n));
  }
  return x.tape()->record(
      std::move(out), {x.id(), gain.id(), bias.id()}, [n, eps](const BackwardContext& ctx) {
        const Tensor& in = ctx.input(0);
        const Tensor& gamma = ctx.input(1);
        const Tensor& g = ctx.grad_output();
        Tensor* gx = ctx.grad_input(0);
        Tensor* ggain = ctx.grad_input(1);
        Tensor* gbias = ctx.grad_input(2);
        std::vector<double> xhat(n), dxhat(n);
        const double dn = static_cast<double>(n);
        for (std::size_t r = 0; r < in.rows(); ++r) {
          const double* row = in.raw() + r * n;
          const double* grow = g.raw() + r * n;
          double mu = 0.0;
          for (std::size_t c = 0; c < n; ++c) mu += row[c];
          mu /= dn;
          double var = 0.0;
          for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
          var /= dn;
          const double inv = 1.0 / std::sqrt(var + eps);
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            xhat[c] = (row[c] - mu) * inv;
            dxhat[c] = grow[c] * gamma[c];
            sum_d += dxhat[c];
            sum_dx += dxhat[c] * xhat[c];
            if (ggain) (*ggain)[c] += grow[c] * xhat[c];
            if (gbias) (*gbias)[c] += grow[c];
          }
          if (gx) {
            for (std::size_t c = 0; c < n; ++c) {
              (*gx)[r * n + c] += inv / dn * (dn * dxhat[c] - sum_d - xhat[c] * sum_dx);
            }
          }
        }
      });
}

Var dropout(Var x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
    out[i] *= (*mask)[i];
  }
  return x.tape()->record(std::move(out), {x.id()}, [mask](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor* gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (*mask)[i];
  });
}

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding table must be a matrix");
  const std::size_t vocab = tv.shape()[0];
  const std::size_t dim = tv.shape()[1];
  if (ids.empty()) throw ContractError("embedding: empty id sequence");
  Tensor out = Tensor::zeros({ids.size(), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DataError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                      " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(tv.raw() + static_cast<std::size_t>(ids[i]) * dim, dim, out.raw() + i * dim);
  }
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), {table.id()}, [idx, dim](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_output();
    Tensor* gt = ctx.grad_input(0);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      double* dst = gt->raw() + static_cast<std::size_t>((*idx)[i]) * dim;
      const double* src = g.raw() + i * dim;
      for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
    }
  });
}

Var multi_head_attention(Var q, Var k, Var v, const AttentionShape& shape, double dropout_rate,
                         Rng* rng) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t B = shape.batch, Lq = shape.query_len, Lk = shape.key_len, H = shape.heads;
  const std::size_t d = qv.cols();
  if (qv.rank() != 2 || qv.rows() != B * Lq || kv.rows() != B * Lk || vv.rows() != B * Lk ||
      kv.cols() != d || vv.cols() != d || H == 0 || d % H != 0) {
    throw DimensionError("multi_head_attention: q " + shape_string(qv.shape()) + ", k " +
                         shape_string(kv.shape()) + ", v " + shape_string(vv.shape()) +
                         " inconsistent with batch/heads");
  }
  if (shape.causal && Lq != Lk) throw DimensionError("causal attention needs query_len == key_len");
  if (!shape.key_valid.empty() && shape.key_valid.size() != B * Lk) {
    throw DimensionError("multi_head_attention: key mask size mismatch");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  const bool drop = dropout_rate > 0.0 && rng != nullptr;
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  const auto eLq = static_cast<Eigen::Index>(Lq), eLk = static_cast<Eigen::Index>(Lk),
             edh = static_cast<Eigen::Index>(dh);

  struct Saved {
    std::vector<double> probs;  // B*H*Lq*Lk softmax weights before dropout
    std::vector<double> mask;   // dropout multipliers, empty when disabled
  };
  auto saved = std::make_shared<Saved>();
  saved->probs.assign(B * H * Lq * Lk, 0.0);
  if (drop) saved->mask.assign(B * H * Lq * Lk, 0.0);
  const double keep_scale = drop ? 1.0 / (1.0 - dropout_rate) : 1.0;

  Tensor out = Tensor::zeros({B * Lq, d});
  RowMat scores(eLq, eLk);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      ConstStridedMap qh(qv.raw() + b * Lq * d + h * dh, eLq, edh, stride);
      ConstStridedMap kh(kv.raw() + b * Lk * d + h * dh, eLk, edh, stride);
      ConstStridedMap vh(vv.raw() + b * Lk * d + h * dh, eLk, edh, stride);
      scores.noalias() = (qh * kh.transpose()) * inv_sqrt;
      double* P = saved->probs.data() + (b * H + h) * Lq * Lk;
      for (std::size_t i = 0; i < Lq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        auto visible = [&](std::size_t j) {
          if (shape.causal && j > i) return false;
          return shape.key_valid.empty() || shape.key_valid[b * Lk + j];
        };
        for (std::size_t j = 0; j < Lk; ++j) {
          if (visible(j)) mx = std::max(mx, scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        }
        if (!std::isfinite(mx)) throw NumericError("attention row with no visible keys");
        double total = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) {
          const double e = visible(j) ? std::exp(scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - mx) : 0.0;
          P[i * Lk + j] = e;
          total += e;
        }
        for (std::size_t j = 0; j < Lk; ++j) P[i * Lk + j] /= total;
      }
      ConstMatMap probs(P, eLq, eLk);
      StridedMap oh(out.raw() + b * Lq * d + h * dh, eLq, edh, stride);
      if (drop) {
        double* M = saved->mask.data() + (b * H + h) * Lq * Lk;
        for (std::size_t i = 0; i < Lq * Lk; ++i) M[i] = rng->bernoulli(dropout_rate) ? 0.0 : keep_scale;
        RowMat dropped = probs.cwiseProduct(ConstMatMap(M, eLq, eLk));
        oh.noalias() = dropped * vh;
      } else {
        oh.noalias() = probs * vh;
      }
    }
  }

  return q.tape()->record(
      std::move(out), {q.id(), k.id(), v.id()},
      [saved, B, Lq, Lk, H, d, dh, inv_sqrt](const BackwardContext& ctx) {
        const Tensor& qv = ctx.input(0);
        const Tensor& kv = ctx.input(1);
        const Tensor& vv = ctx.input(2);
        const Tensor& g = ctx.grad_output();
        Tensor* gq = ctx.grad_input(0);
        Tensor* gk = ctx.grad_input(1);
        Tensor* gv = ctx.grad_input(2);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        const auto eLq = static_cast<Eigen::Index>(Lq), eLk = static_cast<Eigen::Index>(Lk),
                   edh = static_cast<Eigen::Index>(dh);
        const bool drop = !saved->mask.empty();
        RowMat dweights(eLq, eLk), dscores(eLq, eLk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off_q = b * Lq * d + h * dh;
            const std::size_t off_k = b * Lk * d + h * dh;
            ConstStridedMap qh(qv.raw() + off_q, eLq, edh, stride);
            ConstStridedMap kh(kv.raw() + off_k, eLk, edh, stride);
            ConstStridedMap vh(vv.raw() + off_k, eLk, edh, stride);
            ConstStridedMap goh(g.raw() + off_q, eLq, edh, stride);
            ConstMatMap probs(saved->probs.data() + (b * H + h) * Lq * Lk, eLq, eLk);
            dweights.noalias() = goh * vh.transpose();
            if (drop) {
              ConstMatMap mask(saved->mask.data() + (b * H + h) * Lq * Lk, eLq, eLk);
              if (gv) {
                StridedMap gvh(gv->raw() + off_k, eLk, edh, stride);
                gvh.noalias() += probs.cwiseProduct(mask).transpose() * goh;
              }
              dweights = dweights.cwiseProduct(mask);
            } else if (gv) {
              StridedMap gvh(gv->raw() + off_k, eLk, edh, stride);
              gvh.noalias() += probs.transpose() * goh;
            }
            const Eigen::VectorXd rowdot = probs.cwiseProduct(dweights).rowwise().sum();
            dscores = probs.cwiseProduct(dweights.colwise() - rowdot) * inv_sqrt;
            if (gq) {
              StridedMap gqh(gq->raw() + off_q, eLq, edh, stride);
              gqh.noalias() += dscores * kh;
            }
            if (gk) {
              StridedMap gkh(gk->raw() + off_k, eLk, edh, stride);
              gkh.noalias() += dscores.transpose() * qh;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  Tensor grad = Tensor::zeros(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace tempo
