#include "tempo/tempering.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "tempo/error.hpp"

namespace tempo {

void TemperingConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be a positive finite number, got " +
                      std::to_string(temperature));
  }
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw ConfigError("label smoothing must lie in [0, 1), got " + std::to_string(label_smoothing));
  }
}

LabelDistribution::LabelDistribution(int target_id, std::size_t vocab_size, double smoothing)
    : target_(target_id), vocab_(vocab_size), smoothing_(smoothing) {
  if (vocab_size == 0) throw ConfigError("vocabulary size must be positive");
  if (target_id < 0 || static_cast<std::size_t>(target_id) >= vocab_size) {
    throw DataError("target id " + std::to_string(target_id) + " outside vocabulary of size " +
                    std::to_string(vocab_size));
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("label smoothing must lie in [0, 1)");
  if (smoothing > 0.0 && vocab_size < 2) throw ConfigError("label smoothing needs at least two classes");
}

double LabelDistribution::operator[](std::size_t k) const {
  if (k == static_cast<std::size_t>(target_)) return 1.0 - smoothing_;
  return smoothing_ == 0.0 ? 0.0 : smoothing_ / static_cast<double>(vocab_ - 1);
}

std::vector<double> LabelDistribution::dense() const {
  std::vector<double> out(vocab_);
  for (std::size_t k = 0; k < vocab_; ++k) out[k] = (*this)[k];
  return out;
}

namespace {

void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be positive, got " + std::to_string(temperature));
  }
}

void check_logits(std::span<const double> logits) {
  if (logits.empty()) throw ContractError("empty logit vector");
  for (double x : logits) {
    if (!std::isfinite(x)) throw NumericError("non-finite logit");
  }
}

void check_label(std::span<const double> logits, const LabelDistribution& label) {
  if (logits.size() != label.vocab_size()) {
    throw ContractError("logits have " + std::to_string(logits.size()) +
                        " entries but the label covers " + std::to_string(label.vocab_size()));
  }
}

// log softmax(D/T) into `out`.
void tempered_log_softmax(std::span<const double> logits, double temperature,
                          std::span<double> out) {
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
  kernels::log_softmax(scaled, out);
}

double cross_entropy_from_log_probs(std::span<const double> log_probs, const LabelDistribution& label) {
  const double off = label[label.target_id() == 0 ? 1 : 0];
  double total = 0.0;
  if (off != 0.0) {
    for (std::size_t k = 0; k < log_probs.size(); ++k) {
      if (k != static_cast<std::size_t>(label.target_id())) total -= off * log_probs[k];
    }
  }
  total -= (1.0 - label.smoothing()) * log_probs[static_cast<std::size_t>(label.target_id())];
  return total;
}

}  // namespace

std::vector<double> tempered_softmax(std::span<const double> logits, double temperature) {
  check_temperature(temperature);
  check_logits(logits);
  std::vector<double> probs(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) probs[i] = logits[i] / temperature;
  kernels::softmax_inplace(probs);
  return probs;
}

double tempered_cross_entropy(std::span<const double> logits, const LabelDistribution& label,
                              const TemperingConfig& cfg) {
  cfg.validate();
  check_logits(logits);
  check_label(logits, label);
  std::vector<double> log_probs(logits.size());
  tempered_log_softmax(logits, cfg.temperature, log_probs);
  const double ce = cross_entropy_from_log_probs(log_probs, label);
  return cfg.rescale_loss ? ce * cfg.temperature : ce;
}

std::vector<double> analytic_logit_gradient(std::span<const double> logits,
                                            const LabelDistribution& label,
                                            const TemperingConfig& cfg) {
  cfg.validate();
  check_logits(logits);
  check_label(logits, label);
  std::vector<double> grad = tempered_softmax(logits, cfg.temperature);
  for (std::size_t k = 0; k < grad.size(); ++k) grad[k] -= label[k];
  if (!cfg.rescale_loss) {
    for (double& g : grad) g /= cfg.temperature;
  }
  return grad;
}

double shannon_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Var tempered_loss(Var logits, std::span<const int> targets, const TemperingConfig& cfg,
                  LossStats* stats, int pad_id) {
  cfg.validate();
  const Tensor& lv = logits.value();
  const std::size_t rows = lv.rows();
  const std::size_t v = lv.cols();
  if (targets.size() != rows) {
    throw ContractError("tempered_loss: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(rows) + " logit rows");
  }
  if (!lv.all_finite()) throw NumericError("tempered_loss: non-finite logits");

  // Per-row gradient of the summed loss, kept for the backward pass.
  auto grad = std::make_shared<Tensor>(Tensor::zeros({rows, v}));
  LossStats local;
  std::vector<double> log_probs(v), probs(v), raw(v);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    const std::span<const double> row = lv.data().subspan(r * v, v);
    const LabelDistribution label(targets[r], v, cfg.label_smoothing);
    tempered_log_softmax(row, cfg.temperature, log_probs);
    const double ce = cross_entropy_from_log_probs(log_probs, label);
    local.loss_sum += cfg.rescale_loss ? ce * cfg.temperature : ce;
    for (std::size_t k = 0; k < v; ++k) probs[k] = std::exp(log_probs[k]);
    local.tempered_entropy_sum += shannon_entropy(probs);
    std::copy(row.begin(), row.end(), raw.begin());
    kernels::softmax_inplace(raw);
    local.raw_entropy_sum += shannon_entropy(raw);
    ++local.tokens;
    double* g = grad->raw() + r * v;
    const double factor = cfg.rescale_loss ? 1.0 : 1.0 / cfg.temperature;
    for (std::size_t k = 0; k < v; ++k) g[k] = (probs[k] - label[k]) * factor;
  }
  if (stats) *stats = local;
  if (local.tokens == 0) throw ContractError("tempered_loss: batch has no non-padding targets");
  const double inv_n = 1.0 / static_cast<double>(local.tokens);
  return logits.tape()->record(Tensor::scalar(local.loss_sum * inv_n), {logits.id()},
                               [grad, inv_n](const BackwardContext& ctx) {
                                 const double g = ctx.grad_output()[0] * inv_n;
                                 Tensor* gl = ctx.grad_input(0);
                                 for (std::size_t i = 0; i < gl->size(); ++i) (*gl)[i] += g * (*grad)[i];
                               });
}

}  // namespace tempo
