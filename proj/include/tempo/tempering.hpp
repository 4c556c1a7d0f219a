#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tempo/tensor.hpp"

namespace tempo {

struct TemperingConfig {
  double temperature = 1.0;
  // Multiply the tempered cross-entropy by the temperature.
  bool rescale_loss = true;
  double label_smoothing = 0.1;

  // Throws ConfigError when temperature <= 0 or smoothing is outside [0, 1).
  void validate() const;
};

// Smoothed reference label: (1 - eps) on the target, eps / (v - 1) elsewhere.
class LabelDistribution {
 public:
  LabelDistribution(int target_id, std::size_t vocab_size, double smoothing);

  int target_id() const { return target_; }
  std::size_t vocab_size() const { return vocab_; }
  double smoothing() const { return smoothing_; }
  double operator[](std::size_t k) const;
  std::vector<double> dense() const;

 private:
  int target_;
  std::size_t vocab_;
  double smoothing_;
};

// softmax(logits / T). Throws ConfigError for T <= 0, NumericError for
// non-finite logits.
std::vector<double> tempered_softmax(std::span<const double> logits, double temperature);

// -<log softmax(D/T), L>, multiplied by T when cfg.rescale_loss is set.
double tempered_cross_entropy(std::span<const double> logits, const LabelDistribution& label,
                              const TemperingConfig& cfg);

// Gradient of tempered_cross_entropy with respect to the logits:
// P_temp - L with rescaling, (P_temp - L) / T without.
std::vector<double> analytic_logit_gradient(std::span<const double> logits,
                                            const LabelDistribution& label,
                                            const TemperingConfig& cfg);

// Entropy in nats, with 0 log 0 = 0.
double shannon_entropy(std::span<const double> probs);

// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

// Token-level sums gathered while computing a batch loss.
struct LossStats {
  double loss_sum = 0.0;
  double tempered_entropy_sum = 0.0;  // entropy of softmax(D / T)
  double raw_entropy_sum = 0.0;       // entropy of softmax(D)
  std::size_t tokens = 0;

  double mean_loss() const { return tokens ? loss_sum / static_cast<double>(tokens) : 0.0; }
  double mean_tempered_entropy() const {
    return tokens ? tempered_entropy_sum / static_cast<double>(tokens) : 0.0;
  }
  double mean_raw_entropy() const {
    return tokens ? raw_entropy_sum / static_cast<double>(tokens) : 0.0;
  }
};

// Mean tempered cross-entropy over rows of logits [N × v] whose target is not
// pad_id. Padding rows contribute neither loss nor entropy. The backward rule
// is analytic_logit_gradient scaled by 1/N.
Var tempered_loss(Var logits, std::span<const int> targets, const TemperingConfig& cfg,
                  LossStats* stats = nullptr, int pad_id = 0);

}  // namespace tempo
