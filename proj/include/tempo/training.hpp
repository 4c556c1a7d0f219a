#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "tempo/checkpoint.hpp"
#include "tempo/data.hpp"
#include "tempo/model.hpp"
#include "tempo/tempering.hpp"

namespace tempo {

struct TrainerConfig {
  // lr(s) = lr_scale * min(s * warmup^-1.5, s^-0.5)
  double lr_scale = 0.04;
  std::size_t warmup_steps = 400;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_epsilon = 1e-9;
  std::size_t batch_size = 32;
  std::size_t eval_interval = 200;
  std::size_t patience = 10;
  double min_delta = 0.1;
  std::size_t max_steps = 3000;
  std::size_t checkpoint_keep = 10;
  bool early_stopping = true;
  // Global-norm gradient clipping; 0 disables it.
  double clip_norm = 0.0;
  // Generation limit used for dev BLEU evaluation.
  std::size_t eval_max_length = 64;
  std::uint64_t seed = 1;

  void validate() const;
};

double learning_rate(const TrainerConfig& cfg, std::size_t step);

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double tempered_entropy = 0.0;
  double raw_entropy = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
  double wall_seconds = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  double dev_bleu = 0.0;
  std::size_t checkpoint_id = 0;
};

struct ExperimentRecord {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  bool stopped_early = false;
  std::size_t final_step = 0;

  // Line-delimited JSON: {"type":"step",...}, {"type":"eval",...}, and a
  // closing {"type":"summary",...}.
  void write_jsonl(const std::filesystem::path& path) const;
  static ExperimentRecord read_jsonl(const std::filesystem::path& path);
};

struct TrainingData {
  std::vector<EncodedPair> train;
  std::vector<EncodedPair> dev;
};

struct TrainingResult {
  TransformerModel model;
  std::vector<Checkpoint> checkpoints;  // the last checkpoint_keep snapshots, oldest first
  ExperimentRecord record;
};

// Called after backward with the raw (unclipped) parameter gradients.
using GradientObserver = std::function<void(std::size_t step, std::span<const Tensor> grads)>;

TrainingResult train(TransformerModel model, const TrainingData& data, const TemperingConfig& tempering,
                     const TrainerConfig& trainer, const GradientObserver& observer = {});

// L2 norm over the concatenation of all gradients.
double global_gradient_norm(std::span<const Tensor> grads);

// Corpus BLEU of greedy decodes of `dev` against its references.
double evaluate_checkpoint(const TransformerModel& model, std::span<const EncodedPair> dev,
                           std::size_t max_length);

// True iff the last `patience` scores span at most min_delta (max - min).
bool should_stop(std::span<const double> history, std::size_t patience, double min_delta);

// Element-wise mean of the snapshots' parameters.
Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints);

}  // namespace tempo
