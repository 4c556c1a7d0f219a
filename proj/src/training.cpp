#include "tempo/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <string>

#include "json.hpp"
#include "tempo/decoding.hpp"
#include "tempo/error.hpp"
#include "tempo/metrics.hpp"

namespace tempo {

void TrainerConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("trainer config: " + what); };
  if (!(lr_scale > 0.0)) fail("lr_scale must be positive");
  if (warmup_steps == 0) fail("warmup_steps must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("adam betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (eval_interval == 0) fail("eval_interval must be >= 1");
  if (patience == 0) fail("patience must be >= 1");
  if (!(min_delta >= 0.0)) fail("min_delta must be >= 0");
  if (max_steps == 0) fail("max_steps must be positive");
  if (checkpoint_keep == 0) fail("checkpoint_keep must be positive");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be >= 0");
  if (eval_max_length == 0) fail("eval_max_length must be positive");
}

double learning_rate(const TrainerConfig& cfg, std::size_t step) {
  if (step == 0) return 0.0;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  return cfg.lr_scale * std::min(s * std::pow(w, -1.5), 1.0 / std::sqrt(s));
}

double global_gradient_norm(std::span<const Tensor> grads) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g.data()) sq += x * x;
  }
  return std::sqrt(sq);
}

double evaluate_checkpoint(const TransformerModel& model, std::span<const EncodedPair> dev,
                           std::size_t max_length) {
  std::vector<TokenIds> hyps, refs;
  hyps.reserve(dev.size());
  refs.reserve(dev.size());
  for (const auto& pair : dev) {
    hyps.push_back(strip_special(greedy_decode(model, pair.source, max_length).tokens));
    refs.push_back(strip_special(pair.target));
  }
  return corpus_bleu(hyps, refs);
}

bool should_stop(std::span<const double> history, std::size_t patience, double min_delta) {
  if (patience == 0 || history.size() < patience) return false;
  const auto window = history.subspan(history.size() - patience);
  const auto [lo, hi] = std::minmax_element(window.begin(), window.end());
  return *hi - *lo <= min_delta;
}

Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints) {
  if (checkpoints.empty()) throw ContractError("average_checkpoints: no checkpoints");
  const Checkpoint& first = checkpoints.front();
  Checkpoint out;
  out.config = first.config;
  out.step = 0;
  for (const auto& c : checkpoints) {
    if (c.config != first.config || c.parameters.size() != first.parameters.size()) {
      throw ContractError("average_checkpoints: checkpoints have different configurations");
    }
    out.step = std::max(out.step, c.step);
    out.averaged_steps.push_back(c.step);
  }
  for (std::size_t i = 0; i < first.parameters.size(); ++i) {
    const std::string& name = first.parameters.name(i);
    Tensor acc = Tensor::zeros(first.parameters.value(i).shape());
    double count = 0.0;
    for (const auto& c : checkpoints) {
      if (c.parameters.name(i) != name || c.parameters.value(i).shape() != acc.shape()) {
        throw ContractError("average_checkpoints: parameter " + name + " differs in name or shape");
      }
      const Tensor& v = c.parameters.value(i);
      count += 1.0;
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += (v[k] - acc[k]) / count;
    }
    out.parameters.add(name, std::move(acc));
  }
  return out;
}

TrainingResult train(TransformerModel model, const TrainingData& data, const TemperingConfig& tempering,
                     const TrainerConfig& trainer, const GradientObserver& observer) {
  tempering.validate();
  trainer.validate();
  if (data.train.empty()) throw ContractError("train: empty training set");

  const auto started = std::chrono::steady_clock::now();
  ParameterSet& params = model.parameters();
  std::vector<Tensor> adam_m, adam_v;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_m.push_back(Tensor::zeros(params.value(i).shape()));
    adam_v.push_back(Tensor::zeros(params.value(i).shape()));
  }

  TrainingResult result{model, {}, {}};
  std::vector<double> bleu_history;
  std::vector<Batch> epoch;
  std::size_t epoch_index = 0, cursor = 0;
  std::vector<Tensor> grads(params.size());
  std::size_t step = 0;

  auto run_eval = [&]() {
    const double bleu = data.dev.empty() ? 0.0 : evaluate_checkpoint(model, data.dev, trainer.eval_max_length);
    bleu_history.push_back(bleu);
    result.checkpoints.push_back(Checkpoint::of(model, step));
    if (result.checkpoints.size() > trainer.checkpoint_keep) result.checkpoints.erase(result.checkpoints.begin());
    result.record.evals.push_back({step, bleu, bleu_history.size() - 1});
  };

  while (step < trainer.max_steps) {
    if (cursor == epoch.size()) {
      epoch = make_batches(data.train, trainer.batch_size, derive_seed(trainer.seed, 1000 + epoch_index++));
      cursor = 0;
    }
    const Batch& batch = epoch[cursor++];
    ++step;

    const std::string where = "step " + std::to_string(step) + " (batch " + std::to_string(cursor - 1) +
                              " of epoch " + std::to_string(epoch_index - 1) + ")";
    Tape tape;
    const auto vars = model.bind(tape, true);
    Rng dropout_rng(derive_seed(trainer.seed, 1'000'000 + step));
    LossStats stats;
    Var loss;
    try {
      Var logits = model.forward(tape, vars, batch.source, batch.decoder_input(), ForwardOptions{true, &dropout_rng});
      loss = tempered_loss(logits, batch.labels(), tempering, &stats);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at " + where);
    }
    const double loss_value = loss.value().item();
    if (!std::isfinite(loss_value)) throw NumericError("non-finite loss at " + where);
    const GradientMap gmap = tape.backward(loss);
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Tensor* g = gmap.find(vars[i]);
      grads[i] = g ? *g : Tensor::zeros(params.value(i).shape());
    }
    if (observer) observer(step, grads);
    const double norm = global_gradient_norm(grads);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at " + where);
    const double clip = trainer.clip_norm > 0.0 && norm > trainer.clip_norm ? trainer.clip_norm / norm : 1.0;

    const double lr = learning_rate(trainer, step);
    const double bc1 = 1.0 - std::pow(trainer.adam_beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(trainer.adam_beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      double* w = params.value(i).raw();
      double* m = adam_m[i].raw();
      double* v = adam_v[i].raw();
      const double* g = grads[i].raw();
      for (std::size_t k = 0; k < grads[i].size(); ++k) {
        const double gk = g[k] * clip;
        m[k] = trainer.adam_beta1 * m[k] + (1.0 - trainer.adam_beta1) * gk;
        v[k] = trainer.adam_beta2 * v[k] + (1.0 - trainer.adam_beta2) * gk * gk;
        w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + trainer.adam_epsilon);
      }
    }

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.record.steps.push_back({step, loss_value, stats.mean_tempered_entropy(), stats.mean_raw_entropy(), norm, lr, wall});

    if (step % trainer.eval_interval == 0) {
      run_eval();
      if (trainer.early_stopping && should_stop(bleu_history, trainer.patience, trainer.min_delta)) {
        result.record.stopped_early = true;
        break;
      }
    }
  }
  if (result.record.evals.empty() || result.record.evals.back().step != step) run_eval();
  result.record.final_step = step;
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------

void ExperimentRecord::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : steps) {
    nlohmann::json j = {{"type", "step"},          {"step", s.step},
                        {"loss", s.loss},          {"tempered_entropy", s.tempered_entropy},
                        {"raw_entropy", s.raw_entropy}, {"grad_norm", s.grad_norm},
                        {"learning_rate", s.learning_rate}, {"wall_seconds", s.wall_seconds}};
    out << j.dump() << '\n';
  }
  for (const auto& e : evals) {
    nlohmann::json j = {{"type", "eval"}, {"step", e.step}, {"dev_bleu", e.dev_bleu}, {"checkpoint_id", e.checkpoint_id}};
    out << j.dump() << '\n';
  }
  out << nlohmann::json{{"type", "summary"}, {"stopped_early", stopped_early}, {"final_step", final_step}}.dump()
      << '\n';
}

ExperimentRecord ExperimentRecord::read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  ExperimentRecord r;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "step") {
        StepRecord s;
        s.step = j.at("step");
        s.loss = j.value("loss", std::nan(""));
        s.tempered_entropy = j.value("tempered_entropy", std::nan(""));
        s.raw_entropy = j.value("raw_entropy", std::nan(""));
        s.grad_norm = j.value("grad_norm", std::nan(""));
        s.learning_rate = j.value("learning_rate", std::nan(""));
        s.wall_seconds = j.value("wall_seconds", std::nan(""));
        r.steps.push_back(s);
      } else if (type == "eval") {
        r.evals.push_back({j.at("step"), j.value("dev_bleu", std::nan("")), j.value("checkpoint_id", std::size_t{0})});
      } else if (type == "summary") {
        r.stopped_early = j.value("stopped_early", false);
        r.final_step = j.value("final_step", std::size_t{0});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return r;
}

}  // namespace tempo
