#include "tempo/serialize.hpp"

#include <functional>
#include <map>
#include <string>

#include "tempo/error.hpp"

namespace tempo {

namespace {

using Json = nlohmann::json;

// Assigns each key of `j` through the matching setter; unknown keys fail.
void read_fields(const Json& j, const char* what,
                 const std::map<std::string, std::function<void(const Json&)>>& setters) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
    try {
      it->second(value);
    } catch (const Json::exception& e) {
      throw ConfigError(std::string(what) + "." + key + ": " + e.what());
    }
  }
}

template <class T>
std::function<void(const Json&)> into(T& field) {
  return [&field](const Json& v) { field = v.get<T>(); };
}

}  // namespace

void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"num_layers", c.num_layers},
           {"model_dim", c.model_dim},
           {"num_heads", c.num_heads},
           {"ff_dim", c.ff_dim},
           {"attention_dropout", c.attention_dropout},
           {"embedding_dropout", c.embedding_dropout},
           {"layer_dropout", c.layer_dropout},
           {"recurrent_stacking", c.recurrent_stacking},
           {"source_vocab", c.source_vocab},
           {"target_vocab", c.target_vocab},
           {"max_positions", c.max_positions},
           {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const Json& j, ModelConfig& c) {
  read_fields(j, "model", {{"num_layers", into(c.num_layers)},
                           {"model_dim", into(c.model_dim)},
                           {"num_heads", into(c.num_heads)},
                           {"ff_dim", into(c.ff_dim)},
                           {"attention_dropout", into(c.attention_dropout)},
                           {"embedding_dropout", into(c.embedding_dropout)},
                           {"layer_dropout", into(c.layer_dropout)},
                           {"recurrent_stacking", into(c.recurrent_stacking)},
                           {"source_vocab", into(c.source_vocab)},
                           {"target_vocab", into(c.target_vocab)},
                           {"max_positions", into(c.max_positions)},
                           {"layer_norm_eps", into(c.layer_norm_eps)}});
}

void to_json(Json& j, const TemperingConfig& c) {
  j = Json{{"temperature", c.temperature}, {"rescale_loss", c.rescale_loss}, {"label_smoothing", c.label_smoothing}};
}

void from_json(const Json& j, TemperingConfig& c) {
  read_fields(j, "tempering", {{"temperature", into(c.temperature)},
                               {"rescale_loss", into(c.rescale_loss)},
                               {"label_smoothing", into(c.label_smoothing)}});
}

void to_json(Json& j, const TrainerConfig& c) {
  j = Json{{"lr_scale", c.lr_scale},
           {"warmup_steps", c.warmup_steps},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_epsilon", c.adam_epsilon},
           {"batch_size", c.batch_size},
           {"eval_interval", c.eval_interval},
           {"patience", c.patience},
           {"min_delta", c.min_delta},
           {"max_steps", c.max_steps},
           {"checkpoint_keep", c.checkpoint_keep},
           {"early_stopping", c.early_stopping},
           {"clip_norm", c.clip_norm},
           {"eval_max_length", c.eval_max_length},
           {"seed", c.seed}};
}

void from_json(const Json& j, TrainerConfig& c) {
  read_fields(j, "trainer", {{"lr_scale", into(c.lr_scale)},
                             {"warmup_steps", into(c.warmup_steps)},
                             {"adam_beta1", into(c.adam_beta1)},
                             {"adam_beta2", into(c.adam_beta2)},
                             {"adam_epsilon", into(c.adam_epsilon)},
                             {"batch_size", into(c.batch_size)},
                             {"eval_interval", into(c.eval_interval)},
                             {"patience", into(c.patience)},
                             {"min_delta", into(c.min_delta)},
                             {"max_steps", into(c.max_steps)},
                             {"checkpoint_keep", into(c.checkpoint_keep)},
                             {"early_stopping", into(c.early_stopping)},
                             {"clip_norm", into(c.clip_norm)},
                             {"eval_max_length", into(c.eval_max_length)},
                             {"seed", into(c.seed)}});
}

void to_json(Json& j, const SyntheticTaskSpec& c) {
  std::vector<std::string> kinds;
  for (auto k : c.multilingual_kinds) kinds.push_back(to_string(k));
  j = Json{{"kind", to_string(c.kind)},
           {"alphabet_size", c.alphabet_size},
           {"min_length", c.min_length},
           {"max_length", c.max_length},
           {"train_size", c.train_size},
           {"dev_size", c.dev_size},
           {"test_size", c.test_size},
           {"noise_rate", c.noise_rate},
           {"noisy_eval", c.noisy_eval},
           {"seed", c.seed},
           {"multilingual_kinds", kinds}};
}

void from_json(const Json& j, SyntheticTaskSpec& c) {
  read_fields(j, "task", {{"kind", [&](const Json& v) { c.kind = task_kind_from_string(v.get<std::string>()); }},
                          {"alphabet_size", into(c.alphabet_size)},
                          {"min_length", into(c.min_length)},
                          {"max_length", into(c.max_length)},
                          {"train_size", into(c.train_size)},
                          {"dev_size", into(c.dev_size)},
                          {"test_size", into(c.test_size)},
                          {"noise_rate", into(c.noise_rate)},
                          {"noisy_eval", into(c.noisy_eval)},
                          {"seed", into(c.seed)},
                          {"multilingual_kinds", [&](const Json& v) {
                             c.multilingual_kinds.clear();
                             for (const auto& k : v) c.multilingual_kinds.push_back(task_kind_from_string(k.get<std::string>()));
                           }}});
}

void to_json(Json& j, const BeamConfig& c) {
  j = Json{{"beam_size", c.beam_size}, {"length_penalty_alpha", c.length_penalty_alpha}, {"max_length", c.max_length}};
}

void from_json(const Json& j, BeamConfig& c) {
  read_fields(j, "beam", {{"beam_size", into(c.beam_size)},
                          {"length_penalty_alpha", into(c.length_penalty_alpha)},
                          {"max_length", into(c.max_length)}});
}

}  // namespace tempo
