#pragma once

#include "json.hpp"

#include "tempo/data.hpp"
#include "tempo/decoding.hpp"
#include "tempo/model.hpp"
#include "tempo/tempering.hpp"
#include "tempo/training.hpp"

// JSON mappings for the configuration structs. Reading starts from the
// defaults, so partial documents are accepted; unknown keys raise ConfigError.
namespace tempo {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TemperingConfig& c);
void from_json(const nlohmann::json& j, TemperingConfig& c);
void to_json(nlohmann::json& j, const TrainerConfig& c);
void from_json(const nlohmann::json& j, TrainerConfig& c);
void to_json(nlohmann::json& j, const SyntheticTaskSpec& c);
void from_json(const nlohmann::json& j, SyntheticTaskSpec& c);
void to_json(nlohmann::json& j, const BeamConfig& c);
void from_json(const nlohmann::json& j, BeamConfig& c);

}  // namespace tempo
