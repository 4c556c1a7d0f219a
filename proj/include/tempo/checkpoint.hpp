#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "tempo/model.hpp"

namespace tempo {

struct Checkpoint {
  ModelConfig config;
  ParameterSet parameters;
  std::uint64_t step = 0;
  // Steps of the snapshots averaged into this one; empty for a plain snapshot.
  std::vector<std::uint64_t> averaged_steps;

  static Checkpoint of(const TransformerModel& model, std::uint64_t step);
  TransformerModel model() const { return TransformerModel::from_parameters(config, parameters); }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Binary container:
//   8 bytes   magic "TEMPOCK1"
//   8 bytes   header length H, little-endian uint64
//   H bytes   JSON header {config, step, averaged_steps, parameters: [{name, shape}]}
//   then every parameter's values as little-endian IEEE-754 doubles, in header order.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tempo
