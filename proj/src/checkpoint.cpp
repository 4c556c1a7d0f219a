#include "tempo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "tempo/error.hpp"
#include "tempo/serialize.hpp"

namespace tempo {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'T', 'E', 'M', 'P', 'O', 'C', 'K', '1'};
}

Checkpoint Checkpoint::of(const TransformerModel& model, std::uint64_t step) {
  return Checkpoint{model.config(), model.parameters(), step, {}};
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = ckpt.config;
  header["step"] = ckpt.step;
  header["averaged_steps"] = ckpt.averaged_steps;
  auto& params = header["parameters"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ckpt.parameters.size(); ++i) {
    params.push_back({{"name", ckpt.parameters.name(i)}, {"shape", ckpt.parameters.value(i).shape()}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < ckpt.parameters.size(); ++i) {
    const Tensor& t = ckpt.parameters.value(i);
    out.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError(path.string() + ": not a checkpoint");
  if (len > (1u << 26)) throw DataError(path.string() + ": implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated header");

  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(text);
    ckpt.config = header.at("config").get<ModelConfig>();
    ckpt.step = header.at("step").get<std::uint64_t>();
    ckpt.averaged_steps = header.at("averaged_steps").get<std::vector<std::uint64_t>>();
    for (const auto& p : header.at("parameters")) {
      Shape shape = p.at("shape").get<Shape>();
      Tensor t = Tensor::zeros(shape);
      in.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      if (!in) throw DataError(path.string() + ": truncated parameter data");
      ckpt.parameters.add(p.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad checkpoint header: " + e.what());
  }
  return ckpt;
}

}  // namespace tempo
