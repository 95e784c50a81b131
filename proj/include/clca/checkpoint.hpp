#pragma once

// Checkpoint file, little-endian:
//   "CLCA" | u32 version | u64 json_len | json text | u64 record_count |
//   records: u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f32 data[prod(dims)]
// The JSON block holds {"model": <ModelConfig>, ...}; extra top-level keys
// carry training state.

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "clca/binary_io.hpp"
#include "clca/config.hpp"
#include "clca/errors.hpp"
#include "clca/model.hpp"
#include "clca/tensor.hpp"

namespace clca {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> records;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : records)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  io::write_bytes(os, "CLCA");
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  const std::string text = ck.header.dump();
  io::write_le<std::uint64_t>(os, text.size());
  io::write_bytes(os, text);
  io::write_le<std::uint64_t>(os, ck.records.size());
  for (const auto& [name, t] : ck.records) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    io::write_bytes(os, name);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::write_le<std::uint64_t>(os, d);
    io::write_f32_array(os, t.ptr(), t.numel());
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  io::expect_magic(is, "CLCA");
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto len = io::read_le<std::uint64_t>(is, "config length");
  if (len > (1u << 26)) throw FormatError("implausible config length");
  ck.header = nlohmann::json::parse(io::read_bytes(is, len, "config"), nullptr, false);
  if (ck.header.is_discarded() || !ck.header.is_object()) throw FormatError("checkpoint config is not a JSON object");
  const auto count = io::read_le<std::uint64_t>(is, "record count");
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto nlen = io::read_le<std::uint32_t>(is, "name length");
    if (nlen > 4096) throw FormatError("implausible record name length");
    std::string name = io::read_bytes(is, nlen, "record name");
    const auto rank = io::read_le<std::uint32_t>(is, "rank");
    if (rank == 0 || rank > 8) throw FormatError("record '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = io::read_le<std::uint64_t>(is, "dims");
      if (d == 0 || d > (1ull << 32)) throw FormatError("record '" + name + "' has invalid dimension");
    }
    Tensor<float> t(shape);
    io::read_f32_array(is, t.ptr(), t.numel(), "record data");
    ck.records.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_checkpoint(os, ck);
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return read_checkpoint(is);
}

// Parameters followed by buffers.
inline Checkpoint model_checkpoint(const VitClca<float>& model) {
  Checkpoint ck;
  ck.header["model"] = model.config();
  for (const auto& p : model.params()) ck.records.emplace_back(p.name, p.value);
  for (const auto& [name, t] : model.buffers()) ck.records.emplace_back(name, *t);
  return ck;
}

inline ModelConfig checkpoint_config(const Checkpoint& ck) {
  if (!ck.header.contains("model")) throw FormatError("checkpoint has no model config");
  try {
    return ck.header.at("model").get<ModelConfig>();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
}

inline VitClca<float> model_from_checkpoint(const Checkpoint& ck) {
  VitClca<float> model(checkpoint_config(ck), 0);
  auto assign = [&](const std::string& name, Tensor<float>& dst) {
    const Tensor<float>* src = ck.find(name);
    if (!src) throw FormatError("checkpoint is missing record '" + name + "'");
    if (src->shape() != dst.shape()) {
      throw FormatError("record '" + name + "' has shape " + shape_str(src->shape()) + ", expected " +
                        shape_str(dst.shape()));
    }
    dst = *src;
  };
  for (auto& p : model.params()) assign(p.name, p.value);
  for (auto& [name, t] : model.buffers()) assign(name, *t);
  return model;
}

}  // namespace clca
