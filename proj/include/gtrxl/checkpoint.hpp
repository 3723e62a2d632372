#pragma once

// Checkpoint archive: a directory holding manifest.json (metadata plus the
// name, shape and offset of every tensor) and params.bin (row-major
// little-endian float64 values in manifest order).

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gtrxl/block.hpp"

namespace gtrxl {

inline constexpr const char* kCheckpointFormat = "gtrxl-checkpoint";

inline void save_checkpoint(const std::filesystem::path& dir, const nlohmann::json& meta,
                            const std::vector<NamedTensor>& tensors) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = 1;
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  std::vector<char> blob;
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
  }
  manifest["count"] = offset;
  std::ofstream m(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  m << manifest.dump(2) << '\n';
  std::ofstream p(dir / "params.bin", std::ios::binary | std::ios::trunc);
  p.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!m || !p) throw std::runtime_error("save_checkpoint: failed to write " + dir.string());
}

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;
};

inline Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  if (!m) throw std::runtime_error("read_checkpoint: missing " + (dir / "manifest.json").string());
  const nlohmann::json manifest = nlohmann::json::parse(m);
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw std::runtime_error("read_checkpoint: not a checkpoint manifest");
  }
  std::ifstream p(dir / "params.bin", std::ios::binary);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(p)),
                                  std::istreambuf_iterator<char>());
  const std::size_t count = manifest.at("count").get<std::size_t>();
  if (blob.size() != count * 8) {
    throw std::runtime_error("read_checkpoint: params.bin holds " + std::to_string(blob.size()) +
                             " bytes, manifest expects " + std::to_string(count * 8));
  }
  Checkpoint ck;
  ck.meta = manifest.at("meta");
  for (const auto& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    std::vector<double> values(numel(shape));
    if (offset + values.size() > count) throw std::runtime_error("read_checkpoint: bad offset");
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(blob[(offset + i) * 8 + b]) << (8 * b);
      }
      values[i] = std::bit_cast<double>(bits);
    }
    ck.tensors.push_back({entry.at("name").get<std::string>(),
                          Tensor::from(std::move(shape), std::move(values), true)});
  }
  return ck;
}

/// Copies checkpoint values into existing tensors, matching by name and shape.
inline void load_into(const Checkpoint& ck, std::vector<NamedTensor>& targets) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : ck.tensors) by_name[nt.name] = &nt.tensor;
  if (by_name.size() != targets.size()) {
    throw std::runtime_error("load_into: checkpoint has " + std::to_string(by_name.size()) +
                             " tensors, model has " + std::to_string(targets.size()));
  }
  for (auto& [name, t] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("load_into: missing tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw std::runtime_error("load_into: " + name + " has shape " +
                               to_string(it->second->shape()) + ", model expects " +
                               to_string(t.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(), t.mutable_data().begin());
  }
}

}  // namespace gtrxl
