#pragma once

// Binary checkpoint container. Layout (all integers little-endian):
//
//   "CGN1"                      4-byte magic
//   u32 version                 currently 1
//   u32 n, n bytes              JSON header: {"topology": ..., "meta": ...}
//   u32 record_count
//   record_count x {
//     u32 n, n bytes            tensor name
//     u32 rank
//     u64 dims[rank]
//     f64 values[prod(dims)]    IEEE-754 binary64, row-major
//   }

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgnet/model.hpp"
#include "cgnet/tensor.hpp"

namespace cgnet {

inline constexpr char kCheckpointMagic[4] = {'C', 'G', 'N', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointContainer {
  nlohmann::json header;
  std::vector<CheckpointRecord> records;
};

void write_container(const std::filesystem::path& path, const CheckpointContainer& c);
/// Throws DataError on a missing file, bad magic, unsupported version or truncation.
CheckpointContainer read_container(const std::filesystem::path& path);

/// Saves topology, every buffer of `net` and free-form metadata.
void save_checkpoint(const std::filesystem::path& path, Network& net,
                     const nlohmann::json& meta = nlohmann::json::object());

struct LoadedModel {
  Network net;
  nlohmann::json meta;
};
/// Rebuilds the network from the stored topology and restores all buffers.
/// The returned network has frozen statistics, ready for inference.
LoadedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace cgnet
