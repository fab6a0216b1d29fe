#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "robustlens/network.h"

namespace rl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// A network plus free-form training metadata (config, epoch, metrics).
struct Checkpoint {
  Network<float> network;
  nlohmann::json metadata = nlohmann::json::object();

  bool operator==(const Checkpoint&) const = default;
};

// Layout, all integers little-endian:
//   "RLCK" | u32 version | u64 header length | JSON header
//   then per tensor: u32 name length | name | u8 dtype (0 f32, 1 f64) |
//                    u32 rank | u64 extents[rank] | payload
// The JSON header holds the NetworkSpec, the metadata, the tensor names in
// payload order and the names of non-trainable buffers.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rl
