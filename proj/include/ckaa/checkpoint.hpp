#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ckaa/config.hpp"
#include "ckaa/model.hpp"

namespace ckaa {

// Binary layout, little-endian: "CKAC", u32 version, u32 section count, then
// per section a u32 name length, the name, a u64 payload length and the
// payload. Sections: config (JSON text), backbone, prompts, adapters[t] for
// every session, heads, gaussians, nullspace_stats, task_keys.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  CkaaModel model;
};

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config, const CkaaModel& model);
// Null-space bases are rebuilt from the stored statistics.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const CkaaModel& model);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ckaa
