#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rapnet/autodiff.hpp"

namespace rapnet::ckpt {

// "RAPC" | u32 version | u32 len + config JSON | u32 count |
// per parameter: u32 len + name | u32 rank | u32 extents | f64 payload (LE).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_json;
  nn::ParameterSet params;
};

std::vector<std::uint8_t> encode_checkpoint(const std::string& config_json,
                                            const nn::ParameterSet& params);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const std::string& config_json,
                      const nn::ParameterSet& params);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace rapnet::ckpt
