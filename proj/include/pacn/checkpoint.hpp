#pragma once

#include <string>

#include "pacn/model.hpp"

namespace pacn {

/// "PACNCKPT" | u32 version | config JSON (u32 length + bytes) | u32 count |
/// per tensor: length-prefixed path, u32 rank, u32 dims..., f32 data.
/// Parameters come first, then BatchNorm running statistics. All little-endian.
inline constexpr char kCheckpointMagic[] = "PACNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const PacnModel& model);
PacnModel deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const PacnModel& model);
PacnModel load_checkpoint(const std::string& path);

}  // namespace pacn
