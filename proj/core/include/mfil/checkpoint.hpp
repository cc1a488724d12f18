#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mfil/params.hpp"

namespace mfil {

/// On-disk layout, all integers little-endian:
///   "MFIL" | u32 version | u32 entry count |
///   per entry: u16 name length | name bytes | u8 rank | u64 extents[rank] | f32 values
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Tensor<float> value;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const ParamList<float>& params);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

/// Copies entries into matching parameters. On any name or shape disagreement throws a
/// CheckpointError whose message lists every differing parameter; nothing is modified then.
void apply_checkpoint(const std::vector<CheckpointEntry>& entries, const ParamList<float>& params);

}  // namespace mfil
