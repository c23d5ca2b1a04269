#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mimd/model.hpp"

namespace mimd {

/// Parameter checkpoint: magic "MWT1", u32 entry count, then per entry
/// {u32 name length, name bytes, u32 rank, u32 dims..., u64 element offset},
/// followed by every tensor's values as little-endian float64 in entry order.
std::vector<char> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(const std::vector<char>& bytes);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace mimd
