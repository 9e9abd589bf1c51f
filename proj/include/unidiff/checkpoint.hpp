#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "unidiff/denoiser.hpp"
#include "unidiff/schedule.hpp"

namespace unidiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Everything needed to rebuild a denoiser: trunk, null embedding, concept and
// suffix tables, attached adapters, the schedule it was trained for, and the
// seeds that produced it (stage name -> seed).
struct Checkpoint {
  DenoiserModel model;
  NoiseSchedule schedule;
  std::map<std::string, std::uint64_t> lineage;
};

// Layout: 8-byte magic, u32 format version, u64 header length, JSON header
// (architecture, schedule, lineage, section table), then the float64 sections
// in header order. Section names: "trunk/<layer>.<weight|bias>", "null_embed",
// "concepts/token/<name>", "concepts/suffix/<name>", "adapters/<layer>/<down|up>".
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace unidiff
