#pragma once

// Binary checkpoint format (all integers little-endian):
//   "LASD" | u32 version | u32 config_bytes | config text
//   then per tensor until EOF:
//     u32 name_bytes | name | u32 rank | u64 dims[rank] | f64 payload (row-major)
// The config text is UTF-8 `key=value` lines: the model config followed by
// `step` and `seed`. Optimizer moments, when present, are stored as tensors
// named `opt.m/<param>` and `opt.v/<param>`.

#include "lasad/model.hpp"
#include "lasad/train.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lasad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Matrix>> tensors;
  std::int64_t step = 0;
  std::uint64_t seed = 0;

  const Matrix* find(std::string_view name) const;
};

/// Snapshot of the model (and optimizer moments, if given).
Checkpoint make_checkpoint(const Model& model, const AdamW* optimizer, std::int64_t step, std::uint64_t seed);

/// Rebuilds the model; every parameter must be present with the shape the
/// config implies. Throws LoadError naming the offending tensor otherwise.
Model restore_model(const Checkpoint& checkpoint);
/// Rebuilds optimizer moments when the checkpoint carries them.
std::optional<AdamW> restore_optimizer(const Checkpoint& checkpoint, const Model& model, OptimizerConfig config);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace lasad
