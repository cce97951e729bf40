#pragma once

#include <filesystem>

#include "mprvit/train.hpp"

namespace mprvit {

// Checkpoint file: little-endian, 8-byte magic "MPRVITCK", u32 version = 1,
// u32 tensor count, then per tensor: u16 name length, name bytes, u8 rank,
// u64 extents, raw float32 payload. Parameters, optimizer state and metadata
// all use this framing (names param.*, opt.*, meta.*). Round trips are
// bitwise; malformed files raise FormatError naming the byte offset.
void checkpoint_save(const std::filesystem::path& path, const ParamTable& params,
                     const OptimizerState& state, int epoch, double val_loss,
                     const ModelConfig& cfg, const std::vector<Modality>& modalities);

struct Checkpoint {
  ModelConfig config;
  std::vector<Modality> modalities;
  int epoch = 0;
  float val_loss = 0.0f;
  OptimizerState opt;
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<float>>>> params;

  // Copies parameter buffers into the model by name; shapes must match.
  void load_into(Generator& model) const;
};

Checkpoint checkpoint_load(const std::filesystem::path& path);

}  // namespace mprvit
