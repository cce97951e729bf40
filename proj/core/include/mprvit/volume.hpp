#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mprvit/errors.hpp"

namespace mprvit {

enum class Modality { t1w, flair, adc, mask };

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);

// 3-d scalar field with voxel spacing. Buffer order: x fastest, then y,
// then z (axial slice = fixed z).
struct Volume {
  std::array<std::size_t, 3> extents{0, 0, 0};  // X, Y, Z
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // mm per axis
  std::vector<float> voxels;
  Modality modality = Modality::t1w;

  std::size_t numel() const { return extents[0] * extents[1] * extents[2]; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * extents[1] + y) * extents[0] + x;
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }

  void validate() const;
};

Volume make_volume(std::array<std::size_t, 3> extents, Modality modality, float fill = 0.0f);

// Co-registered multiparametric case; all volumes share extents and spacing.
struct PatientCase {
  std::string id;
  Volume t1w, flair, adc;
  std::optional<Volume> mask;

  void validate() const;
  const Volume& volume(Modality m) const;
};

// One 2-d training example: input channels (ordered [t1w, flair] when
// multimodal) and the target ADC slice. Values are in [-1, 1] once the
// source volumes have been normalized.
struct SlicePair {
  std::vector<float> input;   // channels * height * width
  std::vector<float> target;  // height * width
  int channels = 0, height = 0, width = 0;
  std::string patient_id;
  int slice_index = 0;
};

// Patient-level split assignment; disjoint and exhaustive by construction.
struct SplitManifest {
  std::vector<std::string> train, val, test;

  // Throws if the three sets are not a partition of `all_ids`.
  void validate_partition(const std::vector<std::string>& all_ids) const;
  // "train" / "val" / "test"; throws ContractError for unknown ids.
  std::string split_of(const std::string& id) const;
};

}  // namespace mprvit
