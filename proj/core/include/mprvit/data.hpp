#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "mprvit/volume.hpp"

namespace mprvit {

// ---------------------------------------------------------------------------
// Normalization / resampling
// ---------------------------------------------------------------------------

// Percentile-clipped affine normalization into [-1, 1]. `lo` and `hi` are the
// p0.5 / p99.5 intensities of the source volume; they restore predictions to
// the [0, 1] metric frame or to original units.
struct NormalizeResult {
  Volume volume;  // values in [-1, 1]
  float lo = 0.0f, hi = 1.0f;

  float to_unit(float v) const { return (v + 1.0f) * 0.5f; }  // [-1,1] -> [0,1]
  float to_original(float v) const { return lo + to_unit(v) * (hi - lo); }
};

NormalizeResult normalize_volume(const Volume& v);

// Robust [0,1] mapping by the volume's own p0.5/p99.5 range (identity-baseline
// and ground-truth scoring frame).
Volume normalize_unit(const Volume& v);

// Per-axial-slice bicubic downsampling to ceil(X/2) x ceil(Y/2); Z unchanged,
// in-plane spacing doubled.
Volume downsample_volume(const Volume& v);

// ---------------------------------------------------------------------------
// Splits and slices
// ---------------------------------------------------------------------------

// Seeded shuffle, then contiguous assignment honoring round(n * fraction)
// target counts (the last split takes the remainder).
SplitManifest make_splits(std::vector<std::string> ids, std::array<double, 3> fractions,
                          std::uint64_t seed);

// One SlicePair per axial index whose brain coverage is at least 1% of
// pixels (mask volume when present, nonzero-intensity fallback otherwise).
// Volumes must be normalized; channels follow the order of `inputs`.
std::vector<SlicePair> extract_slices(const PatientCase& normalized_case,
                                      const std::vector<Modality>& inputs);

// ---------------------------------------------------------------------------
// Synthetic phantom dataset
// ---------------------------------------------------------------------------

// ADC intensity as a fixed deterministic function of the t1w and flair
// intensities; the learnable input->target mapping of the phantom data.
// f(0, 0) = 0, so background and brain boundary are continuous.
float phantom_adc_mapping(float t1w, float flair);
constexpr float kPhantomNoiseAmplitude = 0.01f;

// Deterministic synthetic paired cases: smooth ellipsoidal tissue regions
// with per-region intensities per modality, a lesion region with distinctive
// contrast, and ADC = phantom_adc_mapping(t1w, flair) + seeded noise inside
// the brain mask. Fully reproducible per (seed, case index).
std::vector<PatientCase> phantom_generate(int n_cases, std::array<std::size_t, 3> extents,
                                          std::uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk dataset layout
// ---------------------------------------------------------------------------

// manifest.txt line: id,t1w=PATH,flair=PATH,adc=PATH,mask=PATH,split=SPLIT
struct CaseEntry {
  std::string id;
  std::map<Modality, std::string> paths;  // relative to the dataset root
  std::string split;
};

void write_phantom_dataset(const std::filesystem::path& dir,
                           const std::vector<PatientCase>& cases, const SplitManifest& splits);
std::vector<CaseEntry> read_manifest(const std::filesystem::path& dir);
PatientCase load_case(const std::filesystem::path& dir, const CaseEntry& entry);

}  // namespace mprvit
