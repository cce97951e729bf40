#include "mprvit/pipeline.hpp"

#include <chrono>

#include "mprvit/train.hpp"

namespace mprvit {

DatasetSlices load_dataset_slices(const std::filesystem::path& dir,
                                  const std::vector<Modality>& modalities) {
  DatasetSlices out;
  for (const CaseEntry& entry : read_manifest(dir)) {
    PatientCase raw = load_case(dir, entry);
    PatientCase normalized;
    normalized.id = raw.id;
    normalized.t1w = normalize_volume(raw.t1w).volume;
    normalized.flair = normalize_volume(raw.flair).volume;
    normalized.adc = normalize_volume(raw.adc).volume;
    normalized.mask = raw.mask;
    auto slices = extract_slices(normalized, modalities);
    auto& bucket = entry.split == "train" ? out.train : entry.split == "val" ? out.val : out.test;
    for (auto& s : slices) bucket.push_back(std::move(s));
    if (entry.split == "test") out.test_ids.push_back(entry.id);
  }
  return out;
}

Volume synthesize_case(const Generator& model, const PatientCase& raw,
                       const std::vector<Modality>& modalities, double* mean_ms_per_slice) {
  PatientCase normalized;
  normalized.id = raw.id;
  normalized.t1w = normalize_volume(raw.t1w).volume;
  normalized.flair = normalize_volume(raw.flair).volume;
  normalized.adc = make_volume(raw.t1w.extents, Modality::adc);  // placeholder target
  normalized.adc.spacing = raw.t1w.spacing;
  normalized.mask = raw.mask;
  auto slices = extract_slices(normalized, modalities);

  Volume out = make_volume(raw.t1w.extents, Modality::adc);
  out.spacing = raw.t1w.spacing;
  TapePause<float> pause;
  double total_ms = 0.0;
  for (const SlicePair& s : slices) {
    std::vector<const SlicePair*> batch{&s};
    const auto t0 = std::chrono::steady_clock::now();
    Tensor pred = model.forward(make_input_batch(batch));
    const auto t1 = std::chrono::steady_clock::now();
    total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    auto pv = pred.data();
    const std::size_t x = out.extents[0], y = out.extents[1];
    for (std::size_t yi = 0; yi < y; ++yi)
      for (std::size_t xi = 0; xi < x; ++xi) {
        out.at(xi, yi, static_cast<std::size_t>(s.slice_index)) = (pv[yi * x + xi] + 1.0f) * 0.5f;
      }
  }
  if (mean_ms_per_slice) {
    *mean_ms_per_slice = slices.empty() ? 0.0 : total_ms / static_cast<double>(slices.size());
  }
  return out;
}

}  // namespace mprvit
