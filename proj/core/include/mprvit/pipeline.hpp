#pragma once

#include <filesystem>

#include "mprvit/data.hpp"
#include "mprvit/model.hpp"

namespace mprvit {

struct DatasetSlices {
  std::vector<SlicePair> train, val, test;
  std::vector<std::string> test_ids;
};

// Loads every manifest case, normalizes the requested input modalities and
// the ADC target into [-1, 1], and buckets slices by the manifest split.
DatasetSlices load_dataset_slices(const std::filesystem::path& dir,
                                  const std::vector<Modality>& modalities);

// Runs all qualifying axial slices of a raw (unnormalized) case through the
// model and reassembles the prediction volume in the [0, 1] metric frame;
// non-qualifying slices stay zero. Reports the mean per-slice wall time.
Volume synthesize_case(const Generator& model, const PatientCase& raw,
                       const std::vector<Modality>& modalities,
                       double* mean_ms_per_slice = nullptr);

}  // namespace mprvit
