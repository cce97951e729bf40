#pragma once

#include <filesystem>

#include "mprvit/volume.hpp"

namespace mprvit {

// Minimal NIfTI-1 support: uncompressed single-file (.nii), magic "n+1",
// datatype float32 or int16 (int16 values pass through scl_slope/scl_inter
// when the slope is nonzero). Detached-header files ("ni1") and other
// datatypes are rejected with a FormatError naming the offending field.
Volume nifti_read(const std::filesystem::path& path);

// Writes float32 voxels, sizeof_hdr 348, vox_offset 352. Bitwise round trip:
// nifti_read(nifti_write(v)) reproduces voxels and spacing exactly.
void nifti_write(const std::filesystem::path& path, const Volume& v);

}  // namespace mprvit
