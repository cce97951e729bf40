#include "mprvit/nifti.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace mprvit {

namespace {

static_assert(std::endian::native == std::endian::little,
              "NIfTI and checkpoint layouts assume a little-endian host");

// NIfTI-1 header, 348 bytes. Only the fields this reader interprets are
// named; everything else stays in the reserved byte runs.
#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;    // offset 0: must be 348
  char unused0[36];           // offset 4
  std::int16_t dim[8];        // offset 40
  char unused1[14];           // offset 56
  std::int16_t datatype;      // offset 70
  std::int16_t bitpix;        // offset 72
  std::int16_t slice_start;   // offset 74
  float pixdim[8];            // offset 76
  float vox_offset;           // offset 108
  float scl_slope;            // offset 112
  float scl_inter;            // offset 116
  char reserved[224];         // offset 120: fields this reader ignores
  char magic[4];              // offset 344: "n+1\0"
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

}  // namespace

Volume nifti_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("nifti_read: cannot open " + path.string());
  Nifti1Header hdr{};
  in.read(reinterpret_cast<char*>(&hdr), sizeof(hdr));
  if (!in) throw FormatError("nifti_read: truncated header in " + path.string());
  if (hdr.sizeof_hdr != 348) {
    throw FormatError("nifti_read: sizeof_hdr is " + std::to_string(hdr.sizeof_hdr) +
                      ", expected 348 (" + path.string() + ")");
  }
  if (std::memcmp(hdr.magic, "n+1", 4) != 0) {
    if (std::memcmp(hdr.magic, "ni1", 4) == 0) {
      throw FormatError("nifti_read: magic 'ni1' (detached header) unsupported in " + path.string());
    }
    throw FormatError("nifti_read: bad magic field in " + path.string());
  }
  if (hdr.datatype != kDtFloat32 && hdr.datatype != kDtInt16) {
    throw FormatError("nifti_read: datatype " + std::to_string(hdr.datatype) +
                      " unsupported (float32 or int16 only) in " + path.string());
  }
  if (hdr.dim[0] < 3) {
    throw FormatError("nifti_read: dim[0] = " + std::to_string(hdr.dim[0]) +
                      ", expected a 3-d volume in " + path.string());
  }
  Volume v;
  for (int i = 0; i < 3; ++i) {
    if (hdr.dim[i + 1] < 1) throw FormatError("nifti_read: dim[" + std::to_string(i + 1) + "] < 1");
    v.extents[static_cast<std::size_t>(i)] = static_cast<std::size_t>(hdr.dim[i + 1]);
    v.spacing[static_cast<std::size_t>(i)] = hdr.pixdim[i + 1] > 0.0f ? hdr.pixdim[i + 1] : 1.0f;
  }
  // Trailing dims, when present, must be singleton.
  for (int i = 4; i <= hdr.dim[0] && i < 8; ++i) {
    if (hdr.dim[i] > 1) throw FormatError("nifti_read: only single-frame volumes supported");
  }
  const std::size_t n = v.numel();
  const std::streamoff offset = static_cast<std::streamoff>(hdr.vox_offset);
  if (offset < static_cast<std::streamoff>(sizeof(hdr))) {
    throw FormatError("nifti_read: vox_offset " + std::to_string(offset) + " overlaps the header");
  }
  in.seekg(offset, std::ios::beg);
  v.voxels.resize(n);
  if (hdr.datatype == kDtFloat32) {
    in.read(reinterpret_cast<char*>(v.voxels.data()), static_cast<std::streamsize>(n * 4));
    if (!in) throw FormatError("nifti_read: truncated float32 payload in " + path.string());
  } else {
    std::vector<std::int16_t> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 2));
    if (!in) throw FormatError("nifti_read: truncated int16 payload in " + path.string());
    const bool scaled = hdr.scl_slope != 0.0f;
    for (std::size_t i = 0; i < n; ++i) {
      const float x = static_cast<float>(raw[i]);
      v.voxels[i] = scaled ? hdr.scl_slope * x + hdr.scl_inter : x;
    }
  }
  v.validate();
  return v;
}

void nifti_write(const std::filesystem::path& path, const Volume& v) {
  v.validate();
  Nifti1Header hdr{};
  hdr.sizeof_hdr = 348;
  hdr.dim[0] = 3;
  for (int i = 0; i < 3; ++i) {
    hdr.dim[i + 1] = static_cast<std::int16_t>(v.extents[static_cast<std::size_t>(i)]);
    hdr.pixdim[i + 1] = v.spacing[static_cast<std::size_t>(i)];
  }
  for (int i = 4; i < 8; ++i) hdr.dim[i] = 1;
  hdr.datatype = kDtFloat32;
  hdr.bitpix = 32;
  hdr.pixdim[0] = 1.0f;
  hdr.vox_offset = 352.0f;
  hdr.scl_slope = 0.0f;
  hdr.scl_inter = 0.0f;
  std::memcpy(hdr.magic, "n+1", 4);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("nifti_write: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
  const char ext[4] = {0, 0, 0, 0};  // no header extensions
  out.write(ext, 4);
  out.write(reinterpret_cast<const char*>(v.voxels.data()),
            static_cast<std::streamsize>(v.voxels.size() * 4));
  if (!out) throw IoError("nifti_write: write failed for " + path.string());
}

}  // namespace mprvit
