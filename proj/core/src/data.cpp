#include "mprvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "mprvit/nifti.hpp"
#include "mprvit/nn_ops.hpp"
#include "mprvit/rng.hpp"
#include "mprvit/tensor.hpp"

namespace mprvit {

// ---------------------------------------------------------------------------
// Volume basics
// ---------------------------------------------------------------------------

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::t1w: return "t1w";
    case Modality::flair: return "flair";
    case Modality::adc: return "adc";
    case Modality::mask: return "mask";
  }
  return "?";
}

Modality modality_from_name(const std::string& name) {
  if (name == "t1w") return Modality::t1w;
  if (name == "flair") return Modality::flair;
  if (name == "adc") return Modality::adc;
  if (name == "mask") return Modality::mask;
  throw ConfigError("unknown modality '" + name + "' (expected t1w|flair|adc|mask)");
}

void Volume::validate() const {
  if (voxels.size() != numel()) {
    throw DimensionError("Volume: buffer has " + std::to_string(voxels.size()) + " voxels, extents need " +
                         std::to_string(numel()));
  }
  for (float s : spacing) {
    if (!(s > 0.0f)) throw DimensionError("Volume: spacing must be positive");
  }
}

Volume make_volume(std::array<std::size_t, 3> extents, Modality modality, float fill) {
  Volume v;
  v.extents = extents;
  v.modality = modality;
  v.voxels.assign(v.numel(), fill);
  return v;
}

void PatientCase::validate() const {
  t1w.validate();
  flair.validate();
  adc.validate();
  const auto& e = t1w.extents;
  auto same = [&](const Volume& v) { return v.extents == e && v.spacing == t1w.spacing; };
  if (!same(flair) || !same(adc) || (mask && !same(*mask))) {
    throw DimensionError("PatientCase " + id + ": volumes must share extents and spacing");
  }
}

const Volume& PatientCase::volume(Modality m) const {
  switch (m) {
    case Modality::t1w: return t1w;
    case Modality::flair: return flair;
    case Modality::adc: return adc;
    case Modality::mask:
      if (!mask) throw ContractError("PatientCase " + id + ": no mask volume");
      return *mask;
  }
  throw ContractError("PatientCase: bad modality");
}

void SplitManifest::validate_partition(const std::vector<std::string>& all_ids) const {
  std::unordered_set<std::string> seen;
  auto absorb = [&](const std::vector<std::string>& part) {
    for (const auto& id : part) {
      if (!seen.insert(id).second) {
        throw ContractError("SplitManifest: patient " + id + " appears in two splits");
      }
    }
  };
  absorb(train);
  absorb(val);
  absorb(test);
  if (seen.size() != all_ids.size()) {
    throw ContractError("SplitManifest: splits cover " + std::to_string(seen.size()) + " of " +
                        std::to_string(all_ids.size()) + " patients");
  }
  for (const auto& id : all_ids) {
    if (!seen.count(id)) throw ContractError("SplitManifest: patient " + id + " missing from splits");
  }
}

std::string SplitManifest::split_of(const std::string& id) const {
  for (const auto& x : train)
    if (x == id) return "train";
  for (const auto& x : val)
    if (x == id) return "val";
  for (const auto& x : test)
    if (x == id) return "test";
  throw ContractError("SplitManifest: unknown patient " + id);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace {

// Linear-interpolated percentile of a copy of the data.
float percentile(std::vector<float> values, double p) {
  std::sort(values.begin(), values.end());
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double f = rank - static_cast<double>(lo);
  return static_cast<float>((1.0 - f) * values[lo] + f * values[hi]);
}

}  // namespace

NormalizeResult normalize_volume(const Volume& v) {
  v.validate();
  const float lo = percentile(v.voxels, 0.5);
  const float hi = percentile(v.voxels, 99.5);
  if (!(hi > lo)) {
    throw ContractError("normalize_volume: degenerate (constant) volume");
  }
  NormalizeResult r;
  r.lo = lo;
  r.hi = hi;
  r.volume = v;
  const float inv = 1.0f / (hi - lo);
  for (float& x : r.volume.voxels) {
    const float c = std::min(std::max(x, lo), hi);
    x = 2.0f * (c - lo) * inv - 1.0f;
  }
  return r;
}

Volume normalize_unit(const Volume& v) {
  NormalizeResult r = normalize_volume(v);
  for (float& x : r.volume.voxels) x = (x + 1.0f) * 0.5f;
  return std::move(r.volume);
}

Volume downsample_volume(const Volume& v) {
  v.validate();
  if (v.extents[0] < 8 || v.extents[1] < 8) {
    throw DimensionError("downsample_volume: in-plane extents must be >= 8");
  }
  const std::size_t x = v.extents[0], y = v.extents[1], z = v.extents[2];
  const std::size_t ox = (x + 1) / 2, oy = (y + 1) / 2;
  // Run all axial slices through the tensor resampler as a [Z,1,Y,X] batch.
  TensorT<float> t = TensorT<float>::from(Shape{z, 1, y, x},
                                          std::vector<float>(v.voxels.begin(), v.voxels.end()));
  TensorT<float> out = bicubic_resize(t, oy, ox);
  Volume r;
  r.extents = {ox, oy, z};
  r.spacing = {v.spacing[0] * 2.0f, v.spacing[1] * 2.0f, v.spacing[2]};
  r.modality = v.modality;
  r.voxels.assign(out.data().begin(), out.data().end());
  return r;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

SplitManifest make_splits(std::vector<std::string> ids, std::array<double, 3> fractions,
                          std::uint64_t seed) {
  if (ids.empty()) throw ContractError("make_splits: empty id list");
  const double fsum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(fsum - 1.0) > 1e-6) {
    throw ContractError("make_splits: fractions sum to " + std::to_string(fsum) + ", expected 1");
  }
  Rng rng(seed);
  rng.shuffle(ids);
  const std::size_t n = ids.size();
  std::size_t n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  std::size_t n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  SplitManifest m;
  m.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  m.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
               ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  m.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  m.validate_partition(ids);
  return m;
}

// ---------------------------------------------------------------------------
// Slice extraction
// ---------------------------------------------------------------------------

std::vector<SlicePair> extract_slices(const PatientCase& c, const std::vector<Modality>& inputs) {
  c.validate();
  if (inputs.empty()) throw ContractError("extract_slices: no input modalities");
  const std::size_t x = c.t1w.extents[0], y = c.t1w.extents[1], z = c.t1w.extents[2];
  const std::size_t plane = x * y;
  std::vector<const Volume*> channels;
  for (Modality m : inputs) channels.push_back(&c.volume(m));

  std::vector<SlicePair> out;
  for (std::size_t zi = 0; zi < z; ++zi) {
    // Coverage: mask voxels > 0.5 when available; otherwise pixels where any
    // input channel rises above the normalized floor of -1.
    std::size_t covered = 0;
    for (std::size_t yi = 0; yi < y; ++yi) {
      for (std::size_t xi = 0; xi < x; ++xi) {
        bool hit = false;
        if (c.mask) {
          hit = c.mask->at(xi, yi, zi) > 0.5f;
        } else {
          for (const Volume* ch : channels) {
            if (ch->at(xi, yi, zi) > -1.0f + 1e-3f) {
              hit = true;
              break;
            }
          }
        }
        if (hit) ++covered;
      }
    }
    if (static_cast<double>(covered) < 0.01 * static_cast<double>(plane)) continue;

    SlicePair pair;
    pair.channels = static_cast<int>(channels.size());
    pair.height = static_cast<int>(y);
    pair.width = static_cast<int>(x);
    pair.patient_id = c.id;
    pair.slice_index = static_cast<int>(zi);
    pair.input.resize(channels.size() * plane);
    pair.target.resize(plane);
    for (std::size_t ci = 0; ci < channels.size(); ++ci) {
      const Volume& ch = *channels[ci];
      for (std::size_t yi = 0; yi < y; ++yi)
        for (std::size_t xi = 0; xi < x; ++xi)
          pair.input[(ci * y + yi) * x + xi] = ch.at(xi, yi, zi);
    }
    for (std::size_t yi = 0; yi < y; ++yi)
      for (std::size_t xi = 0; xi < x; ++xi) pair.target[yi * x + xi] = c.adc.at(xi, yi, zi);
    out.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset I/O
// ---------------------------------------------------------------------------

void write_phantom_dataset(const std::filesystem::path& dir,
                           const std::vector<PatientCase>& cases, const SplitManifest& splits) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("write_phantom_dataset: cannot create " + dir.string());
  std::ostringstream manifest;
  for (const auto& c : cases) {
    c.validate();
    const std::filesystem::path case_dir = dir / c.id;
    std::filesystem::create_directories(case_dir, ec);
    if (ec) throw IoError("write_phantom_dataset: cannot create " + case_dir.string());
    nifti_write(case_dir / "t1w.nii", c.t1w);
    nifti_write(case_dir / "flair.nii", c.flair);
    nifti_write(case_dir / "adc.nii", c.adc);
    manifest << c.id << ",t1w=" << c.id << "/t1w.nii,flair=" << c.id << "/flair.nii,adc=" << c.id
             << "/adc.nii";
    if (c.mask) {
      nifti_write(case_dir / "mask.nii", *c.mask);
      manifest << ",mask=" << c.id << "/mask.nii";
    }
    manifest << ",split=" << splits.split_of(c.id) << "\n";
  }
  std::ofstream out(dir / "manifest.txt", std::ios::trunc);
  if (!out) throw IoError("write_phantom_dataset: cannot write manifest");
  out << manifest.str();
}

std::vector<CaseEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw IoError("read_manifest: cannot open " + (dir / "manifest.txt").string());
  std::vector<CaseEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    CaseEntry entry;
    std::stringstream ss(line);
    std::string field;
    bool first = true;
    while (std::getline(ss, field, ',')) {
      if (first) {
        entry.id = field;
        first = false;
        continue;
      }
      const auto eq = field.find('=');
      if (eq == std::string::npos) {
        throw FormatError("manifest line " + std::to_string(line_no) + ": bad field '" + field + "'");
      }
      const std::string key = field.substr(0, eq);
      const std::string value = field.substr(eq + 1);
      if (key == "split") {
        entry.split = value;
      } else {
        entry.paths[modality_from_name(key)] = value;
      }
    }
    if (entry.id.empty() || entry.split.empty() || !entry.paths.count(Modality::adc)) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": missing id, split or adc");
    }
    entries.push_back(std::move(entry));
  }
  return entries;
}

PatientCase load_case(const std::filesystem::path& dir, const CaseEntry& entry) {
  PatientCase c;
  c.id = entry.id;
  auto read = [&](Modality m) {
    Volume v = nifti_read(dir / entry.paths.at(m));
    v.modality = m;
    return v;
  };
  c.t1w = read(Modality::t1w);
  c.flair = read(Modality::flair);
  c.adc = read(Modality::adc);
  if (entry.paths.count(Modality::mask)) c.mask = read(Modality::mask);
  c.validate();
  return c;
}

}  // namespace mprvit
