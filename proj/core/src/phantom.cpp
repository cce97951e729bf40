#include <algorithm>
#include <cmath>
#include <string>

#include "mprvit/data.hpp"
#include "mprvit/rng.hpp"

namespace mprvit {

float phantom_adc_mapping(float t1w, float flair) {
  // Fixed smooth mapping with f(0,0) = 0 so the brain boundary is continuous.
  return 0.55f * flair + 0.30f * t1w * (1.0f - flair) + 0.15f * (1.0f - t1w) * flair;
}

namespace {

struct Ellipsoid {
  float cx, cy, cz;     // center, voxel units
  float ax, ay, az;     // semi-axes
  float steepness;      // edge softness of the logistic falloff

  // 1 deep inside, 0 far outside, smooth across the boundary.
  float weight(float x, float y, float z) const {
    const float dx = (x - cx) / ax, dy = (y - cy) / ay, dz = (z - cz) / az;
    const float r = std::sqrt(dx * dx + dy * dy + dz * dz);
    return 1.0f / (1.0f + std::exp((r - 1.0f) * steepness));
  }
};

struct Region {
  Ellipsoid shape;
  float t1w_base, flair_base;
};

// Low-frequency multiplicative field keeping volumes non-constant per region.
struct SmoothField {
  float ax, bx, ay, by, az, bz, amp;
  float value(float x, float y, float z) const {
    return 1.0f + amp * std::sin(ax * x + bx) * std::sin(ay * y + by) * std::sin(az * z + bz);
  }
};

SmoothField make_field(Rng& rng, float amp) {
  auto freq = [&] { return static_cast<float>(rng.uniform(0.05, 0.22)); };
  auto phase = [&] { return static_cast<float>(rng.uniform(0.0, 6.283185)); };
  return SmoothField{freq(), phase(), freq(), phase(), freq(), phase(), amp};
}

}  // namespace

std::vector<PatientCase> phantom_generate(int n_cases, std::array<std::size_t, 3> extents,
                                          std::uint64_t seed) {
  if (n_cases < 1) throw ContractError("phantom_generate: need at least one case");
  if (extents[0] % 4 != 0 || extents[1] % 4 != 0) {
    throw ConfigError("phantom_generate: in-plane extents must be divisible by 4");
  }
  if (extents[0] < 16 || extents[1] < 16 || extents[2] < 1) {
    throw ConfigError("phantom_generate: extents too small");
  }
  const float ex = static_cast<float>(extents[0]);
  const float ey = static_cast<float>(extents[1]);
  const float ez = static_cast<float>(extents[2]);

  std::vector<PatientCase> cases;
  cases.reserve(static_cast<std::size_t>(n_cases));
  for (int ci = 0; ci < n_cases; ++ci) {
    Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(ci));

    Ellipsoid brain;
    brain.cx = ex * 0.5f * static_cast<float>(rng.uniform(0.96, 1.04));
    brain.cy = ey * 0.5f * static_cast<float>(rng.uniform(0.96, 1.04));
    brain.cz = ez * 0.5f;
    brain.ax = ex * static_cast<float>(rng.uniform(0.34, 0.40));
    brain.ay = ey * static_cast<float>(rng.uniform(0.34, 0.40));
    brain.az = ez * static_cast<float>(rng.uniform(0.52, 0.62));
    brain.steepness = 12.0f;

    auto inside_point = [&](float margin) {
      const float u = static_cast<float>(rng.uniform(-margin, margin));
      const float v = static_cast<float>(rng.uniform(-margin, margin));
      const float w = static_cast<float>(rng.uniform(-margin, margin));
      return std::array<float, 3>{brain.cx + u * brain.ax, brain.cy + v * brain.ay,
                                  brain.cz + w * brain.az};
    };

    // Base gray/white-like tissue plus a few coarser structures.
    std::vector<Region> regions;
    const int n_regions = 3 + static_cast<int>(rng.below(3));
    for (int r = 0; r < n_regions; ++r) {
      Region reg;
      auto c = inside_point(0.55f);
      reg.shape = {c[0], c[1], c[2],
                   ex * static_cast<float>(rng.uniform(0.10, 0.30)),
                   ey * static_cast<float>(rng.uniform(0.10, 0.30)),
                   ez * static_cast<float>(rng.uniform(0.18, 0.45)),
                   static_cast<float>(rng.uniform(6.0, 12.0))};
      reg.t1w_base = static_cast<float>(rng.uniform(0.35, 0.90));
      reg.flair_base = static_cast<float>(rng.uniform(0.30, 0.85));
      regions.push_back(reg);
    }
    // Lesion: dark on t1w, bright on flair.
    {
      Region lesion;
      auto c = inside_point(0.45f);
      lesion.shape = {c[0], c[1], c[2],
                      ex * static_cast<float>(rng.uniform(0.06, 0.14)),
                      ey * static_cast<float>(rng.uniform(0.06, 0.14)),
                      ez * static_cast<float>(rng.uniform(0.12, 0.30)),
                      static_cast<float>(rng.uniform(8.0, 14.0))};
      lesion.t1w_base = static_cast<float>(rng.uniform(0.15, 0.30));
      lesion.flair_base = static_cast<float>(rng.uniform(0.80, 0.95));
      regions.push_back(lesion);
    }

    const float t1w_bg = static_cast<float>(rng.uniform(0.45, 0.65));
    const float flair_bg = static_cast<float>(rng.uniform(0.35, 0.55));
    const SmoothField t1w_field = make_field(rng, 0.08f);
    const SmoothField flair_field = make_field(rng, 0.08f);

    PatientCase pc;
    pc.id = "case_" + std::string(3 - std::min<std::size_t>(3, std::to_string(ci).size()), '0') +
            std::to_string(ci);
    pc.t1w = make_volume(extents, Modality::t1w);
    pc.flair = make_volume(extents, Modality::flair);
    pc.adc = make_volume(extents, Modality::adc);
    pc.mask = make_volume(extents, Modality::mask);

    for (std::size_t z = 0; z < extents[2]; ++z) {
      for (std::size_t y = 0; y < extents[1]; ++y) {
        for (std::size_t x = 0; x < extents[0]; ++x) {
          const float fx = static_cast<float>(x), fy = static_cast<float>(y), fz = static_cast<float>(z);
          const float wb = brain.weight(fx, fy, fz);
          float t1 = t1w_bg, fl = flair_bg;
          for (const Region& reg : regions) {
            const float w = reg.shape.weight(fx, fy, fz);
            t1 = (1.0f - w) * t1 + w * reg.t1w_base;
            fl = (1.0f - w) * fl + w * reg.flair_base;
          }
          t1 = std::clamp(t1 * t1w_field.value(fx, fy, fz) * wb, 0.0f, 1.0f);
          fl = std::clamp(fl * flair_field.value(fx, fy, fz) * wb, 0.0f, 1.0f);
          pc.t1w.at(x, y, z) = t1;
          pc.flair.at(x, y, z) = fl;
          const bool in_brain = wb > 0.5f;
          pc.mask->at(x, y, z) = in_brain ? 1.0f : 0.0f;
          float adc = phantom_adc_mapping(t1, fl);
          if (in_brain) {
            adc += kPhantomNoiseAmplitude * static_cast<float>(rng.uniform(-1.0, 1.0));
          }
          pc.adc.at(x, y, z) = std::clamp(adc, 0.0f, 1.0f);
        }
      }
    }
    pc.validate();
    cases.push_back(std::move(pc));
  }
  return cases;
}

}  // namespace mprvit
