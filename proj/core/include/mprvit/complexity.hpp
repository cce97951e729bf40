#pragma once

#include <string>
#include <vector>

#include "mprvit/model.hpp"

namespace mprvit {

struct AblationRow {
  std::string label;
  int rb_per_combined = 0;
  std::int64_t params = 0;
  std::int64_t flops_batch32 = 0;     // conv-path count (comparable figure)
  std::int64_t flops_total_batch32 = 0;  // including the shared transformer
};

// Rows for rb_per_combined in {1..5} on the given profile. The headline
// FLOPs column excludes the weight-shared transformer stack: conv-oriented
// profilers skip custom attention modules, and only the transformer-exclusive
// count lines up with published per-variant tables; the inclusive total is
// reported alongside.
std::vector<AblationRow> ablation_sweep(const ModelConfig& base_cfg);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_text(const std::vector<AblationRow>& rows);

}  // namespace mprvit
