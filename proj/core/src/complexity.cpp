#include "mprvit/complexity.hpp"

#include <iomanip>
#include <sstream>

namespace mprvit {

std::vector<AblationRow> ablation_sweep(const ModelConfig& base_cfg) {
  base_cfg.validate();
  std::vector<AblationRow> rows;
  for (int rb = 1; rb <= 5; ++rb) {
    ModelConfig cfg = base_cfg;
    cfg.rb_per_combined = rb;
    AblationRow row;
    row.rb_per_combined = rb;
    switch (rb) {
      case 1: row.label = "VCT"; break;
      case 3: row.label = "VCT + 2 RB (MPR-ViT)"; break;
      default: row.label = "VCT + " + std::to_string(rb - 1) + " RB"; break;
    }
    row.params = count_params(cfg);
    const FlopBreakdown f = count_flops_breakdown(cfg, 32);
    row.flops_batch32 = f.conv_path();
    row.flops_total_batch32 = f.total();
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "label,rb_per_combined,params,flops_batch32,flops_total_batch32\n";
  for (const auto& r : rows) {
    os << r.label << ',' << r.rb_per_combined << ',' << r.params << ',' << r.flops_batch32 << ','
       << r.flops_total_batch32 << '\n';
  }
  return os.str();
}

std::string ablation_text(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "Model" << std::right << std::setw(12) << "Params (M)"
     << std::setw(14) << "FLOPs (G)" << std::setw(18) << "FLOPs w/ tx (G)" << '\n';
  os << std::string(68, '-') << '\n';
  os << std::fixed << std::setprecision(1);
  for (const auto& r : rows) {
    os << std::left << std::setw(24) << r.label << std::right << std::setw(12)
       << static_cast<double>(r.params) / 1e6 << std::setw(14)
       << static_cast<double>(r.flops_batch32) / 1e9 << std::setw(18)
       << static_cast<double>(r.flops_total_batch32) / 1e9 << '\n';
  }
  os << "FLOPs column: batch-32 forward pass, transformer stack excluded;\n"
        "the inclusive count is the last column.\n";
  return os.str();
}

}  // namespace mprvit
