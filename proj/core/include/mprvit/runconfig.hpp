#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mprvit/metrics.hpp"
#include "mprvit/model.hpp"
#include "mprvit/train.hpp"

namespace mprvit {

// Resolved run configuration: union of model, training, data and metric
// options. Parsed from line-oriented `key = value` text ('#' comments,
// case-sensitive keys, unknown keys rejected with their line number) plus
// `key=value` override strings from the command line.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::array<double, 3> split_fractions{0.6, 0.15, 0.25};
  std::vector<Modality> modalities{Modality::t1w, Modality::flair};
  SsimConstants ssim_constants = SsimConstants::paper_literal;

  void validate() const;

  static RunConfig load(const std::filesystem::path& path,
                        const std::vector<std::string>& overrides = {});
  static RunConfig from_overrides(const std::vector<std::string>& overrides);

  // Applies one `key = value` assignment; line_no appears in error messages
  // (pass 0 for command-line overrides).
  void apply(const std::string& key, const std::string& value, int line_no);

  // Fully resolved `key = value` text, one key per line, stable order.
  std::string serialize() const;
  void archive(const std::filesystem::path& path) const;
};

}  // namespace mprvit
