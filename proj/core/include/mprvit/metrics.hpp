#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mprvit/volume.hpp"

namespace mprvit {

// Mean of squared voxel differences over the whole volume.
double mse(const Volume& x, const Volume& y);

// 10*log10(max_i^2 / MSE) in dB; +infinity when MSE is zero.
double psnr(const Volume& x, const Volume& y, double max_i);

enum class SsimConstants {
  paper_literal,  // C1 = 0.01 L, C2 = 0.02 L (as printed)
  standard,       // C1 = (0.01 L)^2, C2 = (0.03 L)^2
};

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double l = 1.0;  // dynamic range of the target
  SsimConstants constants = SsimConstants::paper_literal;
};

// Sliding Gaussian-window SSIM per axial slice, averaged over all window
// positions and slices. Throws DimensionError when the window exceeds the
// slice extents.
double ssim(const Volume& x, const Volume& y, const SsimOptions& opts = {});

struct TTestResult {
  double t = 0.0;
  int df = 0;
  double p = 1.0;  // two-sided
};

// Paired two-sided Student t-test; p from the regularized incomplete beta
// function. Throws ContractError for n < 2 or zero-variance differences.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct PatientMetrics {
  std::string id;
  double mse = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricAggregate {
  double mean = 0.0;
  double sd = 0.0;
};

struct PairedComparison {
  TTestResult mse, psnr, ssim;
  double alpha = 0.05;
  bool significant(const TTestResult& r) const { return r.p < alpha; }
};

struct MetricsReport {
  std::vector<PatientMetrics> rows;
  MetricAggregate mse_agg, psnr_agg, ssim_agg;
  std::optional<PairedComparison> vs_baseline;
};

// Per-patient metrics of [0,1] predictions against ground truth, with the
// ground truth mapped into [0,1] by its own robust (p0.5/p99.5) range and
// max_i = 1. Predictions are clamped to [0,1]. Patient sets must match
// (PairingError listing offenders otherwise). When `baseline` is given,
// paired two-sided t-tests per metric are attached at alpha = 0.05.
MetricsReport evaluate(const std::vector<std::pair<std::string, Volume>>& predictions,
                       const std::vector<std::pair<std::string, Volume>>& ground_truth,
                       const MetricsReport* baseline = nullptr, const SsimOptions& ssim_opts = {});

std::string report_csv(const MetricsReport& report);
std::string report_text(const MetricsReport& report);

}  // namespace mprvit
