#include "mprvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "mprvit/data.hpp"

namespace mprvit {

double mse(const Volume& x, const Volume& y) {
  if (x.extents != y.extents) {
    throw DimensionError("mse: extents mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < x.voxels.size(); ++i) {
    const double d = static_cast<double>(x.voxels[i]) - static_cast<double>(y.voxels[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(x.voxels.size());
}

double psnr(const Volume& x, const Volume& y, double max_i) {
  if (!(max_i > 0.0)) throw ContractError("psnr: max_i must be positive");
  const double e = mse(x, y);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_i * max_i / e);
}

double ssim(const Volume& x, const Volume& y, const SsimOptions& opts) {
  if (x.extents != y.extents) throw DimensionError("ssim: extents mismatch");
  const int win = opts.window;
  const std::size_t w = x.extents[0], h = x.extents[1], z = x.extents[2];
  if (static_cast<std::size_t>(win) > w || static_cast<std::size_t>(win) > h) {
    throw DimensionError("ssim: window " + std::to_string(win) + " larger than slice " +
                         std::to_string(w) + "x" + std::to_string(h));
  }
  // Normalized Gaussian window.
  std::vector<double> kernel(static_cast<std::size_t>(win) * win);
  {
    double sum = 0.0;
    const double inv2s2 = 1.0 / (2.0 * opts.sigma * opts.sigma);
    const double c = (win - 1) / 2.0;
    for (int i = 0; i < win; ++i)
      for (int j = 0; j < win; ++j) {
        const double d2 = (i - c) * (i - c) + (j - c) * (j - c);
        kernel[static_cast<std::size_t>(i) * win + j] = std::exp(-d2 * inv2s2);
        sum += kernel[static_cast<std::size_t>(i) * win + j];
      }
    for (double& k : kernel) k /= sum;
  }
  double c1, c2;
  if (opts.constants == SsimConstants::paper_literal) {
    c1 = 0.01 * opts.l;
    c2 = 0.02 * opts.l;
  } else {
    c1 = (0.01 * opts.l) * (0.01 * opts.l);
    c2 = (0.03 * opts.l) * (0.03 * opts.l);
  }

  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t zi = 0; zi < z; ++zi) {
    const float* px = x.voxels.data() + zi * w * h;
    const float* py = y.voxels.data() + zi * w * h;
    for (std::size_t oy = 0; oy + win <= h; ++oy) {
      for (std::size_t ox = 0; ox + win <= w; ++ox) {
        double mx = 0.0, my = 0.0, mxx = 0.0, myy = 0.0, mxy = 0.0;
        for (int i = 0; i < win; ++i) {
          const float* rx = px + (oy + static_cast<std::size_t>(i)) * w + ox;
          const float* ry = py + (oy + static_cast<std::size_t>(i)) * w + ox;
          const double* kr = kernel.data() + static_cast<std::size_t>(i) * win;
          for (int j = 0; j < win; ++j) {
            const double k = kr[j];
            const double xv = rx[j], yv = ry[j];
            mx += k * xv;
            my += k * yv;
            mxx += k * xv * xv;
            myy += k * yv * yv;
            mxy += k * xv * yv;
          }
        }
        const double vx = mxx - mx * mx;
        const double vy = myy - my * my;
        const double cov = mxy - mx * my;
        const double num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
        ++windows;
      }
    }
  }
  return total / static_cast<double>(windows);
}

// ---------------------------------------------------------------------------
// Student t-test
// ---------------------------------------------------------------------------

namespace {

// Continued-fraction evaluation of the regularized incomplete beta function
// (modified Lentz), the classic route to Student-t tail probabilities.
double betacf(double a, double b, double x) {
  const int max_iter = 300;
  const double eps = 3e-16, fpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::abs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * betacf(a, b, x) / a;
  }
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("paired_t_test: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) throw ContractError("paired_t_test: need at least 2 pairs");
  double mean_d = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_d += a[i] - b[i];
  mean_d /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = (a[i] - b[i]) - mean_d;
    ss += d * d;
  }
  const double var = ss / static_cast<double>(n - 1);
  if (var <= 0.0) throw ContractError("paired_t_test: zero-variance differences (degenerate sample)");
  TTestResult r;
  r.df = static_cast<int>(n - 1);
  r.t = mean_d / std::sqrt(var / static_cast<double>(n));
  const double df = static_cast<double>(r.df);
  r.p = incomplete_beta(df / 2.0, 0.5, df / (df + r.t * r.t));
  return r;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

MetricsReport evaluate(const std::vector<std::pair<std::string, Volume>>& predictions,
                       const std::vector<std::pair<std::string, Volume>>& ground_truth,
                       const MetricsReport* baseline, const SsimOptions& ssim_opts) {
  std::map<std::string, const Volume*> gt;
  for (const auto& [id, v] : ground_truth) gt[id] = &v;
  {
    std::string missing, extra;
    std::map<std::string, bool> seen;
    for (const auto& [id, v] : predictions) {
      seen[id] = true;
      if (!gt.count(id)) extra += (extra.empty() ? "" : ", ") + id;
    }
    for (const auto& [id, v] : ground_truth) {
      if (!seen.count(id)) missing += (missing.empty() ? "" : ", ") + id;
    }
    if (!missing.empty() || !extra.empty()) {
      throw PairingError("evaluate: patient sets differ; missing predictions: [" + missing +
                         "], unmatched predictions: [" + extra + "]");
    }
  }

  MetricsReport report;
  for (const auto& [id, pred] : predictions) {
    const Volume& truth = *gt.at(id);
    if (truth.extents != pred.extents) {
      throw DimensionError("evaluate: extents mismatch for patient " + id);
    }
    Volume gt01 = normalize_unit(truth);
    Volume pred01 = pred;
    for (float& v : pred01.voxels) v = std::clamp(v, 0.0f, 1.0f);
    PatientMetrics row;
    row.id = id;
    row.mse = mse(pred01, gt01);
    row.psnr_db = psnr(pred01, gt01, 1.0);
    row.ssim = ssim(pred01, gt01, ssim_opts);
    report.rows.push_back(row);
  }

  auto aggregate = [&](auto select) {
    MetricAggregate agg;
    const std::size_t n = report.rows.size();
    for (const auto& row : report.rows) agg.mean += select(row);
    agg.mean /= static_cast<double>(n);
    if (n > 1) {
      double ss = 0.0;
      for (const auto& row : report.rows) {
        const double d = select(row) - agg.mean;
        ss += d * d;
      }
      agg.sd = std::sqrt(ss / static_cast<double>(n - 1));
    }
    return agg;
  };
  report.mse_agg = aggregate([](const PatientMetrics& r) { return r.mse; });
  report.psnr_agg = aggregate([](const PatientMetrics& r) { return r.psnr_db; });
  report.ssim_agg = aggregate([](const PatientMetrics& r) { return r.ssim; });

  if (baseline != nullptr) {
    std::map<std::string, const PatientMetrics*> base_rows;
    for (const auto& row : baseline->rows) base_rows[row.id] = &row;
    std::vector<double> m_a, m_b, p_a, p_b, s_a, s_b;
    for (const auto& row : report.rows) {
      auto it = base_rows.find(row.id);
      if (it == base_rows.end()) {
        throw PairingError("evaluate: baseline report missing patient " + row.id);
      }
      m_a.push_back(row.mse);
      m_b.push_back(it->second->mse);
      p_a.push_back(row.psnr_db);
      p_b.push_back(it->second->psnr_db);
      s_a.push_back(row.ssim);
      s_b.push_back(it->second->ssim);
    }
    PairedComparison cmp;
    cmp.mse = paired_t_test(m_a, m_b);
    cmp.psnr = paired_t_test(p_a, p_b);
    cmp.ssim = paired_t_test(s_a, s_b);
    report.vs_baseline = cmp;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string report_csv(const MetricsReport& report) {
  std::ostringstream os;
  os.precision(6);
  os << "id,mse,psnr_db,ssim\n";
  for (const auto& row : report.rows) {
    os << row.id << ',' << row.mse << ',' << row.psnr_db << ',' << row.ssim << '\n';
  }
  os << "aggregate_mean," << report.mse_agg.mean << ',' << report.psnr_agg.mean << ','
     << report.ssim_agg.mean << '\n';
  os << "aggregate_sd," << report.mse_agg.sd << ',' << report.psnr_agg.sd << ','
     << report.ssim_agg.sd << '\n';
  if (report.vs_baseline) {
    const auto& c = *report.vs_baseline;
    os << "p_value_vs_baseline," << c.mse.p << ',' << c.psnr.p << ',' << c.ssim.p << '\n';
  }
  return os.str();
}

std::string report_text(const MetricsReport& report) {
  std::ostringstream os;
  os.precision(4);
  os << "patient            MSE[v]      PSNR[^]     SSIM[^]\n";
  for (const auto& row : report.rows) {
    os << row.id;
    for (std::size_t i = row.id.size(); i < 16; ++i) os << ' ';
    os << "  " << row.mse << "    " << row.psnr_db << "    " << row.ssim << '\n';
  }
  os << "mean +- sd        " << report.mse_agg.mean << " +- " << report.mse_agg.sd << "    "
     << report.psnr_agg.mean << " +- " << report.psnr_agg.sd << "    " << report.ssim_agg.mean
     << " +- " << report.ssim_agg.sd << '\n';
  if (report.vs_baseline) {
    const auto& c = *report.vs_baseline;
    os << "paired t vs baseline (alpha " << c.alpha << "):\n";
    auto line = [&](const char* name, const TTestResult& r) {
      os << "  " << name << ": t=" << r.t << " df=" << r.df << " p=" << r.p
         << (c.significant(r) ? "  (significant)" : "") << '\n';
    };
    line("mse", c.mse);
    line("psnr", c.psnr);
    line("ssim", c.ssim);
  }
  return os.str();
}

}  // namespace mprvit
