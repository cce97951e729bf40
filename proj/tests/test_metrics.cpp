// Evaluation metrics against independent oracles: double-loop MSE, a
// direct-formula windowed SSIM reference, and numeric integration of the
// Student-t density for p-values.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mprvit/data.hpp"
#include "mprvit/metrics.hpp"
#include "mprvit/rng.hpp"

using namespace mprvit;

namespace {

Volume random_volume(std::array<std::size_t, 3> extents, std::uint64_t seed, float lo = 0.0f,
                     float hi = 1.0f) {
  Rng rng(seed);
  Volume v = make_volume(extents, Modality::adc);
  for (float& x : v.voxels) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

// Independently coded direct-formula SSIM over valid 11x11 windows of one
// slice, Gaussian sigma 1.5, paper-literal constants.
double ref_ssim_slice(const Volume& a, const Volume& b, std::size_t z) {
  const int win = 11;
  const double sigma = 1.5;
  const std::size_t w = a.extents[0], h = a.extents[1];
  std::vector<double> g(win * win);
  double gsum = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double di = i - 5.0, dj = j - 5.0;
      g[static_cast<std::size_t>(i) * win + j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
      gsum += g[static_cast<std::size_t>(i) * win + j];
    }
  for (double& x : g) x /= gsum;
  const double c1 = 0.01, c2 = 0.02;  // L = 1
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t oy = 0; oy + win <= h; ++oy) {
    for (std::size_t ox = 0; ox + win <= w; ++ox) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double k = g[static_cast<std::size_t>(i) * win + j];
          const double xv = a.at(ox + j, oy + i, z);
          const double yv = b.at(ox + j, oy + i, z);
          mx += k * xv;
          my += k * yv;
          sxx += k * xv * xv;
          syy += k * yv * yv;
          sxy += k * xv * yv;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// Student-t two-sided p by adaptive Simpson quadrature of the density.
double t_density(double x, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) /
                   std::sqrt(df * 3.14159265358979323846);
  return c * std::pow(1 + x * x / df, -(df + 1) / 2);
}

double simpson(double a, double b, double df, int n) {
  double s = t_density(a, df) + t_density(b, df);
  const double h = (b - a) / n;
  for (int i = 1; i < n; ++i) s += t_density(a + i * h, df) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

double ref_two_sided_p(double t, double df) {
  // integrate the tail [|t|, |t| + 60] (the remainder is negligible for df >= 2)
  const double tail = simpson(std::abs(t), std::abs(t) + 60.0, df, 20000);
  return 2.0 * tail;
}

}  // namespace

// ---------------------------------------------------------------------------
// mse / psnr
// ---------------------------------------------------------------------------

TEST_CASE("mse fixtures") {
  Volume a = random_volume({8, 8, 3}, 1);
  CHECK(mse(a, a) == 0.0);

  Volume zeros = make_volume({8, 8, 3}, Modality::adc, 0.0f);
  Volume tenth = make_volume({8, 8, 3}, Modality::adc, 0.1f);
  CHECK(mse(zeros, tenth) == doctest::Approx(0.01).epsilon(1e-9));

  // double-loop reference on a random pair
  Volume b = random_volume({8, 8, 3}, 2);
  double ref = 0.0;
  for (std::size_t i = 0; i < a.voxels.size(); ++i) {
    const double d = static_cast<double>(a.voxels[i]) - b.voxels[i];
    ref += d * d;
  }
  ref /= static_cast<double>(a.voxels.size());
  CHECK(mse(a, b) == doctest::Approx(ref).epsilon(1e-9));

  Volume small = make_volume({4, 4, 2}, Modality::adc);
  CHECK_THROWS_AS(mse(a, small), DimensionError);

  // invariance under a common voxel permutation
  Rng rng(3);
  std::vector<std::size_t> perm(a.voxels.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  Volume ap = a, bp = b;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    ap.voxels[i] = a.voxels[perm[i]];
    bp.voxels[i] = b.voxels[perm[i]];
  }
  CHECK(mse(ap, bp) == doctest::Approx(mse(a, b)).epsilon(1e-12));
}

TEST_CASE("psnr fixtures") {
  Volume x = make_volume({10, 10, 1}, Modality::adc, 0.0f);
  Volume y = x;
  // MSE 1e-3 at max 1 -> 30 dB
  const float delta = std::sqrt(1e-3f);
  for (float& v : y.voxels) v += delta;
  CHECK(psnr(x, y, 1.0) == doctest::Approx(30.0).epsilon(1e-4));

  // MSE = max^2 -> 0 dB
  Volume z = make_volume({10, 10, 1}, Modality::adc, 2.0f);
  CHECK(psnr(x, z, 2.0) == doctest::Approx(0.0));

  CHECK(std::isinf(psnr(x, x, 1.0)));  // identical volumes: +inf sentinel

  // strictly decreasing in mse
  Volume y2 = x;
  for (float& v : y2.voxels) v += 2 * delta;
  CHECK(psnr(x, y2, 1.0) < psnr(x, y, 1.0));

  CHECK_THROWS_AS(psnr(x, y, 0.0), ContractError);
}

// ---------------------------------------------------------------------------
// ssim
// ---------------------------------------------------------------------------

TEST_CASE("ssim fixtures") {
  Volume a = random_volume({32, 32, 2}, 4);
  CHECK(ssim(a, a) == 1.0);  // exact

  // constant vs constant: zero-variance analytic case with C1 = 0.01 L
  // (intensities evaluated at their float-rounded values)
  Volume ca = make_volume({16, 16, 1}, Modality::adc, 0.4f);
  Volume cb = make_volume({16, 16, 1}, Modality::adc, 0.6f);
  const double c1 = 0.01;
  const double av = static_cast<double>(0.4f), bv = static_cast<double>(0.6f);
  const double expect = (2 * av * bv + c1) / (av * av + bv * bv + c1);
  CHECK(ssim(ca, cb) == doctest::Approx(expect).epsilon(1e-9));

  // independent direct-formula reference on random slices
  Volume b = random_volume({32, 32, 2}, 5);
  const double ref = (ref_ssim_slice(a, b, 0) + ref_ssim_slice(a, b, 1)) / 2.0;
  CHECK(ssim(a, b) == doctest::Approx(ref).epsilon(1e-6));

  // symmetry and boundedness
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-9));
  CHECK(ssim(a, b) <= 1.0);
  CHECK(ssim(a, b) >= -1.0);

  // standard-constants mode differs from the paper-literal mode
  SsimOptions std_opts;
  std_opts.constants = SsimConstants::standard;
  CHECK(ssim(a, b, std_opts) != doctest::Approx(ssim(a, b)).epsilon(1e-9));

  // window larger than the slice
  Volume tiny = make_volume({8, 8, 1}, Modality::adc, 0.1f);
  CHECK_THROWS_AS(ssim(tiny, tiny), DimensionError);
}

// ---------------------------------------------------------------------------
// paired t-test
// ---------------------------------------------------------------------------

TEST_CASE("paired_t_test fixture matches the quadrature oracle") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> b{0, 0, 0, 0, 0};
  const TTestResult r = paired_t_test(a, b);
  CHECK(r.t == doctest::Approx(4.2426).epsilon(1e-4));
  CHECK(r.df == 4);
  CHECK(r.p == doctest::Approx(0.0132).epsilon(0.05));
  // high-precision numeric-integration oracle
  const double p_ref = ref_two_sided_p(r.t, 4.0);
  CHECK(r.p == doctest::Approx(p_ref).epsilon(1e-6));
  CHECK(std::abs(r.p - 0.0132) < 1e-3);
}

TEST_CASE("paired_t_test properties") {
  const std::vector<double> a{1.2, 0.8, 1.5, 0.9, 1.1, 1.4};
  const std::vector<double> b{0.9, 0.7, 1.1, 1.0, 0.8, 1.2};
  const TTestResult r = paired_t_test(a, b);
  CHECK(r.p > 0.0);
  CHECK(r.p <= 1.0);

  // sign flip negates t, p unchanged
  const TTestResult rs = paired_t_test(b, a);
  CHECK(rs.t == doctest::Approx(-r.t).epsilon(1e-12));
  CHECK(rs.p == doctest::Approx(r.p).epsilon(1e-12));

  // adding a constant to both leaves (t, p) unchanged
  std::vector<double> a2 = a, b2 = b;
  for (double& v : a2) v += 5.0;
  for (double& v : b2) v += 5.0;
  const TTestResult rc = paired_t_test(a2, b2);
  CHECK(rc.t == doctest::Approx(r.t).epsilon(1e-9));
  CHECK(rc.p == doctest::Approx(r.p).epsilon(1e-9));

  // degenerate: identical differences
  const std::vector<double> same_a{1, 2, 3};
  const std::vector<double> same_b{0, 1, 2};
  CHECK_THROWS_AS(paired_t_test(same_a, same_b), ContractError);
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1.0}, std::vector<double>{2.0}), ContractError);

  // oracle agreement across a range of (t, df)
  for (auto [n, shift] : {std::pair<int, double>{4, 0.3}, {8, 0.1}, {20, 0.05}}) {
    Rng rng(static_cast<std::uint64_t>(n));
    std::vector<double> xs, ys;
    for (int i = 0; i < n; ++i) {
      const double base = rng.uniform(0.0, 1.0);
      xs.push_back(base + shift + rng.uniform(-0.05, 0.05));
      ys.push_back(base);
    }
    const TTestResult rr = paired_t_test(xs, ys);
    CHECK(rr.p == doctest::Approx(ref_two_sided_p(rr.t, rr.df)).epsilon(1e-5));
  }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

TEST_CASE("evaluate: identity predictions score perfectly") {
  std::vector<std::pair<std::string, Volume>> gts, preds;
  for (int i = 0; i < 3; ++i) {
    Volume gt = random_volume({16, 16, 3}, 40 + static_cast<std::uint64_t>(i));
    // the [0,1] frame of the ground truth is its own robust normalization
    preds.emplace_back("p" + std::to_string(i), normalize_unit(gt));
    gts.emplace_back("p" + std::to_string(i), std::move(gt));
  }
  const MetricsReport report = evaluate(preds, gts);
  REQUIRE(report.rows.size() == 3);
  for (const auto& row : report.rows) {
    CHECK(row.mse == 0.0);
    CHECK(std::isinf(row.psnr_db));
    CHECK(row.ssim == 1.0);
  }
}

TEST_CASE("evaluate: mse/psnr consistency near the published scale") {
  // a report with mean MSE ~ 9e-4 must show mean PSNR near 30.5 dB
  std::vector<std::pair<std::string, Volume>> gts, preds;
  Rng rng(50);
  for (int i = 0; i < 4; ++i) {
    Volume gt = random_volume({24, 24, 2}, 60 + static_cast<std::uint64_t>(i));
    Volume pred = normalize_unit(gt);
    for (float& v : pred.voxels) {
      v = std::clamp(v + static_cast<float>(rng.normal()) * 0.03f, 0.0f, 1.0f);
    }
    preds.emplace_back("p" + std::to_string(i), std::move(pred));
    gts.emplace_back("p" + std::to_string(i), std::move(gt));
  }
  const MetricsReport report = evaluate(preds, gts);
  const double implied = 10.0 * std::log10(1.0 / report.mse_agg.mean);
  CHECK(std::abs(report.psnr_agg.mean - implied) < 1.5);  // consistency, not equality
}

TEST_CASE("evaluate: pairing errors and baseline comparison") {
  std::vector<std::pair<std::string, Volume>> gts, preds;
  Volume gt0 = random_volume({16, 16, 2}, 70);
  Volume gt1 = random_volume({16, 16, 2}, 71);
  gts.emplace_back("a", gt0);
  gts.emplace_back("b", gt1);
  preds.emplace_back("a", normalize_unit(gt0));
  CHECK_THROWS_AS(evaluate(preds, gts), PairingError);
  try {
    evaluate(preds, gts);
  } catch (const PairingError& e) {
    CHECK(std::string(e.what()).find("b") != std::string::npos);  // offender listed
  }

  // baseline comparison attaches paired tests per metric
  preds.emplace_back("b", normalize_unit(gt1));
  std::vector<std::pair<std::string, Volume>> noisy;
  Rng rng(72);
  for (const auto& [id, gt] : gts) {
    Volume p = normalize_unit(gt);
    for (float& v : p.voxels) v = std::clamp(v + static_cast<float>(rng.normal()) * 0.2f, 0.0f, 1.0f);
    noisy.emplace_back(id, std::move(p));
  }
  const MetricsReport base = evaluate(noisy, gts);
  const MetricsReport vs = evaluate(preds, gts, &base);
  REQUIRE(vs.vs_baseline.has_value());
  CHECK(vs.vs_baseline->alpha == 0.05);
  CHECK(vs.vs_baseline->mse.df == 1);
  // serialization carries all columns
  const std::string csv = report_csv(vs);
  CHECK(csv.find("id,mse,psnr_db,ssim") == 0);
  CHECK(csv.find("p_value_vs_baseline") != std::string::npos);
  CHECK(report_text(vs).find("paired t vs baseline") != std::string::npos);
}
