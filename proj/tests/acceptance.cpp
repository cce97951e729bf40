// Acceptance suite: one pass/fail line per criterion.
//
//   1  attention oracle equivalence        5  end-to-end desk training
//   2  gradient suite                      6  metric fixtures
//   3  architecture audit                  7  determinism and persistence
//   4  complexity reproduction             8  data integrity
//
// Run all criteria with no arguments, or one with --criterion N.
// Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mprvit/attention.hpp"
#include "mprvit/checkpoint.hpp"
#include "mprvit/complexity.hpp"
#include "mprvit/data.hpp"
#include "mprvit/gradcheck.hpp"
#include "mprvit/metrics.hpp"
#include "mprvit/model.hpp"
#include "mprvit/nifti.hpp"
#include "mprvit/pipeline.hpp"
#include "mprvit/train.hpp"

using namespace mprvit;
namespace fs = std::filesystem;

namespace {

struct Checker {
  bool ok = true;
  std::ostringstream detail;
  // Records one named sub-check; keeps the first failures in the detail line.
  void expect(bool condition, const std::string& what) {
    if (!condition) {
      ok = false;
      detail << (detail.tellp() > 0 ? "; " : "") << "FAILED: " << what;
    }
  }
  template <class T>
  void expect_le(T value, T bound, const std::string& what) {
    std::ostringstream os;
    os << what << " (" << value << " <= " << bound << ")";
    expect(value <= bound, os.str());
  }
};

fs::path work_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("mprvit_acceptance_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

// ---------------------------------------------------------------------------
// 1. Attention oracle equivalence
// ---------------------------------------------------------------------------

bool criterion_1(std::string& detail) {
  Checker c;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(20240917);
  float worst = 0.0f;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t t = 1 + rng.below(256);
    const std::size_t d = 1 + rng.below(64);
    auto q = Tensor::uniform({t, d}, -1.0f, 1.0f, rng);
    auto k = Tensor::uniform({t, d}, -1.0f, 1.0f, rng);
    auto v = Tensor::uniform({t, d}, -1.0f, 1.0f, rng);
    auto ref = naive_attention(q, k, v);
    for (int tile : {1, 7, 16, 64}) {
      AttentionConfig cfg;
      cfg.tile_q = tile;
      cfg.tile_k = tile;
      auto got = flash_attention(q, k, v, cfg);
      for (std::size_t i = 0; i < ref.numel(); ++i) {
        worst = std::max(worst, std::abs(got.data()[i] - ref.data()[i]));
      }
    }
  }
  c.expect_le(worst, 1e-5f, "max |flash - naive| over 200 sizes x 4 tilings");
  c.expect_le(seconds_since(t0), 60.0, "runtime seconds");
  detail = c.detail.str().empty() ? "200 random sizes, tiles {1,7,16,64}" : c.detail.str();
  return c.ok;
}

// ---------------------------------------------------------------------------
// 2. Gradient suite
// ---------------------------------------------------------------------------

bool criterion_2(std::string& detail) {
  Checker c;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(77001);
  auto weighted_sum = [](const TensorD& t) {
    Rng local(4242);
    auto w = TensorD::uniform(t.shape(), 0.5, 1.5, local);
    return sum(mul(t, w));
  };

  // every differentiable op on three random small shapes
  auto wt = TensorD::uniform({2, 3, 3, 3}, -0.5, 0.5, rng);
  auto wtt = TensorD::uniform({3, 2, 3, 3}, -0.5, 0.5, rng);
  auto cb = TensorD::uniform({2}, -0.2, 0.2, rng);
  auto cb3 = TensorD::uniform({3}, -0.2, 0.2, rng);
  auto g3 = TensorD::uniform({3}, 0.6, 1.4, rng);
  auto b3 = TensorD::uniform({3}, -0.2, 0.2, rng);
  auto g5 = TensorD::uniform({5}, 0.6, 1.4, rng);
  auto b5 = TensorD::uniform({5}, -0.2, 0.2, rng);
  auto mm = TensorD::uniform({5, 4}, -1.0, 1.0, rng);
  MhaWeightsT<double> mha;
  mha.wq = TensorD::uniform({8, 8}, -0.4, 0.4, rng);
  mha.wk = TensorD::uniform({8, 8}, -0.4, 0.4, rng);
  mha.wv = TensorD::uniform({8, 8}, -0.4, 0.4, rng);
  mha.wo = TensorD::uniform({8, 8}, -0.4, 0.4, rng);
  mha.bq = TensorD::uniform({8}, -0.1, 0.1, rng);
  mha.bk = TensorD::uniform({8}, -0.1, 0.1, rng);
  mha.bv = TensorD::uniform({8}, -0.1, 0.1, rng);
  mha.bo = TensorD::uniform({8}, -0.1, 0.1, rng);
  const AttentionConfig mha_cfg{2, 4, 3, 2};

  struct OpCheck {
    const char* name;
    Shape shape;
    std::function<TensorD(const TensorD&)> f;
  };
  const std::vector<OpCheck> ops = {
      {"add_mul", {4, 5}, [&](const TensorD& t) { return weighted_sum(add(t, mul(t, t))); }},
      {"scale_sub", {3, 7}, [&](const TensorD& t) { return weighted_sum(sub(scale(t, 1.7), tanh_act(t))); }},
      {"gelu", {5, 5}, [&](const TensorD& t) { return weighted_sum(gelu(t)); }},
      {"matmul", {3, 5}, [&](const TensorD& t) { return weighted_sum(matmul(t, mm)); }},
      {"transpose", {4, 6}, [&](const TensorD& t) { return weighted_sum(transpose2d(t)); }},
      {"row_bias", {4, 3}, [&](const TensorD& t) { return weighted_sum(add_row_bias(t, cb3)); }},
      {"reshape_slice",
       {4, 6},
       [&](const TensorD& t) { return weighted_sum(slice(reshape(t, {6, 4}), 0, 1, 4)); }},
      {"concat",
       {2, 3},
       [&](const TensorD& t) { return weighted_sum(concat(std::vector<TensorD>{t, scale(t, 2.0)}, 1)); }},
      {"tokens",
       {2, 3, 4, 4},
       [&](const TensorD& t) { return weighted_sum(tokens_to_nchw(nchw_to_tokens(t), 4, 4)); }},
      {"softmax", {4, 5}, [&](const TensorD& t) { return weighted_sum(softmax(t, 1)); }},
      {"mean_sum", {3, 5}, [&](const TensorD& t) { return add(mean(mul(t, t)), sum(tanh_act(t))); }},
      {"conv2d", {1, 3, 6, 6}, [&](const TensorD& t) { return weighted_sum(conv2d(t, wt, cb, 1, 1)); }},
      {"conv2d_s2", {1, 3, 7, 7}, [&](const TensorD& t) { return weighted_sum(conv2d(t, wt, cb, 2, 1)); }},
      {"conv_transpose2d",
       {1, 3, 4, 4},
       [&](const TensorD& t) { return weighted_sum(conv_transpose2d(t, wtt, cb, 2, 1, 1)); }},
      {"instance_norm",
       {2, 3, 5, 5},
       [&](const TensorD& t) { return weighted_sum(instance_norm(t, g3, b3, 1e-5)); }},
      {"layer_norm", {4, 5}, [&](const TensorD& t) { return weighted_sum(layer_norm(t, g5, b5, 1e-5)); }},
      {"bilinear", {1, 2, 6, 6}, [&](const TensorD& t) { return weighted_sum(bilinear_resize(t, 9, 4)); }},
      {"naive_attention",
       {6, 4},
       [&](const TensorD& t) { return weighted_sum(naive_attention(t, scale(t, 0.8), tanh_act(t))); }},
      {"flash_attention",
       {6, 4},
       [&](const TensorD& t) {
         return weighted_sum(flash_attention(t, scale(t, 0.8), tanh_act(t), AttentionConfig{1, 4, 2, 3}));
       }},
      {"multi_head_attention",
       {4, 8},
       [&](const TensorD& t) { return weighted_sum(multi_head_attention(t, mha, mha_cfg)); }},
  };
  for (const auto& op : ops) {
    double worst = 0.0;
    for (int rep = 0; rep < 3; ++rep) {
      auto x = TensorD::uniform(op.shape, -1.0, 1.0, rng);
      worst = std::max(worst, grad_check<double>(op.f, x, 1e-5));
    }
    c.expect_le(worst, 1e-3, std::string("op gradient: ") + op.name);
  }

  // tiny full model: every parameter tensor, sampled coordinates. The check
  // runs at a generic parameter point: zero-initialized biases otherwise sit
  // exactly on relu kinks (a 1x1 token grid normalizes its plane to the
  // beta value), where one-sided subgradients and central differences
  // legitimately disagree.
  ModelConfig tiny;
  tiny.base_channels = 4;
  tiny.token_dim = 16;
  tiny.tx_layers = 1;
  tiny.tx_heads = 2;
  tiny.tx_mlp_dim = 32;
  tiny.input_hw = {16, 16};
  GeneratorT<double> model(tiny, 41);
  for (auto& [name, p] : model.params()) {
    for (auto& v : p.data()) v += rng.uniform(-0.05, 0.05);
  }
  auto x = TensorD::uniform({1, 2, 16, 16}, -0.9, 0.9, rng);
  auto proj = TensorD::uniform({1, 1, 16, 16}, 0.5, 1.5, rng);
  std::function<TensorD(const TensorD&)> f = [&](const TensorD& t) {
    return sum(mul(model.forward(t), proj));
  };
  c.expect_le(grad_check<double>(f, x, 1e-5, 64, 1e-6), 1e-2, "full model d/dx");
  double worst_param = 0.0;
  std::string worst_name;
  for (auto& [name, p] : model.params()) {
    std::function<TensorD(const TensorD&)> fp = [&](const TensorD&) {
      return sum(mul(model.forward(x), proj));
    };
    const double err = grad_check<double>(fp, p, 1e-5, 6, 1e-6);
    if (err > worst_param) {
      worst_param = err;
      worst_name = name;
    }
  }
  c.expect_le(worst_param, 1e-2, "full model d/dtheta (worst: " + worst_name + ")");
  c.expect_le(seconds_since(t0), 300.0, "runtime seconds");
  std::ostringstream sum_line;
  sum_line << ops.size() << " ops x 3 shapes + " << model.params().size()
           << " parameter tensors of the tiny model";
  detail = c.detail.str().empty() ? sum_line.str() : c.detail.str();
  return c.ok;
}

// ---------------------------------------------------------------------------
// 3. Architecture audit
// ---------------------------------------------------------------------------

bool criterion_3(std::string& detail) {
  Checker c;
  const auto cfg = ModelConfig::full_paper();
  const ArchitectureAudit analytic = audit_architecture(cfg);
  c.expect(analytic.residual_blocks == 27, "27 residual blocks (analytic)");
  c.expect(analytic.vit_blocks == 2, "2 ViT blocks (analytic)");

  const ShapeTrace t = trace_shapes(cfg);
  c.expect(t.input_h == 120 && t.input_w == 120, "input 120x120");
  c.expect(t.latent_h == 30 && t.latent_w == 30, "latent 30x30");
  c.expect(t.token_grid_h == 8 && t.token_grid_w == 8 && t.tokens == 64, "token grid 8x8");
  c.expect(t.upsampled_h == 32 && t.upsampled_w == 32, "upsampled 32x32");
  c.expect(t.resized_h == 30 && t.resized_w == 30, "resized back 30x30");
  c.expect(t.output_h == 120 && t.output_w == 120, "output 120x120");

  // instantiate the default full configuration and recount
  Generator model(cfg, 1);
  c.expect(model.audit().residual_blocks == 27, "27 residual blocks (instantiated)");
  c.expect(model.audit().vit_blocks == 2, "2 ViT blocks (instantiated)");
  c.expect(model.params().unique_param_count() == count_params(cfg),
           "materialized parameters match the analytic count");
  detail = c.detail.str().empty()
               ? "27 RB + 2 ViT; 120->30->8x8 tokens->32->30->120"
               : c.detail.str();
  return c.ok;
}

// ---------------------------------------------------------------------------
// 4. Complexity reproduction
// ---------------------------------------------------------------------------

bool criterion_4(std::string& detail) {
  Checker c;
  const auto rows = ablation_sweep(ModelConfig::full_paper());
  c.expect(rows.size() == 5, "five ablation rows");
  const double p_mpr = static_cast<double>(rows[2].params);
  c.expect(std::abs(p_mpr - 119e6) / 119e6 <= 0.15, "params within 15% of 119M");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const std::int64_t inc = rows[i].params - rows[i - 1].params;
    c.expect(inc >= 1'500'000 && inc <= 2'100'000,
             "param increment in [1.5M, 2.1M] (row " + std::to_string(i) + ")");
    c.expect(rows[i].params > rows[i - 1].params, "params strictly monotone");
    c.expect(rows[i].flops_batch32 > rows[i - 1].flops_batch32, "flops strictly monotone");
    const double finc = static_cast<double>(rows[i].flops_batch32 - rows[i - 1].flops_batch32);
    c.expect(finc >= 191e9 * 0.75 && finc <= 209e9 * 1.25,
             "flops increment within 25% of 191-209G (row " + std::to_string(i) + ")");
  }
  const double f_mpr = static_cast<double>(rows[2].flops_batch32);
  c.expect(std::abs(f_mpr - 1277e9) / 1277e9 <= 0.25, "batch-32 flops within 25% of 1277G");
  std::ostringstream sum_line;
  sum_line.setf(std::ios::fixed);
  sum_line.precision(1);
  sum_line << "params " << p_mpr / 1e6 << "M, flops " << f_mpr / 1e9 << "G at batch 32";
  detail = c.detail.str().empty() ? sum_line.str() : c.detail.str();
  return c.ok;
}

// ---------------------------------------------------------------------------
// 5. End-to-end desk training
// ---------------------------------------------------------------------------

bool criterion_5(std::string& detail) {
  Checker c;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = work_dir("train");

  // 12 phantom cases at the desk profile, fixed seed; five test patients
  // give the paired tests df = 4
  const std::uint64_t seed = 7;
  auto cases = phantom_generate(12, {64, 64, 10}, seed);
  std::vector<std::string> ids;
  for (const auto& pc : cases) ids.push_back(pc.id);
  const SplitManifest splits = make_splits(ids, {0.4167, 0.1667, 0.4166}, seed);
  write_phantom_dataset(dir / "data", cases, splits);

  const auto mcfg = ModelConfig::desk();
  TrainConfig tcfg;
  tcfg.seed = seed;
  // Desk-scale run: the published rate (2e-4, batch 32) is tuned for ~2e5
  // steps on 29k slices; this run has O(100) steps, so it uses a larger
  // step size (archived with the run artifacts like any other config).
  tcfg.lr = 1e-3f;
  tcfg.batch_size = 16;
  tcfg.max_epochs = 60;
  const std::vector<Modality> modalities{Modality::t1w, Modality::flair};
  DatasetSlices data = load_dataset_slices(dir / "data", modalities);
  c.expect(!data.train.empty() && !data.val.empty() && data.test_ids.size() == 5,
           "splits populated (5 test cases)");

  Generator model(mcfg, seed);
  OptimizerState state;
  FitOptions opts;
  opts.out_dir = dir / "run";
  opts.modalities = modalities;
  const FitReport report = fit(model, data.train, data.val, state, tcfg, opts);
  c.expect(report.best_val_loss < 0.05,
           "validation L1 < 0.05 (got " + std::to_string(report.best_val_loss) + ")");

  // score the test split with the best checkpoint
  const Checkpoint best = checkpoint_load(dir / "run" / "best.ckpt");
  Generator best_model(best.config, 0);
  best.load_into(best_model);
  best_model.params().set_requires_grad(false);

  std::vector<std::pair<std::string, Volume>> preds, gts, baselines;
  for (const auto& pc : cases) {
    if (splits.split_of(pc.id) != "test") continue;
    preds.emplace_back(pc.id, synthesize_case(best_model, pc, modalities));
    gts.emplace_back(pc.id, pc.adc);
    baselines.emplace_back(pc.id, normalize_unit(pc.t1w));  // identity baseline
  }
  const MetricsReport baseline_report = evaluate(baselines, gts);
  const MetricsReport model_report = evaluate(preds, gts, &baseline_report);
  c.expect(model_report.ssim_agg.mean > 0.90,
           "test SSIM > 0.90 (got " + std::to_string(model_report.ssim_agg.mean) + ")");

  // identity baseline strictly worse on all three metrics, paired p < 0.05
  c.expect(baseline_report.mse_agg.mean > model_report.mse_agg.mean, "baseline MSE worse");
  c.expect(baseline_report.psnr_agg.mean < model_report.psnr_agg.mean, "baseline PSNR worse");
  c.expect(baseline_report.ssim_agg.mean < model_report.ssim_agg.mean, "baseline SSIM worse");
  const auto& cmp = *model_report.vs_baseline;
  c.expect(cmp.mse.p < 0.05, "paired t (mse) p < 0.05, got " + std::to_string(cmp.mse.p));
  c.expect(cmp.psnr.p < 0.05, "paired t (psnr) p < 0.05, got " + std::to_string(cmp.psnr.p));
  c.expect(cmp.ssim.p < 0.05, "paired t (ssim) p < 0.05, got " + std::to_string(cmp.ssim.p));

  const double wall = seconds_since(t0);
  c.expect_le(wall, 1800.0, "runtime seconds (30 min budget)");
  std::ostringstream sum_line;
  sum_line.setf(std::ios::fixed);
  sum_line.precision(3);
  sum_line << "val L1 " << report.best_val_loss << ", test SSIM " << model_report.ssim_agg.mean
           << " vs baseline " << baseline_report.ssim_agg.mean << ", " << report.epochs_run
           << " epochs in " << static_cast<int>(wall) << "s";
  detail = c.detail.str().empty() ? sum_line.str() : c.detail.str();
  fs::remove_all(dir);
  return c.ok;
}

// ---------------------------------------------------------------------------
// 6. Metric fixtures
// ---------------------------------------------------------------------------

bool criterion_6(std::string& detail) {
  Checker c;
  Rng rng(606);

  // ssim(x, x) = 1 exactly
  Volume x = make_volume({32, 32, 2}, Modality::adc);
  for (float& v : x.voxels) v = static_cast<float>(rng.uniform(0.0, 1.0));
  c.expect(ssim(x, x) == 1.0, "ssim(x,x) == 1 exactly");

  // psnr at MSE 1e-3, max 1 -> 30.000 dB within 1e-6
  Volume a = make_volume({10, 10, 1}, Modality::adc, 0.0f);
  Volume b = a;
  const float delta = std::sqrt(1e-3f);
  for (float& v : b.voxels) v += delta;
  c.expect(std::abs(psnr(a, b, 1.0) - 10.0 * std::log10(1.0 / mse(a, b))) < 1e-12,
           "psnr consistent with mse");
  c.expect(std::abs(psnr(a, b, 1.0) - 30.0) < 1e-6, "psnr(MSE 1e-3, max 1) = 30.000 +- 1e-6 dB");

  // paired t fixture with the quadrature oracle
  const std::vector<double> ta{1, 2, 3, 4, 5};
  const std::vector<double> tb{0, 0, 0, 0, 0};
  const TTestResult r = paired_t_test(ta, tb);
  c.expect(std::abs(r.t - 4.2426) < 1e-3, "t = 4.2426");
  c.expect(r.df == 4, "df = 4");
  c.expect(std::abs(r.p - 0.0132) < 1e-3, "p = 0.0132 +- 1e-3");
  {
    // high-precision numeric integration of the t density over the tail
    const double df = 4.0;
    auto density = [df](double u) {
      return std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) /
             std::sqrt(df * 3.14159265358979323846) * std::pow(1 + u * u / df, -(df + 1) / 2);
    };
    const double lo = r.t, hi = r.t + 80.0;
    const int n = 40000;
    double s = density(lo) + density(hi);
    const double h = (hi - lo) / n;
    for (int i = 1; i < n; ++i) s += density(lo + i * h) * (i % 2 ? 4.0 : 2.0);
    const double p_ref = 2.0 * s * h / 3.0;
    c.expect(std::abs(r.p - p_ref) < 1e-6, "p matches numeric integration");
  }

  // SSIM against an independent direct-formula reference on random slices
  Volume y = make_volume({32, 32, 2}, Modality::adc);
  for (float& v : y.voxels) v = static_cast<float>(rng.uniform(0.0, 1.0));
  {
    const int win = 11;
    const double sigma = 1.5, c1 = 0.01, c2 = 0.02;
    std::vector<double> g(win * win);
    double gsum = 0.0;
    for (int i = 0; i < win; ++i)
      for (int j = 0; j < win; ++j) {
        const double di = i - 5.0, dj = j - 5.0;
        g[static_cast<std::size_t>(i) * win + j] =
            std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
        gsum += g[static_cast<std::size_t>(i) * win + j];
      }
    for (double& v : g) v /= gsum;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t z = 0; z < 2; ++z)
      for (std::size_t oy = 0; oy + win <= 32; ++oy)
        for (std::size_t ox = 0; ox + win <= 32; ++ox) {
          double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
          for (int i = 0; i < win; ++i)
            for (int j = 0; j < win; ++j) {
              const double k = g[static_cast<std::size_t>(i) * win + j];
              const double xv = x.at(ox + j, oy + i, z), yv = y.at(ox + j, oy + i, z);
              mx += k * xv;
              my += k * yv;
              sxx += k * xv * xv;
              syy += k * yv * yv;
              sxy += k * xv * yv;
            }
          const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
          total +=
              ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
    const double ref = total / static_cast<double>(count);
    c.expect(std::abs(ssim(x, y) - ref) < 1e-6, "ssim matches the direct-formula reference");
  }
  detail = c.detail.str().empty() ? "ssim/psnr/t-test fixtures with quadrature oracle"
                                  : c.detail.str();
  return c.ok;
}

// ---------------------------------------------------------------------------
// 7. Determinism and persistence
// ---------------------------------------------------------------------------

bool criterion_7(std::string& detail) {
  Checker c;
  const fs::path dir = work_dir("determinism");

  // reduced-geometry desk variant keeps this criterion fast
  auto mcfg = ModelConfig::desk();
  mcfg.input_hw = {32, 32};
  auto cases = phantom_generate(4, {32, 32, 6}, 3);
  std::vector<std::string> ids;
  for (const auto& pc : cases) ids.push_back(pc.id);
  write_phantom_dataset(dir / "data", cases, make_splits(ids, {0.5, 0.25, 0.25}, 3));
  const std::vector<Modality> modalities{Modality::t1w, Modality::flair};
  DatasetSlices data = load_dataset_slices(dir / "data", modalities);

  TrainConfig tcfg;
  tcfg.seed = 5;
  tcfg.batch_size = 8;
  tcfg.max_epochs = 3;

  // identical seeds -> bitwise-identical checkpoints
  for (const char* run : {"a", "b"}) {
    Generator model(mcfg, 11);
    OptimizerState state;
    FitOptions opts;
    opts.out_dir = dir / run;
    opts.modalities = modalities;
    fit(model, data.train, data.val, state, tcfg, opts);
  }
  c.expect(read_bytes(dir / "a" / "last.ckpt") == read_bytes(dir / "b" / "last.ckpt"),
           "identical seeds give bitwise-identical checkpoints");

  // checkpoint round trip restores every buffer bitwise
  const Checkpoint ck = checkpoint_load(dir / "a" / "last.ckpt");
  Generator reloaded(ck.config, 999);
  ck.load_into(reloaded);
  checkpoint_save(dir / "roundtrip.ckpt", reloaded.params(), ck.opt, ck.epoch, ck.val_loss,
                  ck.config, ck.modalities);
  c.expect(read_bytes(dir / "a" / "last.ckpt") == read_bytes(dir / "roundtrip.ckpt"),
           "checkpoint round trip bitwise");

  // NIfTI round trip bitwise
  nifti_write(dir / "vol.nii", cases[0].adc);
  const Volume vol = nifti_read(dir / "vol.nii");
  c.expect(std::memcmp(vol.voxels.data(), cases[0].adc.voxels.data(),
                       vol.voxels.size() * 4) == 0,
           "nifti round trip bitwise");

  // resume after interrupt matches the uninterrupted trajectory
  tcfg.max_epochs = 4;
  Generator full_model(mcfg, 11);
  OptimizerState full_state;
  FitOptions full_opts;
  full_opts.out_dir = dir / "full";
  full_opts.modalities = modalities;
  const FitReport full = fit(full_model, data.train, data.val, full_state, tcfg, full_opts);

  auto tcfg_half = tcfg;
  tcfg_half.max_epochs = 2;
  Generator half_model(mcfg, 11);
  OptimizerState half_state;
  FitOptions half_opts;
  half_opts.out_dir = dir / "half";
  half_opts.modalities = modalities;
  const FitReport half = fit(half_model, data.train, data.val, half_state, tcfg_half, half_opts);

  const Checkpoint mid = checkpoint_load(dir / "half" / "last.ckpt");
  Generator resumed(mid.config, 0);
  mid.load_into(resumed);
  OptimizerState resumed_state = mid.opt;
  FitState rs;
  rs.start_epoch = mid.epoch + 1;
  rs.val_history = half.val_losses;
  FitOptions res_opts;
  res_opts.out_dir = dir / "resumed";
  res_opts.modalities = modalities;
  const FitReport rest = fit(resumed, data.train, data.val, resumed_state, tcfg, res_opts, rs);
  bool same = rest.val_losses.size() == full.val_losses.size();
  for (std::size_t i = 0; same && i < full.val_losses.size(); ++i) {
    same = rest.val_losses[i] == full.val_losses[i];
  }
  c.expect(same, "resumed trajectory equals uninterrupted trajectory");

  detail = c.detail.str().empty() ? "checkpoints, nifti, resume all bitwise" : c.detail.str();
  fs::remove_all(dir);
  return c.ok;
}

// ---------------------------------------------------------------------------
// 8. Data integrity
// ---------------------------------------------------------------------------

bool criterion_8(std::string& detail) {
  Checker c;
  std::vector<std::string> ids;
  for (int i = 0; i < 501; ++i) ids.push_back("patient_" + std::to_string(i));
  const SplitManifest m = make_splits(ids, {400.0 / 501, 50.0 / 501, 51.0 / 501}, 2024);
  c.expect(m.train.size() == 400, "train split size 400");
  c.expect(m.val.size() == 50, "val split size 50");
  c.expect(m.test.size() == 51, "test split size 51");
  bool partition_ok = true;
  try {
    m.validate_partition(ids);
  } catch (const Error&) {
    partition_ok = false;
  }
  c.expect(partition_ok, "splits are an exhaustive disjoint partition");

  // patient-level assignment: every id appears in exactly one split
  std::size_t hits = 0;
  for (const auto& id : ids) {
    const std::string s = m.split_of(id);
    hits += (s == "train" || s == "val" || s == "test") ? 1 : 0;
  }
  c.expect(hits == ids.size(), "every patient assigned exactly once");
  detail = c.detail.str().empty() ? "501 -> 400/50/51, disjoint and exhaustive" : c.detail.str();
  return c.ok;
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    bool (*run)(std::string&);
  };
  const std::vector<Criterion> criteria = {
      {1, "attention oracle equivalence", criterion_1},
      {2, "gradient suite", criterion_2},
      {3, "architecture audit", criterion_3},
      {4, "complexity reproduction", criterion_4},
      {5, "end-to-end desk training", criterion_5},
      {6, "metric fixtures", criterion_6},
      {7, "determinism and persistence", criterion_7},
      {8, "data integrity", criterion_8},
  };

  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--criterion" && i + 1 < argc) only = std::atoi(argv[i + 1]);
  }

  int failures = 0;
  for (const auto& crit : criteria) {
    if (only != 0 && crit.id != only) continue;
    std::string detail;
    bool ok = false;
    try {
      ok = crit.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << crit.id << ": " << crit.name
              << " -- " << detail << "\n";
    if (!ok) ++failures;
  }
  return failures;
}
