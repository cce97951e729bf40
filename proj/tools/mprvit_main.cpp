// mprvit: phantom data generation, training, volume synthesis, evaluation
// and complexity accounting for the multiparametric residual ViT translator.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mprvit/checkpoint.hpp"
#include "mprvit/complexity.hpp"
#include "mprvit/data.hpp"
#include "mprvit/metrics.hpp"
#include "mprvit/model.hpp"
#include "mprvit/nifti.hpp"
#include "mprvit/pipeline.hpp"
#include "mprvit/runconfig.hpp"
#include "mprvit/train.hpp"

namespace fs = std::filesystem;
using namespace mprvit;

namespace {

// Exit codes: 0 ok, 1 internal, 2 config, 3 I/O or format, 4 pairing,
// 5 numeric fault.
enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kIo = 3, kPairing = 4, kNumeric = 5 };

std::array<std::size_t, 3> parse_size(const std::string& s) {
  std::array<std::size_t, 3> out{};
  std::stringstream ss(s);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) throw ConfigError("--size expects X,Y,Z");
    const long v = std::stol(item);
    if (v < 1) throw ConfigError("--size extents must be >= 1");
    out[static_cast<std::size_t>(i++)] = static_cast<std::size_t>(v);
  }
  if (i != 3) throw ConfigError("--size expects X,Y,Z");
  return out;
}

// Case directory layout: <dir>/{t1w,flair,adc,mask}.nii (adc/mask optional).
PatientCase load_case_dir(const fs::path& dir) {
  PatientCase c;
  c.id = dir.filename().string();
  auto read = [&](Modality m) {
    Volume v = nifti_read(dir / (std::string(modality_name(m)) + ".nii"));
    v.modality = m;
    return v;
  };
  c.t1w = read(Modality::t1w);
  c.flair = read(Modality::flair);
  if (fs::exists(dir / "adc.nii")) {
    c.adc = read(Modality::adc);
  } else {
    c.adc = make_volume(c.t1w.extents, Modality::adc);  // placeholder target
    c.adc.spacing = c.t1w.spacing;
  }
  if (fs::exists(dir / "mask.nii")) c.mask = read(Modality::mask);
  c.validate();
  return c;
}

std::vector<std::pair<std::string, Volume>> read_volume_dir(const fs::path& dir) {
  std::vector<std::pair<std::string, Volume>> out;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".nii") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.emplace_back(f.stem().string(), nifti_read(f));
  return out;
}

// Ground truth for one patient id: <gt>/<id>/adc.nii (dataset layout) or
// <gt>/<id>.nii (flat layout).
Volume read_gt_volume(const fs::path& gt_dir, const std::string& id) {
  const fs::path nested = gt_dir / id / "adc.nii";
  if (fs::exists(nested)) return nifti_read(nested);
  const fs::path flat = gt_dir / (id + ".nii");
  if (fs::exists(flat)) return nifti_read(flat);
  throw PairingError("eval: no ground truth for patient " + id + " under " + gt_dir.string());
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, int cases, std::uint64_t seed, const std::string& size) {
  const auto extents = parse_size(size);
  auto generated = phantom_generate(cases, extents, seed);
  std::vector<std::string> ids;
  for (const auto& c : generated) ids.push_back(c.id);
  const SplitManifest splits = make_splits(ids, {0.6, 0.15, 0.25}, seed);
  write_phantom_dataset(out_dir, generated, splits);
  std::ofstream cfg(fs::path(out_dir) / "gen.resolved.cfg", std::ios::trunc);
  cfg << "# resolved phantom generation parameters\n"
      << "cases = " << cases << "\nseed = " << seed << "\nsize = " << extents[0] << ','
      << extents[1] << ',' << extents[2] << "\nsplit_fractions = 0.6,0.15,0.25\n";
  std::cout << "wrote " << cases << " phantom cases to " << out_dir << "\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& modalities_flag,
              const std::vector<std::string>& overrides) {
  RunConfig cfg = RunConfig::load(config_path, overrides);
  if (!modalities_flag.empty()) {
    cfg.apply("modalities", modalities_flag, 0);
    cfg.model.in_channels = static_cast<int>(cfg.modalities.size());
    cfg.validate();
  }
  fs::create_directories(out_dir);
  cfg.archive(fs::path(out_dir) / "config.resolved.cfg");

  DatasetSlices data = load_dataset_slices(data_dir, cfg.modalities);
  if (data.train.empty() || data.val.empty()) {
    throw ConfigError("train: dataset has empty train or val split");
  }
  std::cout << "slices: train " << data.train.size() << ", val " << data.val.size() << ", test "
            << data.test.size() << "\n";

  Generator model(cfg.model, cfg.train.seed);
  OptimizerState state;
  FitOptions opts;
  opts.out_dir = out_dir;
  opts.modalities = cfg.modalities;
  const FitReport report = fit(model, data.train, data.val, state, cfg.train, opts);
  std::cout << "trained " << report.epochs_run << " epochs"
            << (report.stopped_early ? " (early stop)" : "") << "; best val L1 "
            << report.best_val_loss << " at epoch " << report.best_epoch << "\n"
            << "artifacts: " << out_dir << "/{best.ckpt,last.ckpt,loss_log.txt}\n";
  return kOk;
}

int cmd_synth(const std::string& ck_path, const std::string& case_dir, const std::string& out_file) {
  const Checkpoint ck = checkpoint_load(ck_path);
  Generator model(ck.config, 0);
  ck.load_into(model);
  model.params().set_requires_grad(false);

  PatientCase raw = load_case_dir(case_dir);
  if (static_cast<int>(ck.modalities.size()) != ck.config.in_channels) {
    throw ConfigError("synth: checkpoint modality list does not match its in_channels");
  }
  double mean_ms = 0.0;
  Volume pred = synthesize_case(model, raw, ck.modalities, &mean_ms);
  nifti_write(out_file, pred);
  std::cout << "synthesized " << out_file << "; mean inference time " << mean_ms
            << " ms per slice\n";
  return kOk;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& baseline_dir) {
  auto preds = read_volume_dir(pred_dir);
  if (preds.empty()) throw PairingError("eval: no .nii predictions in " + pred_dir);
  std::vector<std::pair<std::string, Volume>> gts;
  for (const auto& [id, v] : preds) gts.emplace_back(id, read_gt_volume(gt_dir, id));

  MetricsReport baseline_report;
  const MetricsReport* baseline_ptr = nullptr;
  if (!baseline_dir.empty()) {
    auto baselines = read_volume_dir(baseline_dir);
    // Identity-baseline semantics: raw modality volumes are mapped into
    // [0,1] by their own robust range before scoring.
    for (auto& [id, v] : baselines) v = normalize_unit(v);
    baseline_report = evaluate(baselines, gts);
    baseline_ptr = &baseline_report;
  }
  const MetricsReport report = evaluate(preds, gts, baseline_ptr);

  std::ofstream csv(fs::path(pred_dir) / "metrics.csv", std::ios::trunc);
  csv << report_csv(report);
  std::ofstream txt(fs::path(pred_dir) / "metrics.txt", std::ios::trunc);
  const std::string text = report_text(report);
  txt << text;
  std::cout << text;
  if (baseline_ptr) {
    std::ofstream bcsv(fs::path(pred_dir) / "baseline_metrics.csv", std::ios::trunc);
    bcsv << report_csv(baseline_report);
  }
  return kOk;
}

int cmd_count(const std::string& config_path, bool sweep, const std::vector<std::string>& overrides) {
  RunConfig cfg = RunConfig::load(config_path, overrides);
  if (sweep) {
    const auto rows = ablation_sweep(cfg.model);
    std::cout << ablation_text(rows) << "\n" << ablation_csv(rows);
  } else {
    const FlopBreakdown f = count_flops_breakdown(cfg.model, 32);
    std::cout << "params: " << count_params(cfg.model) << "\n"
              << "flops (batch 32, conv path): " << f.conv_path() << "\n"
              << "flops (batch 32, total incl. transformer): " << f.total() << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MPR-ViT multiparametric image translation toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
  std::string gen_out, gen_size = "64,64,10";
  int gen_cases = 12;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--cases", gen_cases, "Number of cases");
  gen->add_option("--seed", gen_seed, "Generation seed");
  gen->add_option("--size", gen_size, "Volume extents X,Y,Z");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the translation model");
  std::string train_config, train_data, train_out, train_modalities;
  std::vector<std::string> train_set;
  train_cmd->add_option("--config", train_config, "Run-config file")->required();
  train_cmd->add_option("--data", train_data, "Dataset directory (manifest.txt)")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--modalities", train_modalities, "t1w,flair | t1w | flair");
  train_cmd->add_option("--set", train_set, "key=value config overrides");

  // synth
  auto* synth = app.add_subcommand("synth", "Synthesize a prediction volume for one case");
  std::string synth_ck, synth_case, synth_out;
  synth->add_option("--checkpoint", synth_ck, "Checkpoint file")->required();
  synth->add_option("--case", synth_case, "Case directory")->required();
  synth->add_option("--out", synth_out, "Output .nii file")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
  std::string eval_pred, eval_gt, eval_baseline;
  eval_cmd->add_option("--pred", eval_pred, "Directory of prediction .nii files")->required();
  eval_cmd->add_option("--gt", eval_gt, "Ground-truth dataset directory")->required();
  eval_cmd->add_option("--baseline", eval_baseline, "Directory of baseline volumes");

  // count
  auto* count_cmd = app.add_subcommand("count", "Parameter and FLOP accounting");
  std::string count_config;
  bool count_sweep = false;
  std::vector<std::string> count_set;
  count_cmd->add_option("--config", count_config, "Run-config file")->required();
  count_cmd->add_flag("--sweep", count_sweep, "Emit the 5-row ablation table");
  count_cmd->add_option("--set", count_set, "key=value config overrides");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_cases, gen_seed, gen_size);
    if (train_cmd->parsed()) {
      return cmd_train(train_config, train_data, train_out, train_modalities, train_set);
    }
    if (synth->parsed()) return cmd_synth(synth_ck, synth_case, synth_out);
    if (eval_cmd->parsed()) return cmd_eval(eval_pred, eval_gt, eval_baseline);
    if (count_cmd->parsed()) return cmd_count(count_config, count_sweep, count_set);
    return kInternal;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const PairingError& e) {
    std::cerr << "pairing error: " << e.what() << "\n";
    return kPairing;
  } catch (const NumericFault& e) {
    std::cerr << "numeric fault: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
}
