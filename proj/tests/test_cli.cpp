// End-to-end checks of the mprvit binary: run-config parsing, exit codes,
// reproducible generation, and a miniature train/synth/eval round trip.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mprvit/runconfig.hpp"

using namespace mprvit;
namespace fs = std::filesystem;

namespace {

const char* cli = MPRVIT_CLI_PATH;
const std::string src_dir = MPRVIT_SOURCE_DIR;

fs::path temp_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("mprvit_cli_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(cli) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string run_capture(const std::string& args, int* exit_code = nullptr) {
  const fs::path out = fs::temp_directory_path() / "mprvit_cli_capture.txt";
  const std::string cmd = std::string(cli) + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (exit_code) *exit_code = WEXITSTATUS(status);
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

void write_small_config(const fs::path& p, int max_epochs) {
  std::ofstream out(p);
  out << "base_channels = 8\n"
         "token_dim = 32\n"
         "tx_layers = 1\n"
         "tx_heads = 2\n"
         "tx_mlp_dim = 64\n"
         "input_hw = 32,32\n"
         "batch_size = 8\n"
         "max_epochs = " << max_epochs << "\n"
         "patience = 5\n"
         "seed = 3\n";
}

}  // namespace

TEST_CASE("run-config parser") {
  const fs::path dir = temp_dir("cfg");
  {
    std::ofstream out(dir / "ok.cfg");
    out << "# comment line\n"
           "base_channels = 8   # trailing comment\n"
           "vit_positions = 3,7\n"
           "modalities = flair\n"
           "in_channels = 1\n"
           "lr = 1e-3\n";
  }
  RunConfig cfg = RunConfig::load(dir / "ok.cfg");
  CHECK(cfg.model.base_channels == 8);
  CHECK(cfg.model.vit_positions[0] == 3);
  CHECK(cfg.modalities.size() == 1);
  CHECK(cfg.train.lr == doctest::Approx(1e-3));

  // overrides win
  RunConfig cfg2 = RunConfig::load(dir / "ok.cfg", {"lr=5e-4", "batch_size=4"});
  CHECK(cfg2.train.lr == doctest::Approx(5e-4));
  CHECK(cfg2.train.batch_size == 4);

  // unknown keys are rejected with their line number
  {
    std::ofstream out(dir / "bad.cfg");
    out << "base_channels = 8\nnot_a_key = 3\n";
  }
  try {
    RunConfig::load(dir / "bad.cfg");
    CHECK(false);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  // serialized form round-trips through the parser
  {
    std::ofstream out(dir / "resolved.cfg");
    out << cfg.serialize();
  }
  RunConfig back = RunConfig::load(dir / "resolved.cfg");
  CHECK(back.model.base_channels == cfg.model.base_channels);
  CHECK(back.modalities == cfg.modalities);
  fs::remove_all(dir);
}

TEST_CASE("gen-data writes a reproducible dataset and validates extents") {
  const fs::path dir = temp_dir("gen");
  const std::string base =
      "gen-data --cases 5 --seed 7 --size 32,32,4 --out " + (dir / "d1").string();
  REQUIRE(run(base) == 0);
  CHECK(fs::exists(dir / "d1" / "manifest.txt"));
  CHECK(fs::exists(dir / "d1" / "case_000" / "t1w.nii"));
  CHECK(fs::exists(dir / "d1" / "gen.resolved.cfg"));
  // manifest has one line per case
  std::ifstream mf(dir / "d1" / "manifest.txt");
  int lines = 0;
  std::string line;
  while (std::getline(mf, line)) ++lines;
  CHECK(lines == 5);

  // rerun with identical arguments: bitwise-identical files
  REQUIRE(run("gen-data --cases 5 --seed 7 --size 32,32,4 --out " + (dir / "d2").string()) == 0);
  CHECK(file_bytes(dir / "d1" / "case_000" / "adc.nii") ==
        file_bytes(dir / "d2" / "case_000" / "adc.nii"));
  CHECK(file_bytes(dir / "d1" / "manifest.txt") == file_bytes(dir / "d2" / "manifest.txt"));

  // in-plane divisibility is enforced (config error exit code)
  CHECK(run("gen-data --cases 2 --seed 1 --size 63,64,4 --out " + (dir / "bad").string()) == 2);
  fs::remove_all(dir);
}

TEST_CASE("count prints accounting and the ablation sweep") {
  int code = 0;
  const std::string out = run_capture("count --config " + src_dir + "/configs/full.cfg", &code);
  CHECK(code == 0);
  CHECK(out.find("params:") != std::string::npos);
  CHECK(out.find("flops (batch 32, conv path):") != std::string::npos);

  const std::string sweep = run_capture("count --config " + src_dir + "/configs/full.cfg --sweep", &code);
  CHECK(code == 0);
  CHECK(sweep.find("VCT") != std::string::npos);
  CHECK(sweep.find("VCT + 2 RB (MPR-ViT)") != std::string::npos);
  CHECK(sweep.find("label,rb_per_combined,params,flops_batch32") != std::string::npos);

  // missing config file is an I/O error
  CHECK(run("count --config /nonexistent.cfg") == 3);
}

TEST_CASE("train, synth and eval round trip on a miniature dataset") {
  const fs::path dir = temp_dir("e2e");
  REQUIRE(run("gen-data --cases 5 --seed 11 --size 32,32,4 --out " + (dir / "data").string()) == 0);
  write_small_config(dir / "run.cfg", 2);

  int code = 0;
  const std::string train_out = run_capture(
      "train --config " + (dir / "run.cfg").string() + " --data " + (dir / "data").string() +
          " --out " + (dir / "run").string(),
      &code);
  REQUIRE(code == 0);
  CHECK(fs::exists(dir / "run" / "best.ckpt"));
  CHECK(fs::exists(dir / "run" / "loss_log.txt"));
  CHECK(fs::exists(dir / "run" / "config.resolved.cfg"));
  // loss log: one epoch per line
  std::ifstream log(dir / "run" / "loss_log.txt");
  int lines = 0;
  std::string line;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 2);

  // the resolved config is itself a loadable config
  CHECK_NOTHROW(RunConfig::load(dir / "run" / "config.resolved.cfg"));

  // unimodal arm builds an in_channels=1 model
  const std::string mono = run_capture(
      "train --config " + (dir / "run.cfg").string() + " --data " + (dir / "data").string() +
          " --out " + (dir / "run_mono").string() + " --modalities t1w",
      &code);
  REQUIRE(code == 0);
  {
    std::ifstream rc(dir / "run_mono" / "config.resolved.cfg");
    std::stringstream ss;
    ss << rc.rdbuf();
    CHECK(ss.str().find("in_channels = 1") != std::string::npos);
    CHECK(ss.str().find("modalities = t1w\n") != std::string::npos);
  }

  // synth a test case twice: bitwise identical prediction volumes
  REQUIRE(run("synth --checkpoint " + (dir / "run" / "best.ckpt").string() + " --case " +
              (dir / "data" / "case_000").string() + " --out " + (dir / "pred" / "case_000.nii").string()) == 3);
  fs::create_directories(dir / "pred");
  REQUIRE(run("synth --checkpoint " + (dir / "run" / "best.ckpt").string() + " --case " +
              (dir / "data" / "case_000").string() + " --out " +
              (dir / "pred" / "case_000.nii").string()) == 0);
  REQUIRE(run("synth --checkpoint " + (dir / "run" / "best.ckpt").string() + " --case " +
              (dir / "data" / "case_000").string() + " --out " +
              (dir / "pred" / "again.nii").string()) == 0);
  const std::string pa = file_bytes(dir / "pred" / "case_000.nii");
  std::string pb = file_bytes(dir / "pred" / "again.nii");
  CHECK(pa == pb);
  fs::remove(dir / "pred" / "again.nii");

  // eval pairs predictions with the dataset adc volumes
  const std::string eval_out = run_capture(
      "eval --pred " + (dir / "pred").string() + " --gt " + (dir / "data").string(), &code);
  CHECK(code == 0);
  CHECK(fs::exists(dir / "pred" / "metrics.csv"));
  CHECK(eval_out.find("mean +- sd") != std::string::npos);

  // pairing failure: prediction without ground truth
  fs::create_directories(dir / "pred_bad");
  fs::copy_file(dir / "pred" / "case_000.nii", dir / "pred_bad" / "nosuchcase.nii");
  CHECK(run("eval --pred " + (dir / "pred_bad").string() + " --gt " + (dir / "data").string()) == 4);

  // baseline flag produces p-values
  fs::create_directories(dir / "baseline");
  fs::copy_file(dir / "data" / "case_000" / "t1w.nii", dir / "baseline" / "case_000.nii");
  const std::string eval_base = run_capture(
      "eval --pred " + (dir / "pred").string() + " --gt " + (dir / "data").string() +
          " --baseline " + (dir / "baseline").string(),
      &code);
  // a single patient cannot carry a paired test; expect a clean failure
  CHECK(code == 1);

  fs::remove_all(dir);
}
