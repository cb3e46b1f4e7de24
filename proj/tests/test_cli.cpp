#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "ctrecon/config.hpp"
#include "ctrecon/phantom.hpp"
#include "ctrecon/volume_io.hpp"
#include "doctest.h"

using namespace ctrecon;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string(CTRECON_CLI_PATH) + " " + args + " >>" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

// 16^3 smoke configuration: tiny corpus, one-level networks, one epoch each.
RunConfig smoke_config(const fs::path& dir) {
  RunConfig cfg;
  cfg.corpus.out_dir = (dir / "corpus").string();
  cfg.corpus.grid_n = 16;
  cfg.corpus.depth = 16;
  cfg.corpus.voxel_pitch_mm = 2.5;
  cfg.corpus.recon_train = 3;
  cfg.corpus.recon_test = 2;
  cfg.corpus.seg_train = 3;
  cfg.corpus.seg_test = 2;
  cfg.geometry.n_detector_bins = 16;
  cfg.manifest_path = cfg.corpus.out_dir + "/manifest.json";
  cfg.out_dir = (dir / "run").string();
  cfg.networks.gen_levels = 1;
  cfg.networks.gen_widths = {2, 3};
  cfg.networks.dis_widths = {4};
  cfg.networks.seg_widths = {2, 3, 4};
  cfg.networks.fx_widths = {2, 3, 4, 5};
  cfg.gan_epochs = 1;
  cfg.seg_epochs = 2;
  cfg.batch_size = 2;
  cfg.weights.lambda_s = 0.5;
  cfg.weights.lambda_p = 0.25;
  cfg.geometry.grid_n = cfg.corpus.grid_n;
  cfg.geometry.voxel_pitch_mm = cfg.corpus.voxel_pitch_mm;
  cfg.corpus.geometry = cfg.geometry;
  return cfg;
}

}  // namespace

TEST_CASE("full pipeline smoke: gen-data, pretrain-seg, train, evaluate") {
  const fs::path dir = fs::temp_directory_path() / "ctrecon_cli_pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = dir / "cli.log";
  RunConfig cfg = smoke_config(dir);
  const std::string config_path = (dir / "c.json").string();
  save_run_config(cfg, config_path);
  const std::string with_cfg = "--config " + config_path;

  CHECK(run_cli("gen-data " + with_cfg, log) == 0);
  CHECK(fs::exists(fs::path(cfg.corpus.out_dir) / "manifest.json"));
  CHECK(fs::exists(fs::path(cfg.corpus.out_dir) / "resolved_config.gen-data.json"));

  // a second run without --overwrite must refuse, with it must succeed
  CHECK(run_cli("gen-data " + with_cfg, log) == 1);
  CHECK(run_cli("gen-data " + with_cfg + " --overwrite", log) == 0);

  CHECK(run_cli("pretrain-seg " + with_cfg, log) == 0);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "seg_best.json"));
  CHECK(run_cli("pretrain-seg " + with_cfg, log) == 1);  // no silent overwrite

  CHECK(run_cli("train " + with_cfg, log) == 0);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "gan_latest.json"));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "gan_loss.csv"));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "resolved_config.train.json"));

  CHECK(run_cli("evaluate " + with_cfg + " --run-id smoke", log) == 0);
  const fs::path report = fs::path(cfg.out_dir) / "eval_smoke" / "report.csv";
  REQUIRE(fs::exists(report));
  CHECK(read_lines(report).size() == 1 + 2 + 1);  // header + test split + mean
  CHECK(run_cli("evaluate " + with_cfg + " --run-id smoke", log) == 1);

  // reconstruct one test pair from the corpus
  CorpusManifest manifest = load_manifest(cfg.manifest_path);
  const std::string pair_prefix =
      (fs::path(manifest.root_dir) / manifest.recon_test[0].path_prefix).string();
  CHECK(run_cli("reconstruct " + with_cfg + " --ap " + pair_prefix + ".ap --lat " + pair_prefix +
                    ".lat",
                log) == 0);
  const fs::path recon_dir = fs::path(cfg.out_dir) / "reconstruction";
  CHECK(fs::exists(recon_dir / "recon.vol.bin"));
  CHECK(fs::exists(recon_dir / "recon.mask.bin"));
  CHECK(fs::exists(recon_dir / "recon.pgm"));
  Volume vol = read_volume((recon_dir / "recon.vol").string());
  CHECK(vol.grid_n == 16);
  fs::remove_all(dir);
}

TEST_CASE("project emits both views and previews; matches corpus projections") {
  const fs::path dir = fs::temp_directory_path() / "ctrecon_cli_project";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = dir / "cli.log";
  RunConfig cfg = smoke_config(dir);
  const std::string config_path = (dir / "c.json").string();
  save_run_config(cfg, config_path);
  CorpusManifest manifest = make_corpus(cfg.corpus);

  const std::string vol_prefix =
      (fs::path(manifest.root_dir) / manifest.recon_test[0].path_prefix).string() + ".vol";
  CHECK(run_cli("project --config " + config_path + " --volume " + vol_prefix, log) == 0);
  const fs::path out = fs::path(cfg.out_dir) / "projections";
  for (const char* f : {"ap.json", "ap.bin", "lat.json", "lat.bin", "ap.pgm", "lat.pgm"})
    CHECK(fs::exists(out / f));

  // identical geometry reproduces the corpus projection bit for bit
  auto [hc, corpus_ap] = read_blob_f64(
      (fs::path(manifest.root_dir) / manifest.recon_test[0].path_prefix).string() + ".ap",
      "projection");
  auto [hp, cli_ap] = read_blob_f64((out / "ap").string(), "projection");
  CHECK(corpus_ap == cli_ap);

  // geometry file instead of a full config
  std::ofstream(dir / "g.json") << "{\"grid_n\": 16, \"n_detector_bins\": 16}\n";
  CHECK(run_cli("project --volume " + vol_prefix + " --geometry " + (dir / "g.json").string() +
                    " --out " + (dir / "geo_out").string(),
                log) == 0);
  CHECK(fs::exists(dir / "geo_out" / "projections" / "ap.bin"));
  fs::remove_all(dir);
}

TEST_CASE("sweep writes one report per lambda cell plus a summary") {
  const fs::path dir = fs::temp_directory_path() / "ctrecon_cli_sweep";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = dir / "cli.log";
  RunConfig cfg = smoke_config(dir);
  cfg.weights.lambda_s = 0.0;  // train without pretrained networks
  cfg.weights.lambda_p = 0.0;
  const std::string config_path = (dir / "c.json").string();
  save_run_config(cfg, config_path);
  const std::string with_cfg = "--config " + config_path;

  CHECK(run_cli("gen-data " + with_cfg, log) == 0);
  CHECK(run_cli("pretrain-seg " + with_cfg, log) == 0);
  CHECK(run_cli("train " + with_cfg, log) == 0);
  CHECK(run_cli("sweep " + with_cfg + " --lambda-s 0,2 --lambda-p 0,0.5", log) == 0);

  const fs::path root = fs::path(cfg.out_dir) / "sweep";
  auto lines = read_lines(root / "sweep_summary.csv");
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "run_id,lambda_s,lambda_p,psnr_db,ssim,rmse_hu,dsc_mean_gt,dsc_mean_s");
  CHECK(lines[1].rfind("ls0_lp0,0,0,", 0) == 0);
  CHECK(lines[2].rfind("ls0_lp0.5,0,0.5,", 0) == 0);
  CHECK(lines[3].rfind("ls2_lp0,2,0,", 0) == 0);
  CHECK(lines[4].rfind("ls2_lp0.5,2,0.5,", 0) == 0);
  for (const char* id : {"ls0_lp0", "ls0_lp0.5", "ls2_lp0", "ls2_lp0.5"})
    CHECK(fs::exists(root / id / "report.csv"));
  fs::remove_all(dir);
}

TEST_CASE("exit codes distinguish usage, validation and runtime failures") {
  const fs::path dir = fs::temp_directory_path() / "ctrecon_cli_codes";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path log = dir / "cli.log";

  CHECK(run_cli("no-such-command", log) == 1);
  CHECK(run_cli("train", log) == 1);  // --config missing
  CHECK(run_cli("train --config " + (dir / "missing.json").string(), log) == 1);

  RunConfig cfg = smoke_config(dir);
  cfg.weights.lambda_s = 0.0;
  cfg.weights.lambda_p = 0.0;
  const std::string config_path = (dir / "c.json").string();
  save_run_config(cfg, config_path);
  const std::string with_cfg = "--config " + config_path;

  // corpus not generated yet: training rejects the missing manifest
  CHECK(run_cli("train " + with_cfg, log) != 0);
  // evaluating without a checkpoint is a validation error
  CHECK(run_cli("gen-data " + with_cfg, log) == 0);
  CHECK(run_cli("evaluate " + with_cfg, log) == 1);
  // malformed overrides are rejected
  CHECK(run_cli("train " + with_cfg + " --set no_such=1", log) == 1);
  CHECK(run_cli("train " + with_cfg + " --set batch_size=oops", log) == 1);

  // --set changes take effect
  RunConfig small = cfg;
  small.corpus.out_dir = (dir / "corpus2").string();
  small.manifest_path = small.corpus.out_dir + "/manifest.json";
  const std::string config2 = (dir / "c2.json").string();
  save_run_config(small, config2);
  CHECK(run_cli("gen-data --config " + config2 + " --set corpus.recon_train=4", log) == 0);
  CHECK(load_manifest(small.manifest_path).recon_train.size() == 4);
  fs::remove_all(dir);
}
