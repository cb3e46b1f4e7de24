// Command-line front end: every pipeline stage is a subcommand working off one
// JSON run configuration, with files as the only interface between stages.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

#include "CLI11.hpp"
#include "ctrecon/config.hpp"
#include "ctrecon/evaluation.hpp"
#include "ctrecon/training.hpp"
#include "ctrecon/volume_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace ctrecon;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  bool deterministic = false;
  bool overwrite = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required) {
  auto* c = cmd->add_option("--config", opts.config_path, "run configuration JSON");
  if (config_required) c->required();
  cmd->add_option("--set", opts.overrides, "override a config key, e.g. --set gan_lr=1e-4");
  cmd->add_option("--out", opts.out, "output directory (overrides the config)");
  cmd->add_flag("--deterministic", opts.deterministic, "force deterministic reductions");
  cmd->add_flag("--overwrite", opts.overwrite, "replace existing outputs");
}

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig cfg =
      opts.config_path.empty() ? RunConfig{} : load_run_config(opts.config_path);
  for (const auto& o : opts.overrides) apply_override(cfg, o);
  if (!opts.out.empty()) cfg.out_dir = opts.out;
  if (opts.deterministic) cfg.deterministic = true;
  if (opts.overwrite) cfg.overwrite = true;
  cfg.corpus.overwrite = cfg.overwrite;
  validate_run_config(cfg);
  set_deterministic(cfg.deterministic);
  return cfg;
}

// Every stage drops the configuration it actually ran with beside its outputs.
void write_snapshot(const RunConfig& cfg, const std::string& dir, const std::string& stage) {
  fs::create_directories(dir);
  save_run_config(cfg, (fs::path(dir) / ("resolved_config." + stage + ".json")).string());
}

void refuse_existing(const fs::path& path, bool overwrite) {
  if (fs::exists(path) && !overwrite)
    throw std::invalid_argument(path.string() + " already exists (pass --overwrite to replace)");
}

std::string require_out_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw std::invalid_argument("config: out_dir is empty");
  return cfg.out_dir;
}

void write_slice_preview(const std::string& path, const std::vector<double>& volume_data,
                         int64_t n, int64_t z) {
  const int64_t mid = z / 2;
  std::vector<double> slice(size_t(n * n));
  for (int64_t p = 0; p < n * n; ++p) slice[size_t(p)] = volume_data[size_t(p * z + mid)];
  write_pgm(path, slice, n, n, 1.0, 0.5);
}

GeometryConfig load_geometry_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open geometry file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("unparseable geometry file " + path + ": " + e.what());
  }
  GeometryConfig g;
  if (j.contains("sid_mm")) j.at("sid_mm").get_to(g.sid_mm);
  if (j.contains("sdd_mm")) j.at("sdd_mm").get_to(g.sdd_mm);
  if (j.contains("grid_n")) j.at("grid_n").get_to(g.grid_n);
  if (j.contains("voxel_pitch_mm")) j.at("voxel_pitch_mm").get_to(g.voxel_pitch_mm);
  if (j.contains("n_detector_bins")) j.at("n_detector_bins").get_to(g.n_detector_bins);
  if (j.contains("detector_pitch_mm")) j.at("detector_pitch_mm").get_to(g.detector_pitch_mm);
  return g;
}

std::string seg_checkpoint_prefix(const RunConfig& cfg) {
  return (fs::path(cfg.out_dir) / "seg_best").string();
}

std::string gan_checkpoint_prefix(const RunConfig& cfg) {
  return (fs::path(cfg.out_dir) / "gan_latest").string();
}

SegNet load_segnet_or_fail(const RunConfig& cfg) {
  const std::string prefix = seg_checkpoint_prefix(cfg);
  if (!fs::exists(prefix + ".json"))
    throw std::invalid_argument("no segmentation checkpoint at " + prefix +
                                "; run pretrain-seg first");
  return load_frozen_segnet(cfg, prefix);
}

GeneratorNet load_generator_or_fail(const RunConfig& cfg) {
  const std::string prefix = gan_checkpoint_prefix(cfg);
  if (!fs::exists(prefix + ".json"))
    throw std::invalid_argument("no GAN checkpoint at " + prefix + "; run train first");
  return load_generator(cfg, prefix);
}

int run_gen_data(const CommonOpts& opts) {
  RunConfig cfg = resolve_config(opts);
  if (cfg.corpus.out_dir.empty()) throw std::invalid_argument("config: corpus.out_dir is empty");
  refuse_existing(fs::path(cfg.corpus.out_dir) / "manifest.json", cfg.overwrite);
  CorpusManifest m = make_corpus(cfg.corpus);
  write_snapshot(cfg, cfg.corpus.out_dir, "gen-data");
  std::cout << "corpus written to " << cfg.corpus.out_dir << " (" << m.recon_train.size() << "/"
            << m.recon_test.size() << " recon, " << m.seg_train.size() << "/"
            << m.seg_test.size() << " seg samples)\n";
  return 0;
}

int run_pretrain_seg(const CommonOpts& opts) {
  RunConfig cfg = resolve_config(opts);
  const std::string out = require_out_dir(cfg);
  refuse_existing(fs::path(out) / "seg_best.json", cfg.overwrite);
  write_snapshot(cfg, out, "pretrain-seg");
  SegPretrainResult r = pretrain_segnet(cfg);
  std::cout << "segmentation checkpoint " << r.checkpoint_prefix << " (held-out DSC "
            << r.best_dsc << " at epoch " << r.best_epoch << ")\n";
  return 0;
}

int run_train(const CommonOpts& opts) {
  RunConfig cfg = resolve_config(opts);
  const std::string out = require_out_dir(cfg);
  write_snapshot(cfg, out, "train");

  std::optional<SegNet> seg;
  if (cfg.weights.lambda_s != 0.0) seg.emplace(load_segnet_or_fail(cfg));
  std::optional<FeatureExtractor> fx;
  if (cfg.weights.lambda_p != 0.0) fx.emplace(make_feature_extractor_config(cfg));

  GanTrainResult r = train_gan(cfg, seg ? &*seg : nullptr, fx ? &*fx : nullptr);
  std::cout << (r.resumed ? "resumed" : "trained") << " to epoch " << r.epochs_completed << " ("
            << r.steps_completed << " steps), checkpoint " << r.checkpoint_prefix << "\n";
  return 0;
}

int run_reconstruct(const CommonOpts& opts, const std::string& ap_path,
                    const std::string& lat_path) {
  RunConfig cfg = resolve_config(opts);
  const fs::path out = fs::path(require_out_dir(cfg)) / "reconstruction";
  refuse_existing(out / "recon.vol.json", cfg.overwrite);

  auto [ha, ap] = read_blob_f64(ap_path, "projection");
  auto [hl, lat] = read_blob_f64(lat_path, "projection");
  Tensor x_ap = Tensor::from_data(ha.shape, std::move(ap));
  Tensor x_lat = Tensor::from_data(hl.shape, std::move(lat));

  GeneratorNet gen = load_generator_or_fail(cfg);
  SegNet seg = load_segnet_or_fail(cfg);
  auto [vol, mask] = reconstruct(gen, seg, x_ap, x_lat, cfg.corpus.voxel_pitch_mm);

  write_snapshot(cfg, out.string(), "reconstruct");
  write_volume(vol, (out / "recon.vol").string());
  write_mask(mask, (out / "recon.mask").string());
  Tensor normalized = hu_normalize(vol);
  write_slice_preview((out / "recon.pgm").string(), normalized.data(), vol.grid_n, vol.depth);
  std::cout << "reconstruction written to " << out.string() << "\n";
  return 0;
}

int run_evaluate(const CommonOpts& opts, const std::string& run_id) {
  RunConfig cfg = resolve_config(opts);
  const fs::path out = fs::path(require_out_dir(cfg)) / ("eval_" + run_id);
  refuse_existing(out / "report.csv", cfg.overwrite);

  CorpusManifest manifest = load_manifest(cfg.manifest_path);
  GeneratorNet gen = load_generator_or_fail(cfg);
  SegNet seg = load_segnet_or_fail(cfg);
  write_snapshot(cfg, out.string(), "evaluate");
  MetricsReport report = evaluate_testset(gen, seg, manifest, out.string(), run_id, cfg.weights);
  std::cout << "evaluated " << report.samples.size() << " samples (" << report.missing_count
            << " missing); mean SSIM " << report.mean.ssim << ", mean RMSE "
            << report.mean.rmse_hu << " HU, report " << (out / "report.csv").string() << "\n";
  return 0;
}

int run_project(const CommonOpts& opts, const std::string& volume_path,
                const std::string& geometry_path) {
  RunConfig cfg;
  if (!opts.config_path.empty() || geometry_path.empty()) {
    cfg = resolve_config(opts);
  } else {
    for (const auto& o : opts.overrides) apply_override(cfg, o);
    if (!opts.out.empty()) cfg.out_dir = opts.out;
    if (opts.overwrite) cfg.overwrite = true;
    set_deterministic(true);
  }
  if (!geometry_path.empty()) cfg.geometry = load_geometry_file(geometry_path);

  Volume v = read_volume(volume_path);
  cfg.geometry.grid_n = v.grid_n;
  cfg.geometry.voxel_pitch_mm = v.voxel_pitch_mm;
  ProjectorPair pair = make_projector_pair(build_geometry(cfg.geometry));
  auto [ap, lat] = simulate_projection_pair(v, pair);

  const fs::path out = fs::path(require_out_dir(cfg)) / "projections";
  refuse_existing(out / "ap.json", cfg.overwrite);
  fs::create_directories(out);
  BlobHeader h;
  h.shape = ap.shape();
  h.voxel_pitch_mm = pair.ap.geometry.detector_pitch_mm;
  h.dtype = "f64";
  h.role = "projection";
  write_blob_f64((out / "ap").string(), h, ap.data());
  write_blob_f64((out / "lat").string(), h, lat.data());
  write_pgm((out / "ap.pgm").string(), ap.data(), ap.shape()[1], ap.shape()[0], 1.0, 0.5);
  write_pgm((out / "lat.pgm").string(), lat.data(), lat.shape()[1], lat.shape()[0], 1.0, 0.5);
  std::cout << "projections written to " << out.string() << "\n";
  return 0;
}

int run_sweep(const CommonOpts& opts, const std::string& ls_csv, const std::string& lp_csv) {
  RunConfig cfg = resolve_config(opts);
  auto parse_list = [](const std::string& csv, const char* name) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        out.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::invalid_argument(std::string("malformed ") + name + " list entry \"" + cell +
                                    "\"");
      }
    }
    if (out.empty()) throw std::invalid_argument(std::string(name) + " list is empty");
    return out;
  };
  const auto cells = sweep_grid(parse_list(ls_csv, "--lambda-s"), parse_list(lp_csv, "--lambda-p"));

  const fs::path root = fs::path(require_out_dir(cfg)) / "sweep";
  refuse_existing(root / "sweep_summary.csv", cfg.overwrite);
  CorpusManifest manifest = load_manifest(cfg.manifest_path);
  GeneratorNet gen = load_generator_or_fail(cfg);
  SegNet seg = load_segnet_or_fail(cfg);

  fs::create_directories(root);
  std::ofstream summary(root / "sweep_summary.csv", std::ios::trunc);
  summary << "run_id,lambda_s,lambda_p,psnr_db,ssim,rmse_hu,dsc_mean_gt,dsc_mean_s\n";
  summary.precision(17);
  for (const auto& cell : cells) {
    LossWeights w = cfg.weights;
    w.lambda_s = cell.lambda_s;
    w.lambda_p = cell.lambda_p;
    MetricsReport report =
        evaluate_testset(gen, seg, manifest, (root / cell.run_id).string(), cell.run_id, w);
    summary << cell.run_id << ',' << cell.lambda_s << ',' << cell.lambda_p << ','
            << report.mean.psnr_db << ',' << report.mean.ssim << ',' << report.mean.rmse_hu << ','
            << report.mean.dsc_mean_gt << ',' << report.mean.dsc_mean_s << "\n";
  }
  write_snapshot(cfg, root.string(), "sweep");
  std::cout << cells.size() << " sweep cells written under " << root.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anatomy-guided adversarial CT reconstruction from two X-ray views"};
  app.require_subcommand(1);

  CommonOpts gen_data_opts, pretrain_opts, train_opts, recon_opts, eval_opts, project_opts,
      sweep_opts;
  std::string recon_ap, recon_lat, eval_run_id = "eval", project_volume, project_geometry,
              sweep_ls, sweep_lp;

  add_common(app.add_subcommand("gen-data", "generate the synthetic corpus"), gen_data_opts,
             true);
  add_common(app.add_subcommand("pretrain-seg", "pretrain the segmentation network"),
             pretrain_opts, true);
  add_common(app.add_subcommand("train", "adversarial reconstruction training"), train_opts,
             true);

  auto* recon_cmd = app.add_subcommand("reconstruct", "reconstruct one projection pair");
  add_common(recon_cmd, recon_opts, true);
  recon_cmd->add_option("--ap", recon_ap, "a.p. projection blob prefix")->required();
  recon_cmd->add_option("--lat", recon_lat, "lat. projection blob prefix")->required();

  auto* eval_cmd = app.add_subcommand("evaluate", "score the test split");
  add_common(eval_cmd, eval_opts, true);
  eval_cmd->add_option("--run-id", eval_run_id, "label for this evaluation run");

  auto* project_cmd = app.add_subcommand("project", "forward-project a volume");
  add_common(project_cmd, project_opts, false);
  project_cmd->add_option("--volume", project_volume, "volume blob prefix")->required();
  project_cmd->add_option("--geometry", project_geometry, "geometry JSON (instead of --config)");

  auto* sweep_cmd = app.add_subcommand("sweep", "evaluate a lambda grid");
  add_common(sweep_cmd, sweep_opts, true);
  sweep_cmd->add_option("--lambda-s", sweep_ls, "comma-separated lambda_s values")->required();
  sweep_cmd->add_option("--lambda-p", sweep_lp, "comma-separated lambda_p values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (app.got_subcommand("gen-data")) return run_gen_data(gen_data_opts);
    if (app.got_subcommand("pretrain-seg")) return run_pretrain_seg(pretrain_opts);
    if (app.got_subcommand("train")) return run_train(train_opts);
    if (app.got_subcommand("reconstruct"))
      return run_reconstruct(recon_opts, recon_ap, recon_lat);
    if (app.got_subcommand("evaluate")) return run_evaluate(eval_opts, eval_run_id);
    if (app.got_subcommand("project"))
      return run_project(project_opts, project_volume, project_geometry);
    if (app.got_subcommand("sweep")) return run_sweep(sweep_opts, sweep_ls, sweep_lp);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
