#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctrecon/fanbeam.hpp"
#include "ctrecon/losses.hpp"
#include "ctrecon/phantom.hpp"

namespace ctrecon {

// Architecture knobs for all four networks; widths and levels are free
// parameters of the run, not fixed constants.
struct NetworkConfigBlock {
  int gen_levels = 2;
  std::vector<int64_t> gen_widths = {16, 32, 64};
  std::vector<int64_t> dis_widths = {16, 32, 64};
  std::vector<int64_t> seg_widths = {8, 16, 32};
  std::vector<int64_t> fx_widths = {16, 32, 64, 128};
  uint64_t gen_seed = 101;
  uint64_t dis_seed = 202;
  uint64_t seg_seed = 303;
  uint64_t fx_seed = 404;
  std::string fx_weights_path;  // optional external checkpoint prefix
};

// One JSON file drives every pipeline stage: corpus generation reads the
// corpus block, training stages read the manifest path plus hyperparameters.
struct RunConfig {
  std::string manifest_path;
  std::string out_dir;
  LossWeights weights;
  int64_t gan_epochs = 30;   // paper-scale runs use 100
  int64_t seg_epochs = 200;
  double gan_lr = 2e-4;
  double seg_lr = 5e-4;
  int64_t batch_size = 4;
  uint64_t train_seed = 42;
  bool perceptual_l1 = false;
  GeometryConfig geometry;
  NetworkConfigBlock networks;
  CorpusConfig corpus;
  bool deterministic = true;
  bool overwrite = false;
};

// Throws std::invalid_argument naming the offending field.
void validate_run_config(const RunConfig& cfg);

// Canonical JSON round trip. Loading fills absent fields with defaults and
// rejects unknown keys, naming them.
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);
std::string run_config_json(const RunConfig& cfg);

// "key=value" override with dotted keys, e.g. weights.lambda_s=0 or
// networks.gen_widths=[4,8,16]. Unknown keys and malformed values throw.
void apply_override(RunConfig& cfg, const std::string& assignment);

// FNV-1a over the canonical JSON minus out_dir/overwrite/deterministic and the
// epoch budgets, so a resumed run detects hyperparameter drift but an extended
// epoch budget still resumes.
uint64_t run_config_fingerprint(const RunConfig& cfg);

// Network configs derived from the run config (generator geometry from the
// geometry block, depth_z from the corpus depth).
GeneratorConfig make_generator_config(const RunConfig& cfg);
DiscriminatorConfig make_discriminator_config(const RunConfig& cfg);
SegNetConfig make_segnet_config(const RunConfig& cfg);
FeatureExtractorConfig make_feature_extractor_config(const RunConfig& cfg);

}  // namespace ctrecon
