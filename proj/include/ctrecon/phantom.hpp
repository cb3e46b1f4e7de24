#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctrecon/fanbeam.hpp"
#include "ctrecon/tensor.hpp"

namespace ctrecon {

constexpr double kHuMin = -1024.0;
constexpr double kHuMax = 3071.0;
constexpr double kHuOffset = 1024.0;
constexpr double kHuSpan = 4095.0;

constexpr uint8_t kLabelBackground = 0;
constexpr uint8_t kLabelLung = 1;
constexpr uint8_t kLabelLiver = 2;
constexpr uint8_t kLabelBone = 3;
constexpr int kNumLabels = 4;

// Axial grid (N, N, Z); flat index (iy * N + ix) * Z + z, matching the tensor
// layout project_volume expects.
struct Volume {
  int64_t grid_n = 0;
  int64_t depth = 0;
  double voxel_pitch_mm = 0.0;
  std::vector<double> hu;  // values in [-1024, 3071]
};

struct LabelMask {
  int64_t grid_n = 0;
  int64_t depth = 0;
  std::vector<uint8_t> labels;  // values in {0,1,2,3}
};

struct PhantomSample {
  Volume volume;
  LabelMask mask;
};

// Deterministic chest phantom: elliptic soft-tissue body (40 HU) in air, two
// lung ellipsoids (-800), a liver ellipsoid in the lower-right body (60),
// stacked vertebral cylinders with 20%-height gaps plus elliptical rib arcs
// (700), smooth +-20 HU noise inside the body only. The mask marks organ
// voxels exactly where their HU shapes were written.
PhantomSample generate_phantom(uint64_t seed, int64_t grid_n, int64_t depth,
                               double voxel_pitch_mm);

// Linear map HU -> (HU + 1024) / 4095. Out-of-range inputs are clamped and
// counted into *clamped_count when given.
Tensor hu_normalize(const Volume& v, int64_t* clamped_count = nullptr);
Volume hu_denormalize(const Tensor& t, double voxel_pitch_mm);

// Forward-projects the normalized volume at the a.p. and lat. angles; outputs
// (U, Z) clamped to [0, 1].
std::pair<Tensor, Tensor> simulate_projection_pair(const Volume& v, const ProjectorPair& pair);

struct SampleEntry {
  std::string id;
  uint64_t seed = 0;
  std::string path_prefix;  // relative to the manifest directory
};

struct CorpusManifest {
  uint64_t corpus_seed = 0;
  int64_t grid_n = 0;
  int64_t depth = 0;
  double voxel_pitch_mm = 0.0;
  double norm_offset = kHuOffset;
  double norm_span = kHuSpan;
  GeometryConfig geometry;
  std::string root_dir;  // set on load/save, not serialized
  std::vector<SampleEntry> recon_train;
  std::vector<SampleEntry> recon_test;
  std::vector<SampleEntry> seg_train;
  std::vector<SampleEntry> seg_test;
};

struct CorpusConfig {
  std::string out_dir;
  uint64_t corpus_seed = 1234;
  int64_t recon_train = 200;
  int64_t recon_test = 40;
  int64_t seg_train = 112;
  int64_t seg_test = 28;
  int64_t grid_n = 64;
  int64_t depth = 64;
  double voxel_pitch_mm = 2.5;
  GeometryConfig geometry;  // grid_n / voxel_pitch are overridden from above
  bool overwrite = false;
};

// Writes the reconstruction corpus (projections + volumes + masks) and the
// segmentation corpus (volumes + masks only) plus manifest.json under
// config.out_dir. Deterministic in (corpus_seed, config).
CorpusManifest make_corpus(const CorpusConfig& config);

void save_manifest(const CorpusManifest& m, const std::string& path);
CorpusManifest load_manifest(const std::string& path);

void write_volume(const Volume& v, const std::string& path_prefix);
Volume read_volume(const std::string& path_prefix);
void write_mask(const LabelMask& m, const std::string& path_prefix);
LabelMask read_mask(const std::string& path_prefix);

struct TrainingSample {
  Tensor x_ap;  // (U, Z) in [0,1]
  Tensor x_lat;
  Tensor y;  // (N, N, Z) in [0,1]
  LabelMask mask;
  std::string id;
  uint64_t seed = 0;
};

// Loads a sample from disk; has_projections=false for segmentation-corpus
// entries (x_ap / x_lat stay undefined).
TrainingSample load_training_sample(const CorpusManifest& m, const SampleEntry& e,
                                    bool has_projections);

// (kNumLabels, N, N, Z) one-hot encoding of the mask.
Tensor mask_to_onehot(const LabelMask& m);
// argmax over channels of (kNumLabels, N, N, Z) scores.
LabelMask onehot_to_mask(const Tensor& scores);

}  // namespace ctrecon
