#pragma once

#include <memory>
#include <optional>
#include <string>

#include "ctrecon/sparse.hpp"
#include "ctrecon/tensor.hpp"

namespace ctrecon {

// Flat equispaced detector, point source rotating about the isocenter.
// Angle convention: 0 deg puts the source on the -y axis projecting toward +y
// (a.p.); 90 deg puts it on the +x axis (lat.).
struct FanBeamGeometry {
  double sid_mm = 0.0;          // source to isocenter
  double sdd_mm = 0.0;          // source to detector
  int64_t n_detector_bins = 0;  // U
  double detector_pitch_mm = 0.0;
  int64_t grid_n = 0;           // transverse slice is N x N
  double voxel_pitch_mm = 0.0;
  double source_angle_deg = 0.0;

  uint64_t fingerprint() const;
};

struct GeometryConfig {
  double sid_mm = 595.0;
  double sdd_mm = 1085.6;
  int64_t grid_n = 64;
  double voxel_pitch_mm = 2.5;
  int64_t n_detector_bins = 0;    // 0: scale the full-scale 920-ray fan by grid_n/128, rounded up
  double detector_pitch_mm = 0.0; // 0: derive so the fan covers the FOV with a 10% margin
  double source_angle_deg = 0.0;
};

constexpr double kApAngleDeg = 0.0;
constexpr double kLatAngleDeg = 90.0;

FanBeamGeometry build_geometry(const GeometryConfig& config);
FanBeamGeometry with_angle(FanBeamGeometry g, double angle_deg);

// grid_n and n_detector_bins divided by 2^level, pitches multiplied; SID/SDD
// unchanged so the FOV span in mm is preserved.
FanBeamGeometry scale_geometry(const FanBeamGeometry& g, int level);

// Pixel-driven backprojector: rows = N^2 voxels, cols = U, at most two
// nonzeros per row (linear interpolation between adjacent bins).
std::shared_ptr<const SystemMatrix> build_backprojection_matrix(const FanBeamGeometry& g);

// Ray-driven forward projector with bilinear (Joseph-style) interpolation at
// steps of voxel_pitch/2; weights carry the step length in mm so rows are
// line integrals. rows = U, cols = N^2.
std::shared_ptr<const SystemMatrix> build_forward_matrix(const FanBeamGeometry& g);

struct Projector {
  FanBeamGeometry geometry;
  std::shared_ptr<const SystemMatrix> forward;
  double norm_const = 1.0;  // maximal in-grid path length, N * voxel_pitch
};

Projector make_projector(const FanBeamGeometry& g);

struct ProjectorPair {
  Projector ap;
  Projector lat;
};

ProjectorPair make_projector_pair(const FanBeamGeometry& base);

// Slice-wise fan-beam projection of a (N, N, Z) volume to (U, Z), divided by
// the normalization constant. Differentiable.
Tensor project_volume(const Projector& p, const Tensor& vol);

// Backproject per-view 1D feature rows to slices and fuse the two views by
// element-wise mean. feats are (C, U_f, Z_f), result is (C, N_f, N_f, Z_f).
Tensor lift_2d_to_3d(const std::shared_ptr<const SystemMatrix>& t_ap,
                     const std::shared_ptr<const SystemMatrix>& t_lat, const Tensor& feat_ap,
                     const Tensor& feat_lat);

// Disk cache: <path>.json header + <path>.bin with row offsets (u64 LE),
// column indices (u32 LE) and weights (f64 LE). Load returns nullopt on
// missing file or fingerprint mismatch.
void save_matrix(const std::string& path, const SystemMatrix& m);
std::optional<SystemMatrix> load_matrix(const std::string& path, uint64_t expected_fingerprint);

}  // namespace ctrecon
