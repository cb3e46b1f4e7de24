#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ctrecon/checkpoint.hpp"
#include "ctrecon/fanbeam.hpp"
#include "ctrecon/tensor.hpp"

namespace ctrecon {

// Dual 2D encoders over the a.p./lat. projections, per-level backprojection
// lifting with the matching scaled geometry, 3D decoder with lifted skip
// connections, sigmoid head. Channel widths and depth are config-exposed.
struct GeneratorConfig {
  FanBeamGeometry geometry;               // level-0 geometry (angle ignored)
  int levels = 2;                         // encoder downsampling count
  std::vector<int64_t> widths = {16, 32, 64};  // one entry per level, size levels+1
  int64_t depth_z = 64;                   // Z extent of projections and volume
  uint64_t seed = 101;
};

class GeneratorNet {
 public:
  explicit GeneratorNet(const GeneratorConfig& config);

  // x_ap / x_lat: (U, Z) normalized projections -> (N, N, Z) volume in (0,1)
  Tensor forward(const Tensor& x_ap, const Tensor& x_lat) const;

  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const GeneratorConfig& config() const { return config_; }
  int64_t parameter_count() const;

 private:
  GeneratorConfig config_;
  std::vector<NamedParam> params_;
  struct LiftLevel {
    std::shared_ptr<const SystemMatrix> t_ap;
    std::shared_ptr<const SystemMatrix> t_lat;
    int64_t grid_n;
    int64_t n_bins;
  };
  std::vector<LiftLevel> lifts_;  // one per level 0..levels
  Tensor param(const std::string& name) const;
};

// PatchGAN-style 3D discriminator: stride-2 convolution stack ending in a
// linear patch-score map (no sigmoid; least-squares loss).
struct DiscriminatorConfig {
  int64_t grid_n = 64;
  int64_t depth_z = 64;
  std::vector<int64_t> widths = {16, 32, 64};  // one stride-2 stage each
  uint64_t seed = 202;
};

class DiscriminatorNet {
 public:
  explicit DiscriminatorNet(const DiscriminatorConfig& config);

  // v: (N, N, Z) -> patch map (N/2^S, N/2^S, Z/2^S), S = widths.size()
  Tensor forward(const Tensor& v) const;

  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const DiscriminatorConfig& config() const { return config_; }
  int64_t parameter_count() const;

 private:
  DiscriminatorConfig config_;
  std::vector<NamedParam> params_;
  Tensor param(const std::string& name) const;
};

// Vanilla 3D U-Net, 3 resolution levels, 4-channel softmax head.
struct SegNetConfig {
  int64_t grid_n = 64;
  int64_t depth_z = 64;
  std::vector<int64_t> widths = {8, 16, 32};  // levels 0..2
  uint64_t seed = 303;
};

class SegNet {
 public:
  explicit SegNet(const SegNetConfig& config);

  // v: (N, N, Z) -> per-voxel probabilities (4, N, N, Z); channels sum to 1
  Tensor forward(const Tensor& v) const;

  void freeze();
  bool frozen() const { return frozen_; }
  // number of forward passes since construction; lets tests prove the
  // baseline objective never touches this network
  int64_t invocation_count() const { return invocations_; }

  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const SegNetConfig& config() const { return config_; }
  int64_t parameter_count() const;

 private:
  SegNetConfig config_;
  std::vector<NamedParam> params_;
  bool frozen_ = false;
  mutable int64_t invocations_ = 0;
  Tensor param(const std::string& name) const;
};

// Frozen multi-scale 2D filter bank standing in for a pretrained perceptual
// backbone: 4 levels of 3x3 convs (16/32/64/128 channels) with leaky-relu and
// avg-pool between levels, weights from a seeded orthogonal draw. An external
// weight file in the checkpoint format can replace the seeded weights.
struct FeatureExtractorConfig {
  std::vector<int64_t> widths = {16, 32, 64, 128};
  uint64_t seed = 404;
  std::string weights_path;  // optional checkpoint prefix
};

class FeatureExtractor {
 public:
  explicit FeatureExtractor(const FeatureExtractorConfig& config);

  // slice: (1, N, N), N divisible by 2^3 -> features at scales N, N/2, N/4,
  // N/8. Gradients flow into the slice, never into the weights.
  std::vector<Tensor> forward(const Tensor& slice) const;

  const std::vector<NamedParam>& parameters() const { return params_; }
  int64_t invocation_count() const { return invocations_; }
  const FeatureExtractorConfig& config() const { return config_; }

 private:
  FeatureExtractorConfig config_;
  std::vector<NamedParam> params_;
  mutable int64_t invocations_ = 0;
  Tensor param(const std::string& name) const;
};

}  // namespace ctrecon
