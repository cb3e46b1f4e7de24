#pragma once

#include <cstdint>
#include <utility>

#include "ctrecon/fanbeam.hpp"
#include "ctrecon/networks.hpp"
#include "ctrecon/tensor.hpp"

namespace ctrecon {

struct LossWeights {
  double lambda_gen = 0.1;
  double lambda_r = 10.0;
  double lambda_proj = 10.0;
  double lambda_s = 2.0;
  double lambda_p = 0.5;
};

struct LossBreakdown {
  double dis = 0.0;
  double gen = 0.0;
  double r = 0.0;
  double proj = 0.0;
  double s = 0.0;
  double p = 0.0;
  double total = 0.0;
  int64_t step = 0;
};

constexpr double kDiceEpsilon = 1e-6;

// Least-squares adversarial losses; patch maps in, scalars out.
Tensor lsgan_d_loss(const Tensor& d_real, const Tensor& d_fake);
Tensor lsgan_g_loss(const Tensor& d_fake);

// Mean squared voxel difference.
Tensor recon_loss(const Tensor& y_hat, const Tensor& y);

// Half the sum of the two views' mean squared projection differences.
Tensor projection_loss(const Tensor& y_hat, const Tensor& y, const ProjectorPair& pair);

// Soft dice loss 1 - (2*sum(ab) + eps) / (sum(a^2) + sum(b^2) + eps) for one
// channel pair; exactly 0 for identical masks or when both are empty, 1 when
// exactly one is empty; equal to the plain-sum form on hard masks.
Tensor soft_dice_loss(const Tensor& a, const Tensor& b);

// Mean soft dice loss over the three foreground channels of phi_s applied to
// both volumes; gradient flows only through y_hat.
Tensor dice_seg_loss(const Tensor& y_hat, const Tensor& y, const SegNet& seg);

// Mean foreground soft dice between (4, ...) predicted probabilities and a
// one-hot target of the same shape; the SegNet pretraining objective.
Tensor dice_pretrain_loss(const Tensor& probs, const Tensor& onehot);

// Per-axial-slice multi-level feature distance, averaged over slices;
// squared-L2 per level by default, mean-absolute with use_l1. Gradient flows
// only through y_hat.
Tensor perceptual_loss(const Tensor& y_hat, const Tensor& y, const FeatureExtractor& fx,
                       bool use_l1 = false);

// Weighted sum of the generator terms. Terms whose weight is zero may be
// undefined and are skipped; a non-finite term aborts, naming the term.
struct GeneratorLossTerms {
  Tensor gen;
  Tensor r;
  Tensor proj;
  Tensor s;
  Tensor p;
};

std::pair<Tensor, LossBreakdown> total_generator_loss(const GeneratorLossTerms& terms,
                                                      const LossWeights& w, int64_t step);

// Full generator objective; evaluates each term only if its weight is nonzero,
// so a zero-weight run never invokes seg / fx (which may then be null).
std::pair<Tensor, LossBreakdown> generator_objective(const Tensor& y_hat, const Tensor& y,
                                                     const Tensor& d_fake,
                                                     const ProjectorPair& pair, const SegNet* seg,
                                                     const FeatureExtractor* fx,
                                                     const LossWeights& w, bool perceptual_l1,
                                                     int64_t step);

}  // namespace ctrecon
