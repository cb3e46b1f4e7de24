#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ctrecon/config.hpp"
#include "ctrecon/networks.hpp"
#include "ctrecon/phantom.hpp"

namespace ctrecon {

struct SegPretrainResult {
  std::string checkpoint_prefix;  // <out_dir>/seg_best
  double best_dsc = 0.0;          // held-out mean foreground DSC
  int64_t best_epoch = 0;
  std::vector<double> epoch_dsc;  // held-out DSC after each epoch
};

// Trains the segmentation network on the segmentation corpus with the mean
// foreground dice loss and Adam(seg_lr, 0.9, 0.999); the checkpoint with the
// best held-out DSC is retained at <out_dir>/seg_best.
SegPretrainResult pretrain_segnet(const RunConfig& cfg);

// Rebuilds the SegNet from the config, loads the checkpoint, freezes it.
SegNet load_frozen_segnet(const RunConfig& cfg, const std::string& checkpoint_prefix);

struct GanTrainResult {
  std::string checkpoint_prefix;  // <out_dir>/gan_latest
  std::string loss_log_path;      // <out_dir>/gan_loss.csv
  int64_t epochs_completed = 0;
  int64_t steps_completed = 0;
  bool resumed = false;
};

// Alternating least-squares adversarial training: per batch one discriminator
// step on real volumes vs detached fakes, then one generator step on the full
// weighted objective. Adam(gan_lr, 0.5, 0.999) for both networks, gradient
// accumulation over batch_size samples, per-step LossBreakdown appended to the
// loss log, checkpoint (parameters + both Adam states + config fingerprint)
// rewritten atomically each epoch. An existing checkpoint with a matching
// fingerprint resumes; a mismatched one is rejected. seg/fx may be null when
// the matching weight is zero; a non-finite loss aborts with the last-good
// checkpoint left in place.
GanTrainResult train_gan(const RunConfig& cfg, const SegNet* seg, const FeatureExtractor* fx);

// Rebuilds the generator from the config and loads its weights from a GAN
// checkpoint written by train_gan.
GeneratorNet load_generator(const RunConfig& cfg, const std::string& checkpoint_prefix);

// G(x) denormalized to HU plus the argmax label mask of phi_s(G(x)).
std::pair<Volume, LabelMask> reconstruct(const GeneratorNet& gen, const SegNet& seg,
                                         const Tensor& x_ap, const Tensor& x_lat,
                                         double voxel_pitch_mm);

}  // namespace ctrecon
