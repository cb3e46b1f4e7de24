#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ctrecon/losses.hpp"
#include "ctrecon/networks.hpp"
#include "ctrecon/phantom.hpp"

namespace ctrecon {

// Peak signal-to-noise ratio in dB on normalized volumes (peak 1.0);
// +infinity for identical inputs, excluded from aggregates.
double psnr(const Tensor& y_hat, const Tensor& y);

// Mean over axial slices of the standard 2D SSIM (11x11 Gaussian window,
// sigma 1.5, K1=0.01, K2=0.03, range 1.0, valid positions only).
double ssim(const Tensor& y_hat, const Tensor& y);

// Root mean squared error scaled to Hounsfield units by the 4095 span.
double rmse_hu(const Tensor& y_hat, const Tensor& y);

// Hard dice coefficient of one organ's binary masks; 1.0 when both are
// empty, 0.0 when exactly one is.
double dsc(const LabelMask& a, const LabelMask& b, uint8_t organ);

struct SampleMetrics {
  std::string sample_id;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double rmse_hu = 0.0;
  double dsc_gt[3] = {0, 0, 0};  // lung, liver, bone vs exact labels
  double dsc_mean_gt = 0.0;
  double dsc_s[3] = {0, 0, 0};  // vs phi_s(y)
  double dsc_mean_s = 0.0;
};

struct MetricsReport {
  std::string run_id;
  LossWeights weights;
  std::vector<SampleMetrics> samples;
  SampleMetrics mean;  // sample_id "mean"; psnr mean over finite entries
  SampleMetrics stddev;
  int64_t psnr_finite_count = 0;
  int64_t missing_count = 0;  // unreadable samples skipped with a warning
};

// Reconstructs every reconstruction-corpus test sample, scores it against
// ground truth and against phi_s(y), writes <out_dir>/report.csv and
// mid-volume PGM previews. Unreadable samples are skipped and counted.
using Reconstructor = std::function<Tensor(const TrainingSample&)>;

MetricsReport evaluate_testset(const Reconstructor& reconstruct, const SegNet& seg,
                               const CorpusManifest& manifest, const std::string& out_dir,
                               const std::string& run_id, const LossWeights& weights);

MetricsReport evaluate_testset(const GeneratorNet& gen, const SegNet& seg,
                               const CorpusManifest& manifest, const std::string& out_dir,
                               const std::string& run_id, const LossWeights& weights);

// Aggregate (mean/std) recomputed over already-collected rows.
void finalize_report(MetricsReport& report);

void write_report_csv(const MetricsReport& report, const std::string& path);

struct SweepCell {
  double lambda_s = 0.0;
  double lambda_p = 0.0;
  std::string run_id;
};

// Cross product of the two lambda lists in row-major order; run ids encode
// the cell, e.g. "ls2_lp0.5".
std::vector<SweepCell> sweep_grid(const std::vector<double>& lambda_s,
                                  const std::vector<double>& lambda_p);

}  // namespace ctrecon
