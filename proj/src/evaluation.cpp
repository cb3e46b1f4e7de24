#include "ctrecon/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "ctrecon/volume_io.hpp"

namespace fs = std::filesystem;

namespace ctrecon {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

double mse(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return acc / double(a.numel());
}

// separable Gaussian blur of an h x w image with the SSIM window, valid mode
std::vector<double> gaussian_valid(const std::vector<double>& img, int64_t h, int64_t w,
                                   const std::vector<double>& kernel) {
  const int64_t win = static_cast<int64_t>(kernel.size());
  const int64_t oh = h - win + 1, ow = w - win + 1;
  std::vector<double> rows(static_cast<size_t>(h * ow));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t k = 0; k < win; ++k) acc += kernel[size_t(k)] * img[size_t(y * w + x + k)];
      rows[size_t(y * ow + x)] = acc;
    }
  std::vector<double> out(static_cast<size_t>(oh * ow));
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t k = 0; k < win; ++k) acc += kernel[size_t(k)] * rows[size_t((y + k) * ow + x)];
      out[size_t(y * ow + x)] = acc;
    }
  return out;
}

double ssim_slice(const std::vector<double>& a, const std::vector<double>& b, int64_t n) {
  constexpr int64_t kWin = 11;
  constexpr double kSigma = 1.5, kK1 = 0.01, kK2 = 0.03, kRange = 1.0;
  if (n < kWin)
    throw std::invalid_argument("ssim: slice size " + std::to_string(n) +
                                " smaller than the 11x11 window");
  static const std::vector<double> kernel = [] {
    std::vector<double> k(kWin);
    double s = 0.0;
    for (int64_t i = 0; i < kWin; ++i) {
      const double d = double(i) - double(kWin - 1) / 2.0;
      k[size_t(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
      s += k[size_t(i)];
    }
    for (auto& v : k) v /= s;
    return k;
  }();
  const double c1 = (kK1 * kRange) * (kK1 * kRange);
  const double c2 = (kK2 * kRange) * (kK2 * kRange);

  auto sq = [](const std::vector<double>& v) {
    std::vector<double> o(v.size());
    for (size_t i = 0; i < v.size(); ++i) o[i] = v[i] * v[i];
    return o;
  };
  std::vector<double> ab(a.size());
  for (size_t i = 0; i < a.size(); ++i) ab[i] = a[i] * b[i];

  const auto mu_a = gaussian_valid(a, n, n, kernel);
  const auto mu_b = gaussian_valid(b, n, n, kernel);
  const auto m_aa = gaussian_valid(sq(a), n, n, kernel);
  const auto m_bb = gaussian_valid(sq(b), n, n, kernel);
  const auto m_ab = gaussian_valid(ab, n, n, kernel);

  double acc = 0.0;
  for (size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = m_aa[i] - ma * ma;
    const double vb = m_bb[i] - mb * mb;
    const double cov = m_ab[i] - ma * mb;
    acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / double(mu_a.size());
}

}  // namespace

double psnr(const Tensor& y_hat, const Tensor& y) {
  check_same_shape(y_hat, y, "psnr");
  const double m = mse(y_hat, y);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double ssim(const Tensor& y_hat, const Tensor& y) {
  check_same_shape(y_hat, y, "ssim");
  const Shape& sh = y.shape();
  if (sh.size() != 3 || sh[0] != sh[1])
    throw std::invalid_argument("ssim expects (N, N, Z) volumes, got " + shape_str(sh));
  const int64_t n = sh[0], z = sh[2];
  double acc = 0.0;
  std::vector<double> sa(static_cast<size_t>(n * n)), sb(sa.size());
  for (int64_t iz = 0; iz < z; ++iz) {
    for (int64_t p = 0; p < n * n; ++p) {
      sa[size_t(p)] = y_hat.data()[size_t(p * z + iz)];
      sb[size_t(p)] = y.data()[size_t(p * z + iz)];
    }
    acc += ssim_slice(sa, sb, n);
  }
  return acc / double(z);
}

double rmse_hu(const Tensor& y_hat, const Tensor& y) {
  check_same_shape(y_hat, y, "rmse_hu");
  return std::sqrt(mse(y_hat, y)) * kHuSpan;
}

double dsc(const LabelMask& a, const LabelMask& b, uint8_t organ) {
  if (a.grid_n != b.grid_n || a.depth != b.depth)
    throw std::invalid_argument("dsc: mask shapes differ");
  if (organ >= kNumLabels)
    throw std::invalid_argument("dsc: unknown organ label " + std::to_string(organ));
  int64_t na = 0, nb = 0, ni = 0;
  for (size_t i = 0; i < a.labels.size(); ++i) {
    const bool ia = a.labels[i] == organ, ib = b.labels[i] == organ;
    na += ia;
    nb += ib;
    ni += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(ni) / double(na + nb);
}

namespace {

constexpr uint8_t kOrgans[3] = {kLabelLung, kLabelLiver, kLabelBone};

void export_previews(const std::string& out_dir, const std::string& sample_id, const Tensor& y,
                     const Tensor& y_hat, const LabelMask& mask_gt, const LabelMask& mask_hat) {
  const int64_t n = y.shape()[0], z = y.shape()[2];
  const int64_t mid = z / 2;
  auto slice_of = [&](const std::vector<double>& v) {
    std::vector<double> s(static_cast<size_t>(n * n));
    for (int64_t p = 0; p < n * n; ++p) s[size_t(p)] = v[size_t(p * z + mid)];
    return s;
  };
  auto mask_slice = [&](const LabelMask& m) {
    std::vector<double> s(static_cast<size_t>(n * n));
    for (int64_t p = 0; p < n * n; ++p)
      s[size_t(p)] = double(m.labels[size_t(p * z + mid)]) / 3.0;
    return s;
  };
  const fs::path dir = fs::path(out_dir) / "previews";
  fs::create_directories(dir);
  write_pgm((dir / (sample_id + "_gt.pgm")).string(), slice_of(y.data()), n, n, 1.0, 0.5);
  write_pgm((dir / (sample_id + "_recon.pgm")).string(), slice_of(y_hat.data()), n, n, 1.0, 0.5);
  write_pgm((dir / (sample_id + "_mask_gt.pgm")).string(), mask_slice(mask_gt), n, n, 1.0, 0.5);
  write_pgm((dir / (sample_id + "_mask_recon.pgm")).string(), mask_slice(mask_hat), n, n, 1.0,
            0.5);
}

}  // namespace

void finalize_report(MetricsReport& report) {
  auto collect = [&](auto field) {
    std::vector<double> v;
    for (const auto& s : report.samples) v.push_back(field(s));
    return v;
  };
  auto mean_std = [](const std::vector<double>& v, double& m, double& sd) {
    if (v.empty()) {
      m = sd = 0.0;
      return;
    }
    m = 0.0;
    for (double x : v) m += x;
    m /= double(v.size());
    sd = 0.0;
    for (double x : v) sd += (x - m) * (x - m);
    sd = std::sqrt(sd / double(v.size()));
  };

  report.mean.sample_id = "mean";
  report.stddev.sample_id = "std";
  // psnr aggregates over finite entries only
  std::vector<double> finite_psnr;
  for (const auto& s : report.samples)
    if (std::isfinite(s.psnr_db)) finite_psnr.push_back(s.psnr_db);
  report.psnr_finite_count = static_cast<int64_t>(finite_psnr.size());
  mean_std(finite_psnr, report.mean.psnr_db, report.stddev.psnr_db);
  mean_std(collect([](const SampleMetrics& s) { return s.ssim; }), report.mean.ssim,
           report.stddev.ssim);
  mean_std(collect([](const SampleMetrics& s) { return s.rmse_hu; }), report.mean.rmse_hu,
           report.stddev.rmse_hu);
  for (int o = 0; o < 3; ++o) {
    mean_std(collect([o](const SampleMetrics& s) { return s.dsc_gt[o]; }), report.mean.dsc_gt[o],
             report.stddev.dsc_gt[o]);
    mean_std(collect([o](const SampleMetrics& s) { return s.dsc_s[o]; }), report.mean.dsc_s[o],
             report.stddev.dsc_s[o]);
  }
  mean_std(collect([](const SampleMetrics& s) { return s.dsc_mean_gt; }), report.mean.dsc_mean_gt,
           report.stddev.dsc_mean_gt);
  mean_std(collect([](const SampleMetrics& s) { return s.dsc_mean_s; }), report.mean.dsc_mean_s,
           report.stddev.dsc_mean_s);
}

MetricsReport evaluate_testset(const Reconstructor& reconstruct, const SegNet& seg,
                               const CorpusManifest& manifest, const std::string& out_dir,
                               const std::string& run_id, const LossWeights& weights) {
  if (manifest.recon_test.empty()) throw std::invalid_argument("evaluate: empty test split");
  MetricsReport report;
  report.run_id = run_id;
  report.weights = weights;
  fs::create_directories(out_dir);

  for (const auto& entry : manifest.recon_test) {
    TrainingSample sample;
    try {
      sample = load_training_sample(manifest, entry, /*has_projections=*/true);
    } catch (const std::exception& e) {
      ++report.missing_count;
      std::ofstream(fs::path(out_dir) / "warnings.txt", std::ios::app)
          << entry.id << ": " << e.what() << "\n";
      continue;
    }
    Tensor y_hat = reconstruct(sample).detach();
    LabelMask mask_hat = onehot_to_mask(seg.forward(y_hat).detach());
    LabelMask mask_seg_gt = onehot_to_mask(seg.forward(sample.y).detach());

    SampleMetrics m;
    m.sample_id = entry.id;
    m.psnr_db = psnr(y_hat, sample.y);
    m.ssim = ssim(y_hat, sample.y);
    m.rmse_hu = rmse_hu(y_hat, sample.y);
    for (int o = 0; o < 3; ++o) {
      m.dsc_gt[o] = dsc(mask_hat, sample.mask, kOrgans[o]);
      m.dsc_s[o] = dsc(mask_hat, mask_seg_gt, kOrgans[o]);
      m.dsc_mean_gt += m.dsc_gt[o] / 3.0;
      m.dsc_mean_s += m.dsc_s[o] / 3.0;
    }
    report.samples.push_back(m);
    export_previews(out_dir, entry.id, sample.y, y_hat, sample.mask, mask_hat);
  }
  finalize_report(report);
  write_report_csv(report, (fs::path(out_dir) / "report.csv").string());
  return report;
}

MetricsReport evaluate_testset(const GeneratorNet& gen, const SegNet& seg,
                               const CorpusManifest& manifest, const std::string& out_dir,
                               const std::string& run_id, const LossWeights& weights) {
  return evaluate_testset(
      [&gen](const TrainingSample& s) { return gen.forward(s.x_ap, s.x_lat); }, seg, manifest,
      out_dir, run_id, weights);
}

void write_report_csv(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path);
  out << "sample_id,psnr_db,ssim,rmse_hu,dsc_lung_gt,dsc_liver_gt,dsc_bone_gt,dsc_mean_gt,"
         "dsc_lung_s,dsc_liver_s,dsc_bone_s,dsc_mean_s\n";
  out.precision(17);
  auto row = [&](const SampleMetrics& m) {
    out << m.sample_id << "," << m.psnr_db << "," << m.ssim << "," << m.rmse_hu;
    for (int o = 0; o < 3; ++o) out << "," << m.dsc_gt[o];
    out << "," << m.dsc_mean_gt;
    for (int o = 0; o < 3; ++o) out << "," << m.dsc_s[o];
    out << "," << m.dsc_mean_s << "\n";
  };
  for (const auto& m : report.samples) row(m);
  row(report.mean);
  if (!out) throw std::runtime_error("short write to " + path);
}

std::vector<SweepCell> sweep_grid(const std::vector<double>& lambda_s,
                                  const std::vector<double>& lambda_p) {
  std::vector<SweepCell> cells;
  for (double ls : lambda_s)
    for (double lp : lambda_p) {
      SweepCell c;
      c.lambda_s = ls;
      c.lambda_p = lp;
      std::ostringstream id;
      id << "ls" << ls << "_lp" << lp;
      c.run_id = id.str();
      cells.push_back(std::move(c));
    }
  return cells;
}

}  // namespace ctrecon
