#include "ctrecon/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "ctrecon/rng.hpp"
#include "ctrecon/volume_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace ctrecon {

namespace {

struct Ellipse2 {
  double cx, cy;      // body-frame center, voxel units
  double ax, ay;      // semi-axes, voxel units
};

struct Ellipsoid3 {
  double cx, cy, cz;
  double ax, ay, az;
};

struct NoiseMode {
  double amp;
  double kx, ky, kz;
  double phase;
};

bool inside(const Ellipsoid3& e, double u, double v, double z) {
  const double du = (u - e.cx) / e.ax;
  const double dv = (v - e.cy) / e.ay;
  const double dz = (z - e.cz) / e.az;
  return du * du + dv * dv + dz * dz <= 1.0;
}

}  // namespace

PhantomSample generate_phantom(uint64_t seed, int64_t grid_n, int64_t depth,
                               double voxel_pitch_mm) {
  if (grid_n < 16) throw std::invalid_argument("phantom grid too small: N=" + std::to_string(grid_n));
  if (depth < 8) throw std::invalid_argument("phantom grid too small: Z=" + std::to_string(depth));
  if (voxel_pitch_mm <= 0.0) throw std::invalid_argument("voxel pitch must be positive");

  const double n = static_cast<double>(grid_n);
  const double nz = static_cast<double>(depth);
  Rng rng(seed);
  auto jitter = [&](double base, double frac) { return base * (1.0 + rng.uniform(-frac, frac)); };

  // All draws happen up front in a fixed order so the voxel sweep is a pure
  // function of the drawn parameters.
  const double body_ax = jitter(0.40 * n, 0.10);
  const double body_ay = jitter(0.30 * n, 0.10);
  const double body_cx = rng.uniform(-0.05, 0.05) * n;
  const double body_cy = rng.uniform(-0.05, 0.05) * n;
  const double rot = rng.uniform(-5.0, 5.0) * std::numbers::pi / 180.0;
  const double cos_r = std::cos(rot), sin_r = std::sin(rot);

  auto draw_lung = [&](double sign) {
    Ellipsoid3 e;
    e.ax = jitter(0.13 * n, 0.10);
    e.ay = jitter(0.19 * n, 0.10);
    e.az = jitter(0.40 * nz, 0.10);
    e.cx = sign * 0.15 * n + rng.uniform(-0.02, 0.02) * n;
    e.cy = -0.03 * n + rng.uniform(-0.02, 0.02) * n;
    e.cz = 0.50 * nz;
    return e;
  };
  const Ellipsoid3 lung_l = draw_lung(-1.0);
  const Ellipsoid3 lung_r = draw_lung(+1.0);

  Ellipsoid3 liver;
  liver.ax = jitter(0.15 * n, 0.10);
  liver.ay = jitter(0.13 * n, 0.10);
  liver.az = jitter(0.16 * nz, 0.10);
  liver.cx = -0.16 * n + rng.uniform(-0.02, 0.02) * n;
  liver.cy = 0.10 * n + rng.uniform(-0.02, 0.02) * n;
  liver.cz = 0.22 * nz + rng.uniform(-0.02, 0.02) * nz;

  const double spine_r = jitter(0.04 * n, 0.10);
  const double spine_cy = 0.20 * n + rng.uniform(-0.01, 0.01) * n;
  const double vert_h = 0.10 * nz;
  const double vert_period = 1.2 * vert_h;  // 20%-height gap between vertebrae
  const double vert_phase = rng.uniform(0.0, vert_period);

  constexpr int kNumRibs = 5;
  constexpr int kNumNoiseModes = 6;
  std::vector<NoiseMode> modes(kNumNoiseModes);
  double amp_total = 0.0;
  for (auto& m : modes) {
    m.amp = rng.uniform(0.25, 1.0);
    amp_total += m.amp;
    const double two_pi = 2.0 * std::numbers::pi;
    m.kx = rng.uniform(0.5, 3.0) * two_pi / n;
    m.ky = rng.uniform(0.5, 3.0) * two_pi / n;
    m.kz = rng.uniform(0.5, 3.0) * two_pi / nz;
    m.phase = rng.uniform(0.0, two_pi);
  }
  for (auto& m : modes) m.amp *= 20.0 / amp_total;  // bounds the field to +-20 HU

  PhantomSample s;
  s.volume.grid_n = grid_n;
  s.volume.depth = depth;
  s.volume.voxel_pitch_mm = voxel_pitch_mm;
  s.volume.hu.assign(static_cast<size_t>(grid_n * grid_n * depth), -1000.0);
  s.mask.grid_n = grid_n;
  s.mask.depth = depth;
  s.mask.labels.assign(s.volume.hu.size(), kLabelBackground);

  const double half = (n - 1.0) / 2.0;
  for (int64_t iy = 0; iy < grid_n; ++iy) {
    for (int64_t ix = 0; ix < grid_n; ++ix) {
      const double x = static_cast<double>(ix) - half - body_cx;
      const double y = static_cast<double>(iy) - half - body_cy;
      // body-frame coordinates (rotation undone)
      const double u = cos_r * x + sin_r * y;
      const double v = -sin_r * x + cos_r * y;
      const double bu = u / body_ax, bv = v / body_ay;
      const double rho2 = bu * bu + bv * bv;
      if (rho2 > 1.0) continue;  // air stays -1000, label 0
      const double rho = std::sqrt(rho2);
      const double phi = std::atan2(bv, bu);
      const bool rib_ring = rho >= 0.80 && rho <= 0.88 &&
                            std::abs(phi + std::numbers::pi / 2.0) > 0.40;  // anterior gap
      const double du_sp = u, dv_sp = v - spine_cy;
      const bool in_spine_disc = du_sp * du_sp + dv_sp * dv_sp <= spine_r * spine_r;

      for (int64_t z = 0; z < depth; ++z) {
        const double zc = static_cast<double>(z) + 0.5;
        double hu = 40.0;
        uint8_t label = kLabelBackground;  // soft tissue carries no organ label
        if (inside(lung_l, u, v, zc) || inside(lung_r, u, v, zc)) {
          hu = -800.0;
          label = kLabelLung;
        }
        if (inside(liver, u, v, zc)) {
          hu = 60.0;
          label = kLabelLiver;
        }
        if (in_spine_disc) {
          const double phase = std::fmod(zc + vert_phase, vert_period);
          if (phase < vert_h) {
            hu = 700.0;
            label = kLabelBone;
          }
        }
        if (rib_ring) {
          for (int r = 0; r < kNumRibs; ++r) {
            const double zr = (0.15 + 0.15 * static_cast<double>(r)) * nz;
            if (std::abs(zc - zr) <= std::max(0.015 * nz, 0.75)) {
              hu = 700.0;
              label = kLabelBone;
              break;
            }
          }
        }
        double noise = 0.0;
        for (const auto& m : modes)
          noise += m.amp * std::cos(m.kx * u + m.ky * v + m.kz * zc + m.phase);
        const size_t idx = static_cast<size_t>((iy * grid_n + ix) * depth + z);
        s.volume.hu[idx] = hu + noise;
        s.mask.labels[idx] = label;
      }
    }
  }
  return s;
}

Tensor hu_normalize(const Volume& v, int64_t* clamped_count) {
  std::vector<double> out(v.hu.size());
  int64_t clamped = 0;
  for (size_t i = 0; i < v.hu.size(); ++i) {
    double hu = v.hu[i];
    if (hu < kHuMin || hu > kHuMax) {
      hu = std::clamp(hu, kHuMin, kHuMax);
      ++clamped;
    }
    out[i] = (hu + kHuOffset) / kHuSpan;
  }
  if (clamped_count) *clamped_count = clamped;
  return Tensor::from_data({v.grid_n, v.grid_n, v.depth}, std::move(out));
}

Volume hu_denormalize(const Tensor& t, double voxel_pitch_mm) {
  const Shape& sh = t.shape();
  if (sh.size() != 3 || sh[0] != sh[1])
    throw std::invalid_argument("hu_denormalize expects a (N, N, Z) tensor, got " + shape_str(sh));
  Volume v;
  v.grid_n = sh[0];
  v.depth = sh[2];
  v.voxel_pitch_mm = voxel_pitch_mm;
  v.hu.resize(t.data().size());
  for (size_t i = 0; i < v.hu.size(); ++i) v.hu[i] = t.data()[i] * kHuSpan - kHuOffset;
  return v;
}

std::pair<Tensor, Tensor> simulate_projection_pair(const Volume& v, const ProjectorPair& pair) {
  const auto& g = pair.ap.geometry;
  if (v.grid_n != g.grid_n || v.voxel_pitch_mm != g.voxel_pitch_mm)
    throw std::invalid_argument("volume grid does not match projector geometry");
  Tensor y = hu_normalize(v);
  Tensor ap = clamp(project_volume(pair.ap, y), 0.0, 1.0);
  Tensor lat = clamp(project_volume(pair.lat, y), 0.0, 1.0);
  return {ap, lat};
}

void write_volume(const Volume& v, const std::string& path_prefix) {
  BlobHeader h;
  h.shape = {v.grid_n, v.grid_n, v.depth};
  h.voxel_pitch_mm = v.voxel_pitch_mm;
  h.dtype = "f64";
  h.role = "volume_hu";
  write_blob_f64(path_prefix, h, v.hu);
}

Volume read_volume(const std::string& path_prefix) {
  auto [h, data] = read_blob_f64(path_prefix, "volume_hu");
  if (h.shape.size() != 3 || h.shape[0] != h.shape[1])
    throw FormatMismatchError("volume " + path_prefix + " is not (N, N, Z)");
  Volume v;
  v.grid_n = h.shape[0];
  v.depth = h.shape[2];
  v.voxel_pitch_mm = h.voxel_pitch_mm;
  v.hu = std::move(data);
  return v;
}

void write_mask(const LabelMask& m, const std::string& path_prefix) {
  BlobHeader h;
  h.shape = {m.grid_n, m.grid_n, m.depth};
  h.dtype = "u8";
  h.role = "mask";
  write_blob_u8(path_prefix, h, m.labels);
}

LabelMask read_mask(const std::string& path_prefix) {
  auto [h, data] = read_blob_u8(path_prefix, "mask");
  if (h.shape.size() != 3 || h.shape[0] != h.shape[1])
    throw FormatMismatchError("mask " + path_prefix + " is not (N, N, Z)");
  for (uint8_t l : data)
    if (l >= kNumLabels) throw FormatMismatchError("mask " + path_prefix + " holds label > 3");
  LabelMask m;
  m.grid_n = h.shape[0];
  m.depth = h.shape[2];
  m.labels = std::move(data);
  return m;
}

namespace {

nlohmann::json geometry_to_json(const GeometryConfig& g) {
  return {{"sid_mm", g.sid_mm},
          {"sdd_mm", g.sdd_mm},
          {"grid_n", g.grid_n},
          {"voxel_pitch_mm", g.voxel_pitch_mm},
          {"n_detector_bins", g.n_detector_bins},
          {"detector_pitch_mm", g.detector_pitch_mm}};
}

GeometryConfig geometry_from_json(const nlohmann::json& j) {
  GeometryConfig g;
  g.sid_mm = j.at("sid_mm").get<double>();
  g.sdd_mm = j.at("sdd_mm").get<double>();
  g.grid_n = j.at("grid_n").get<int64_t>();
  g.voxel_pitch_mm = j.at("voxel_pitch_mm").get<double>();
  g.n_detector_bins = j.at("n_detector_bins").get<int64_t>();
  g.detector_pitch_mm = j.at("detector_pitch_mm").get<double>();
  return g;
}

nlohmann::json entries_to_json(const std::vector<SampleEntry>& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : v)
    arr.push_back({{"id", e.id}, {"seed", e.seed}, {"path_prefix", e.path_prefix}});
  return arr;
}

std::vector<SampleEntry> entries_from_json(const nlohmann::json& arr) {
  std::vector<SampleEntry> v;
  for (const auto& j : arr) {
    SampleEntry e;
    e.id = j.at("id").get<std::string>();
    e.seed = j.at("seed").get<uint64_t>();
    e.path_prefix = j.at("path_prefix").get<std::string>();
    v.push_back(std::move(e));
  }
  return v;
}

}  // namespace

void save_manifest(const CorpusManifest& m, const std::string& path) {
  nlohmann::json j;
  j["corpus_seed"] = m.corpus_seed;
  j["grid_n"] = m.grid_n;
  j["depth"] = m.depth;
  j["voxel_pitch_mm"] = m.voxel_pitch_mm;
  j["norm_offset"] = m.norm_offset;
  j["norm_span"] = m.norm_span;
  j["geometry"] = geometry_to_json(m.geometry);
  j["recon_train"] = entries_to_json(m.recon_train);
  j["recon_test"] = entries_to_json(m.recon_test);
  j["seg_train"] = entries_to_json(m.seg_train);
  j["seg_test"] = entries_to_json(m.seg_test);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path);
  out << j.dump(2) << "\n";
}

CorpusManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorruptHeaderError("missing manifest " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("unparseable manifest " + path + ": " + e.what());
  }
  CorpusManifest m;
  try {
    m.corpus_seed = j.at("corpus_seed").get<uint64_t>();
    m.grid_n = j.at("grid_n").get<int64_t>();
    m.depth = j.at("depth").get<int64_t>();
    m.voxel_pitch_mm = j.at("voxel_pitch_mm").get<double>();
    m.norm_offset = j.at("norm_offset").get<double>();
    m.norm_span = j.at("norm_span").get<double>();
    m.geometry = geometry_from_json(j.at("geometry"));
    m.recon_train = entries_from_json(j.at("recon_train"));
    m.recon_test = entries_from_json(j.at("recon_test"));
    m.seg_train = entries_from_json(j.at("seg_train"));
    m.seg_test = entries_from_json(j.at("seg_test"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError("incomplete manifest " + path + ": " + e.what());
  }
  m.root_dir = fs::path(path).parent_path().string();
  return m;
}

CorpusManifest make_corpus(const CorpusConfig& config) {
  if (config.recon_train < 1 || config.recon_test < 1 || config.seg_train < 1 ||
      config.seg_test < 1)
    throw std::invalid_argument("corpus counts must be >= 1");
  constexpr int64_t kSeedStride = 100000;
  if (config.recon_train >= kSeedStride || config.recon_test >= kSeedStride ||
      config.seg_train >= kSeedStride || config.seg_test >= kSeedStride)
    throw std::invalid_argument("corpus counts would overlap seed ranges");
  const fs::path root(config.out_dir);
  const fs::path manifest_path = root / "manifest.json";
  if (fs::exists(manifest_path) && !config.overwrite)
    throw std::runtime_error("corpus already exists at " + config.out_dir +
                             " (pass overwrite to replace)");
  std::error_code ec;
  fs::create_directories(root, ec);
  for (const char* d : {"recon/train", "recon/test", "seg/train", "seg/test"})
    fs::create_directories(root / d, ec);
  if (ec) throw std::runtime_error("cannot create corpus directories under " + config.out_dir);

  GeometryConfig gc = config.geometry;
  gc.grid_n = config.grid_n;
  gc.voxel_pitch_mm = config.voxel_pitch_mm;
  const ProjectorPair pair = make_projector_pair(build_geometry(gc));

  CorpusManifest m;
  m.corpus_seed = config.corpus_seed;
  m.grid_n = config.grid_n;
  m.depth = config.depth;
  m.voxel_pitch_mm = config.voxel_pitch_mm;
  m.geometry = gc;
  m.root_dir = root.string();

  auto emit = [&](const std::string& split, int64_t count, uint64_t seed_base,
                  bool with_projections, std::vector<SampleEntry>& out) {
    for (int64_t i = 0; i < count; ++i) {
      SampleEntry e;
      e.seed = config.corpus_seed + seed_base + static_cast<uint64_t>(i);
      char idx[24];
      std::snprintf(idx, sizeof idx, "%04lld", static_cast<long long>(i));
      const std::string tag = split;  // e.g. "recon/train"
      std::string id = tag;
      std::replace(id.begin(), id.end(), '/', '-');
      e.id = id + "-" + idx;
      e.path_prefix = tag + "/s" + idx;
      const PhantomSample s =
          generate_phantom(e.seed, config.grid_n, config.depth, config.voxel_pitch_mm);
      const std::string prefix = (root / e.path_prefix).string();
      write_volume(s.volume, prefix + ".vol");
      write_mask(s.mask, prefix + ".mask");
      if (with_projections) {
        auto [ap, lat] = simulate_projection_pair(s.volume, pair);
        BlobHeader h;
        h.shape = ap.shape();
        h.voxel_pitch_mm = pair.ap.geometry.detector_pitch_mm;
        h.dtype = "f64";
        h.role = "projection";
        write_blob_f64(prefix + ".ap", h, ap.data());
        write_blob_f64(prefix + ".lat", h, lat.data());
      }
      out.push_back(std::move(e));
    }
  };

  emit("recon/train", config.recon_train, 1, true, m.recon_train);
  emit("recon/test", config.recon_test, 1 + kSeedStride, true, m.recon_test);
  emit("seg/train", config.seg_train, 1 + 2 * kSeedStride, false, m.seg_train);
  emit("seg/test", config.seg_test, 1 + 3 * kSeedStride, false, m.seg_test);

  save_manifest(m, manifest_path.string());
  return m;
}

TrainingSample load_training_sample(const CorpusManifest& m, const SampleEntry& e,
                                    bool has_projections) {
  const std::string prefix = (fs::path(m.root_dir) / e.path_prefix).string();
  TrainingSample s;
  s.id = e.id;
  s.seed = e.seed;
  Volume v = read_volume(prefix + ".vol");
  s.y = hu_normalize(v);
  s.mask = read_mask(prefix + ".mask");
  if (has_projections) {
    auto [ha, ap] = read_blob_f64(prefix + ".ap", "projection");
    auto [hl, lat] = read_blob_f64(prefix + ".lat", "projection");
    s.x_ap = Tensor::from_data(ha.shape, std::move(ap));
    s.x_lat = Tensor::from_data(hl.shape, std::move(lat));
  }
  return s;
}

Tensor mask_to_onehot(const LabelMask& m) {
  const int64_t voxels = m.grid_n * m.grid_n * m.depth;
  std::vector<double> out(static_cast<size_t>(kNumLabels * voxels), 0.0);
  for (int64_t i = 0; i < voxels; ++i)
    out[static_cast<size_t>(m.labels[static_cast<size_t>(i)]) * voxels + i] = 1.0;
  return Tensor::from_data({kNumLabels, m.grid_n, m.grid_n, m.depth}, std::move(out));
}

LabelMask onehot_to_mask(const Tensor& scores) {
  const Shape& sh = scores.shape();
  if (sh.size() != 4 || sh[0] != kNumLabels || sh[1] != sh[2])
    throw std::invalid_argument("onehot_to_mask expects (4, N, N, Z) scores, got " +
                                shape_str(sh));
  LabelMask m;
  m.grid_n = sh[1];
  m.depth = sh[3];
  const int64_t voxels = sh[1] * sh[2] * sh[3];
  m.labels.assign(static_cast<size_t>(voxels), 0);
  const auto& d = scores.data();
  for (int64_t i = 0; i < voxels; ++i) {
    int best = 0;
    double best_v = d[static_cast<size_t>(i)];
    for (int c = 1; c < kNumLabels; ++c) {
      const double v = d[static_cast<size_t>(c * voxels + i)];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    m.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
  }
  return m;
}

}  // namespace ctrecon
