#include "ctrecon/fanbeam.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace ctrecon {

namespace {

constexpr double kDegToRad = M_PI / 180.0;
constexpr double kCoverageMargin = 1.1;

struct Vec2 {
  double x, y;
};

struct ViewFrame {
  Vec2 source;   // source position
  Vec2 axis;     // unit vector from source toward the detector center
  Vec2 tangent;  // unit vector along the detector
};

ViewFrame view_frame(const FanBeamGeometry& g) {
  const double a = g.source_angle_deg * kDegToRad;
  const double c = std::cos(a), s = std::sin(a);
  // rotate the 0-deg frame (source at (0,-SID), axis +y, tangent +x)
  ViewFrame f;
  f.source = {s * g.sid_mm, -c * g.sid_mm};
  f.axis = {-s, c};
  f.tangent = {c, s};
  return f;
}

// minimal detector span (mm) covering the inscribed FOV with margin
double required_span(double sid, double sdd, double fov) {
  const double h = 4.0 * sid * sid - fov * fov;
  if (h <= 0.0) return -1.0;
  return kCoverageMargin * 2.0 * sdd * fov / std::sqrt(h);
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

uint64_t FanBeamGeometry::fingerprint() const {
  uint64_t h = fnv1a(&sid_mm, sizeof sid_mm);
  h = fnv1a(&sdd_mm, sizeof sdd_mm, h);
  h = fnv1a(&n_detector_bins, sizeof n_detector_bins, h);
  h = fnv1a(&detector_pitch_mm, sizeof detector_pitch_mm, h);
  h = fnv1a(&grid_n, sizeof grid_n, h);
  h = fnv1a(&voxel_pitch_mm, sizeof voxel_pitch_mm, h);
  h = fnv1a(&source_angle_deg, sizeof source_angle_deg, h);
  return h;
}

FanBeamGeometry build_geometry(const GeometryConfig& config) {
  if (config.sid_mm <= 0 || config.sdd_mm <= config.sid_mm)
    throw std::invalid_argument("build_geometry: need sdd > sid > 0, got sid=" +
                                std::to_string(config.sid_mm) + " sdd=" +
                                std::to_string(config.sdd_mm));
  if (config.grid_n < 1 || config.voxel_pitch_mm <= 0)
    throw std::invalid_argument("build_geometry: grid_n and voxel_pitch must be positive");

  FanBeamGeometry g;
  g.sid_mm = config.sid_mm;
  g.sdd_mm = config.sdd_mm;
  g.grid_n = config.grid_n;
  g.voxel_pitch_mm = config.voxel_pitch_mm;
  g.source_angle_deg = config.source_angle_deg;
  g.n_detector_bins = config.n_detector_bins > 0
                          ? config.n_detector_bins
                          : (920 * config.grid_n + 127) / 128;  // 920 rays at full scale N=128

  const double fov = double(g.grid_n) * g.voxel_pitch_mm;
  const double span = required_span(g.sid_mm, g.sdd_mm, fov);
  if (span < 0.0)
    throw std::invalid_argument(
        "build_geometry: grid FOV " + std::to_string(fov) +
        " mm reaches the source orbit (2*SID = " + std::to_string(2 * g.sid_mm) +
        " mm); no fan can cover it");
  if (config.detector_pitch_mm > 0) {
    g.detector_pitch_mm = config.detector_pitch_mm;
  } else {
    // derive from the grid diagonal so even corner voxels project inside the
    // detector; the constructive check below only demands the inscribed FOV
    const double diag = fov * std::sqrt(2.0);
    const double diag_span = required_span(g.sid_mm, g.sdd_mm, diag);
    g.detector_pitch_mm = (diag_span > 0 ? diag_span : span) / double(g.n_detector_bins);
  }

  const double have = double(g.n_detector_bins) * g.detector_pitch_mm;
  if (have < span * (1.0 - 1e-12))
    throw std::invalid_argument("build_geometry: detector span " + std::to_string(have) +
                                " mm cannot cover the FOV with 10% margin (need " +
                                std::to_string(span) + " mm)");
  return g;
}

FanBeamGeometry with_angle(FanBeamGeometry g, double angle_deg) {
  g.source_angle_deg = angle_deg;
  return g;
}

FanBeamGeometry scale_geometry(const FanBeamGeometry& g, int level) {
  if (level < 0) throw std::invalid_argument("scale_geometry: negative level");
  const int64_t f = int64_t(1) << level;
  if (g.grid_n % f != 0 || g.n_detector_bins % f != 0)
    throw std::invalid_argument("scale_geometry: N=" + std::to_string(g.grid_n) + " U=" +
                                std::to_string(g.n_detector_bins) + " not divisible by 2^" +
                                std::to_string(level));
  FanBeamGeometry s = g;
  s.grid_n /= f;
  s.n_detector_bins /= f;
  s.voxel_pitch_mm *= double(f);
  s.detector_pitch_mm *= double(f);
  return s;
}

std::shared_ptr<const SystemMatrix> build_backprojection_matrix(const FanBeamGeometry& g) {
  const ViewFrame f = view_frame(g);
  const int64_t n = g.grid_n;
  const int64_t u_bins = g.n_detector_bins;
  const double half = (double(n) - 1.0) / 2.0;
  const double u_center = (double(u_bins) - 1.0) / 2.0;

  auto m = std::make_shared<SystemMatrix>();
  m->n_rows = n * n;
  m->n_cols = u_bins;
  m->fingerprint = g.fingerprint();
  m->row_offsets.reserve(n * n + 1);
  m->row_offsets.push_back(0);
  for (int64_t iy = 0; iy < n; ++iy) {
    for (int64_t ix = 0; ix < n; ++ix) {
      const double vx = (double(ix) - half) * g.voxel_pitch_mm;
      const double vy = (double(iy) - half) * g.voxel_pitch_mm;
      const double wx = vx - f.source.x;
      const double wy = vy - f.source.y;
      const double depth = wx * f.axis.x + wy * f.axis.y;
      if (depth > 1e-9) {
        const double u_mm = g.sdd_mm * (wx * f.tangent.x + wy * f.tangent.y) / depth;
        const double u = u_mm / g.detector_pitch_mm + u_center;
        if (u >= 0.0 && u <= double(u_bins) - 1.0) {
          const auto i0 = int64_t(std::floor(u));
          const double frac = u - double(i0);
          if (1.0 - frac > 0.0) {
            m->col_indices.push_back(uint32_t(i0));
            m->weights.push_back(1.0 - frac);
          }
          if (frac > 0.0 && i0 + 1 < u_bins) {
            m->col_indices.push_back(uint32_t(i0 + 1));
            m->weights.push_back(frac);
          }
        }
      }
      m->row_offsets.push_back(m->weights.size());
    }
  }
  return m;
}

std::shared_ptr<const SystemMatrix> build_forward_matrix(const FanBeamGeometry& g) {
  const ViewFrame f = view_frame(g);
  const int64_t n = g.grid_n;
  const int64_t u_bins = g.n_detector_bins;
  const double half = (double(n) - 1.0) / 2.0;
  const double u_center = (double(u_bins) - 1.0) / 2.0;
  const double grid_half = double(n) * g.voxel_pitch_mm / 2.0;
  const double step = g.voxel_pitch_mm / 2.0;

  auto m = std::make_shared<SystemMatrix>();
  m->n_rows = u_bins;
  m->n_cols = n * n;
  m->fingerprint = g.fingerprint();
  m->row_offsets.reserve(u_bins + 1);
  m->row_offsets.push_back(0);

  std::vector<double> row(n * n);
  for (int64_t u = 0; u < u_bins; ++u) {
    std::fill(row.begin(), row.end(), 0.0);
    const double u_mm = (double(u) - u_center) * g.detector_pitch_mm;
    const Vec2 bin{f.source.x + g.sdd_mm * f.axis.x + u_mm * f.tangent.x,
                   f.source.y + g.sdd_mm * f.axis.y + u_mm * f.tangent.y};
    double dx = bin.x - f.source.x, dy = bin.y - f.source.y;
    const double len = std::sqrt(dx * dx + dy * dy);
    dx /= len;
    dy /= len;
    // AABB entry/exit for the square grid
    double t0 = 0.0, t1 = len;
    for (int axis = 0; axis < 2; ++axis) {
      const double o = axis == 0 ? f.source.x : f.source.y;
      const double d = axis == 0 ? dx : dy;
      if (std::abs(d) < 1e-12) {
        if (o < -grid_half || o > grid_half) t0 = t1 + 1.0;
      } else {
        double ta = (-grid_half - o) / d;
        double tb = (grid_half - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
      }
    }
    if (t0 < t1) {
      const auto n_steps = int64_t(std::ceil((t1 - t0) / step));
      for (int64_t k = 0; k < n_steps; ++k) {
        const double t = t0 + (double(k) + 0.5) * step;
        if (t >= t1) break;
        const double qx = f.source.x + t * dx;
        const double qy = f.source.y + t * dy;
        const double gx = qx / g.voxel_pitch_mm + half;
        const double gy = qy / g.voxel_pitch_mm + half;
        const auto ix0 = int64_t(std::floor(gx));
        const auto iy0 = int64_t(std::floor(gy));
        const double fx = gx - double(ix0);
        const double fy = gy - double(iy0);
        const double w00 = (1 - fx) * (1 - fy), w10 = fx * (1 - fy);
        const double w01 = (1 - fx) * fy, w11 = fx * fy;
        auto deposit = [&](int64_t ix, int64_t iy, double w) {
          if (ix >= 0 && ix < n && iy >= 0 && iy < n && w > 0.0)
            row[iy * n + ix] += w * step;
        };
        deposit(ix0, iy0, w00);
        deposit(ix0 + 1, iy0, w10);
        deposit(ix0, iy0 + 1, w01);
        deposit(ix0 + 1, iy0 + 1, w11);
      }
    }
    for (int64_t v = 0; v < n * n; ++v)
      if (row[v] != 0.0) {
        m->col_indices.push_back(uint32_t(v));
        m->weights.push_back(row[v]);
      }
    m->row_offsets.push_back(m->weights.size());
  }
  return m;
}

Projector make_projector(const FanBeamGeometry& g) {
  Projector p;
  p.geometry = g;
  p.forward = build_forward_matrix(g);
  p.norm_const = double(g.grid_n) * g.voxel_pitch_mm;
  return p;
}

ProjectorPair make_projector_pair(const FanBeamGeometry& base) {
  return {make_projector(with_angle(base, kApAngleDeg)),
          make_projector(with_angle(base, kLatAngleDeg))};
}

Tensor project_volume(const Projector& p, const Tensor& vol) {
  const int64_t n = p.geometry.grid_n;
  const int64_t u_bins = p.geometry.n_detector_bins;
  if (vol.shape().size() != 3 || vol.shape()[0] != n || vol.shape()[1] != n)
    throw std::invalid_argument("project_volume: volume shape " + shape_str(vol.shape()) +
                                " does not match geometry grid " + std::to_string(n));
  const int64_t depth = vol.shape()[2];
  const auto& m = *p.forward;
  const double inv_norm = 1.0 / p.norm_const;

  std::vector<double> out(u_bins * depth, 0.0);
  for (int64_t u = 0; u < u_bins; ++u) {
    double* out_row = out.data() + u * depth;
    for (uint64_t k = m.row_offsets[u]; k < m.row_offsets[u + 1]; ++k) {
      const double w = m.weights[k] * inv_norm;
      const double* src = vol.data().data() + int64_t(m.col_indices[k]) * depth;
      for (int64_t z = 0; z < depth; ++z) out_row[z] += w * src[z];
    }
  }

  auto fwd = p.forward;
  auto vol_impl = vol.impl();
  return detail::make_op({u_bins, depth}, std::move(out), {vol},
                         [fwd, vol_impl, u_bins, depth, inv_norm](detail::TensorImpl& self) {
    vol_impl->ensure_grad();
    const auto& m = *fwd;
    for (int64_t u = 0; u < u_bins; ++u) {
      const double* g_row = self.grad.data() + u * depth;
      for (uint64_t k = m.row_offsets[u]; k < m.row_offsets[u + 1]; ++k) {
        const double w = m.weights[k] * inv_norm;
        double* dst = vol_impl->grad.data() + int64_t(m.col_indices[k]) * depth;
        for (int64_t z = 0; z < depth; ++z) dst[z] += w * g_row[z];
      }
    }
  });
}

Tensor lift_2d_to_3d(const std::shared_ptr<const SystemMatrix>& t_ap,
                     const std::shared_ptr<const SystemMatrix>& t_lat, const Tensor& feat_ap,
                     const Tensor& feat_lat) {
  if (feat_ap.shape() != feat_lat.shape() || feat_ap.shape().size() != 3)
    throw std::invalid_argument("lift_2d_to_3d: feature shapes must match and be (C,U,Z), got " +
                                shape_str(feat_ap.shape()) + " and " + shape_str(feat_lat.shape()));
  const int64_t channels = feat_ap.shape()[0];
  const int64_t u_bins = feat_ap.shape()[1];
  const int64_t depth = feat_ap.shape()[2];
  const auto grid = int64_t(std::llround(std::sqrt(double(t_ap->n_rows))));
  if (t_ap->n_cols != u_bins || t_lat->n_cols != u_bins || grid * grid != t_ap->n_rows ||
      t_lat->n_rows != t_ap->n_rows)
    throw std::invalid_argument(
        "lift_2d_to_3d: matrix scale mismatch for feature shape " + shape_str(feat_ap.shape()) +
        " (matrix " + std::to_string(t_ap->n_rows) + "x" + std::to_string(t_ap->n_cols) + ")");

  // out[c, v, z] = (T_ap f_ap + T_lat f_lat) / 2, applied per channel and z-row
  std::vector<double> out(channels * grid * grid * depth, 0.0);
  auto accumulate = [&](const SystemMatrix& m, const std::vector<double>& feat, double scale,
                        std::vector<double>& dst) {
    for (int64_t c = 0; c < channels; ++c) {
      const double* f_c = feat.data() + c * u_bins * depth;
      double* o_c = dst.data() + c * grid * grid * depth;
      for (int64_t v = 0; v < grid * grid; ++v) {
        double* o_v = o_c + v * depth;
        for (uint64_t k = m.row_offsets[v]; k < m.row_offsets[v + 1]; ++k) {
          const double w = m.weights[k] * scale;
          const double* f_u = f_c + int64_t(m.col_indices[k]) * depth;
          for (int64_t z = 0; z < depth; ++z) o_v[z] += w * f_u[z];
        }
      }
    }
  };
  accumulate(*t_ap, feat_ap.data(), 0.5, out);
  accumulate(*t_lat, feat_lat.data(), 0.5, out);

  auto ap_impl = feat_ap.impl();
  auto lat_impl = feat_lat.impl();
  return detail::make_op({channels, grid, grid, depth}, std::move(out), {feat_ap, feat_lat},
                         [t_ap, t_lat, ap_impl, lat_impl, channels, u_bins, grid,
                          depth](detail::TensorImpl& self) {
    auto scatter = [&](const SystemMatrix& m, detail::TensorImpl& feat) {
      feat.ensure_grad();
      for (int64_t c = 0; c < channels; ++c) {
        const double* g_c = self.grad.data() + c * grid * grid * depth;
        double* f_c = feat.grad.data() + c * u_bins * depth;
        for (int64_t v = 0; v < grid * grid; ++v) {
          const double* g_v = g_c + v * depth;
          for (uint64_t k = m.row_offsets[v]; k < m.row_offsets[v + 1]; ++k) {
            const double w = m.weights[k] * 0.5;
            double* f_u = f_c + int64_t(m.col_indices[k]) * depth;
            for (int64_t z = 0; z < depth; ++z) f_u[z] += w * g_v[z];
          }
        }
      }
    };
    if (ap_impl->requires_grad) scatter(*t_ap, *ap_impl);
    if (lat_impl->requires_grad) scatter(*t_lat, *lat_impl);
  });
}

// ---------------------------------------------------------------------------
// disk cache
// ---------------------------------------------------------------------------

void save_matrix(const std::string& path, const SystemMatrix& m) {
  nlohmann::json header;
  header["fingerprint"] = m.fingerprint;
  header["n_rows"] = m.n_rows;
  header["n_cols"] = m.n_cols;
  header["nnz"] = m.nnz();
  header["byte_order"] = "LE";
  std::ofstream jf(path + ".json");
  if (!jf) throw std::runtime_error("save_matrix: cannot write " + path + ".json");
  jf << header.dump(2) << "\n";
  std::ofstream bf(path + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("save_matrix: cannot write " + path + ".bin");
  bf.write(reinterpret_cast<const char*>(m.row_offsets.data()),
           std::streamsize(m.row_offsets.size() * sizeof(uint64_t)));
  bf.write(reinterpret_cast<const char*>(m.col_indices.data()),
           std::streamsize(m.col_indices.size() * sizeof(uint32_t)));
  bf.write(reinterpret_cast<const char*>(m.weights.data()),
           std::streamsize(m.weights.size() * sizeof(double)));
}

std::optional<SystemMatrix> load_matrix(const std::string& path, uint64_t expected_fingerprint) {
  std::ifstream jf(path + ".json");
  if (!jf) return std::nullopt;
  nlohmann::json header;
  try {
    jf >> header;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
  if (!header.contains("fingerprint") || header["fingerprint"].get<uint64_t>() != expected_fingerprint)
    return std::nullopt;
  SystemMatrix m;
  m.fingerprint = expected_fingerprint;
  m.n_rows = header["n_rows"].get<int64_t>();
  m.n_cols = header["n_cols"].get<int64_t>();
  const auto nnz = header["nnz"].get<int64_t>();
  m.row_offsets.resize(m.n_rows + 1);
  m.col_indices.resize(nnz);
  m.weights.resize(nnz);
  std::ifstream bf(path + ".bin", std::ios::binary);
  if (!bf) return std::nullopt;
  bf.read(reinterpret_cast<char*>(m.row_offsets.data()),
          std::streamsize(m.row_offsets.size() * sizeof(uint64_t)));
  bf.read(reinterpret_cast<char*>(m.col_indices.data()),
          std::streamsize(m.col_indices.size() * sizeof(uint32_t)));
  bf.read(reinterpret_cast<char*>(m.weights.data()),
          std::streamsize(m.weights.size() * sizeof(double)));
  if (!bf) return std::nullopt;
  return m;
}

}  // namespace ctrecon
