#include "ctrecon/networks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ctrecon/rng.hpp"

namespace ctrecon {

namespace {

int64_t pow2(int level) { return int64_t{1} << level; }

void check_divisible(const char* what, int64_t value, int levels) {
  if (value % pow2(levels) != 0)
    throw std::invalid_argument(std::string(what) + "=" + std::to_string(value) +
                                " not divisible by 2^" + std::to_string(levels));
}

// Kaiming-uniform fan-in init for leaky-relu stacks.
Tensor he_uniform(Rng& rng, Shape shape, int64_t fan_in, bool requires_grad) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// Orthogonal draw: whichever of rows/columns is the smaller set comes out
// orthonormal (Gram-Schmidt over Gaussian vectors), scaled by sqrt(2).
Tensor orthogonal_init(Rng& rng, Shape shape, int64_t rows, int64_t cols) {
  const int64_t dim = std::max(rows, cols);
  const int64_t count = std::min(rows, cols);
  std::vector<std::vector<double>> basis;
  basis.reserve(static_cast<size_t>(count));
  while (static_cast<int64_t>(basis.size()) < count) {
    std::vector<double> v(static_cast<size_t>(dim));
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double dot = 0.0;
      for (int64_t i = 0; i < dim; ++i) dot += v[i] * b[i];
      for (int64_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;  // rare near-dependent draw; redraw
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  const double gain = std::sqrt(2.0);
  std::vector<double> data(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) {
      const double v = rows <= cols ? basis[size_t(r)][size_t(c)] : basis[size_t(c)][size_t(r)];
      data[static_cast<size_t>(r * cols + c)] = gain * v;
    }
  return Tensor::from_data(std::move(shape), std::move(data), false);
}

Tensor find_param(const std::vector<NamedParam>& params, const std::string& name) {
  for (const auto& p : params)
    if (p.name == name) return p.tensor;
  throw std::logic_error("unknown parameter " + name);
}

int64_t count_params(const std::vector<NamedParam>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace

// --- GeneratorNet ---

GeneratorNet::GeneratorNet(const GeneratorConfig& config) : config_(config) {
  const int L = config.levels;
  if (L < 1) throw std::invalid_argument("generator needs at least 1 level");
  if (static_cast<int>(config.widths.size()) != L + 1)
    throw std::invalid_argument("generator widths must list levels+1 entries");
  const auto& g = config.geometry;
  check_divisible("n_detector_bins", g.n_detector_bins, L);
  check_divisible("grid_n", g.grid_n, L);
  check_divisible("depth_z", config.depth_z, L);

  Rng rng(config.seed);
  auto add_conv = [&](const std::string& name, int64_t cout, int64_t cin, int64_t k, int dims) {
    Shape ks = dims == 2 ? Shape{cout, cin, k, k} : Shape{cout, cin, k, k, k};
    const int64_t fan_in = cin * (dims == 2 ? k * k : k * k * k);
    params_.push_back({name + ".w", he_uniform(rng, std::move(ks), fan_in, true)});
    params_.push_back({name + ".b", Tensor::zeros({cout}, true)});
  };

  for (const char* view : {"ap", "lat"})
    for (int k = 0; k <= L; ++k)
      add_conv("g.enc_" + std::string(view) + "." + std::to_string(k), config.widths[size_t(k)],
               k == 0 ? 1 : config.widths[size_t(k - 1)], 3, 2);
  add_conv("g.bott", config.widths[size_t(L)], config.widths[size_t(L)], 3, 3);
  for (int k = L - 1; k >= 0; --k) {
    const int64_t c_hi = config.widths[size_t(k + 1)];
    Shape up_shape{c_hi, c_hi, 2, 2, 2};
    params_.push_back({"g.up." + std::to_string(k) + ".w",
                       he_uniform(rng, std::move(up_shape), c_hi * 8, true)});
    add_conv("g.dec." + std::to_string(k), config.widths[size_t(k)],
             c_hi + config.widths[size_t(k)], 3, 3);
  }
  add_conv("g.head", 1, config.widths[0], 1, 3);

  lifts_.resize(static_cast<size_t>(L + 1));
  for (int k = 0; k <= L; ++k) {
    const FanBeamGeometry gk = scale_geometry(g, k);
    auto& lv = lifts_[size_t(k)];
    lv.t_ap = build_backprojection_matrix(with_angle(gk, kApAngleDeg));
    lv.t_lat = build_backprojection_matrix(with_angle(gk, kLatAngleDeg));
    lv.grid_n = gk.grid_n;
    lv.n_bins = gk.n_detector_bins;
  }
}

Tensor GeneratorNet::param(const std::string& name) const { return find_param(params_, name); }

int64_t GeneratorNet::parameter_count() const { return count_params(params_); }

Tensor GeneratorNet::forward(const Tensor& x_ap, const Tensor& x_lat) const {
  const int L = config_.levels;
  const int64_t u = config_.geometry.n_detector_bins;
  const int64_t z = config_.depth_z;
  for (const Tensor* x : {&x_ap, &x_lat})
    if (x->shape() != Shape{u, z})
      throw std::invalid_argument("lift level 0: projection shape " + shape_str(x->shape()) +
                                  " does not match geometry (" + std::to_string(u) + ", " +
                                  std::to_string(z) + ")");

  auto encode = [&](const Tensor& x, const char* view) {
    std::vector<Tensor> skips;
    Tensor h = reshape(x, {1, 1, u, z});
    for (int k = 0; k <= L; ++k) {
      if (k > 0) h = avg_pool2(h, 2);
      const std::string name = "g.enc_" + std::string(view) + "." + std::to_string(k);
      h = leaky_relu(add_channel_bias(conv(h, param(name + ".w"), 2, 1, 1), param(name + ".b")));
      skips.push_back(h);
    }
    return skips;
  };
  const auto skips_ap = encode(x_ap, "ap");
  const auto skips_lat = encode(x_lat, "lat");

  std::vector<Tensor> lifted(static_cast<size_t>(L + 1));
  for (int k = 0; k <= L; ++k) {
    const auto& lv = lifts_[size_t(k)];
    const int64_t c = config_.widths[size_t(k)];
    const int64_t uk = u / pow2(k), zk = z / pow2(k);
    if (uk != lv.n_bins)
      throw std::invalid_argument("lift level " + std::to_string(k) + ": feature rows " +
                                  std::to_string(uk) + " vs matrix bins " +
                                  std::to_string(lv.n_bins));
    Tensor fa = reshape(skips_ap[size_t(k)], {c, uk, zk});
    Tensor fl = reshape(skips_lat[size_t(k)], {c, uk, zk});
    lifted[size_t(k)] = reshape(lift_2d_to_3d(lv.t_ap, lv.t_lat, fa, fl),
                                {1, c, lv.grid_n, lv.grid_n, zk});
  }

  Tensor d = leaky_relu(add_channel_bias(conv(lifted[size_t(L)], param("g.bott.w"), 3, 1, 1),
                                         param("g.bott.b")));
  for (int k = L - 1; k >= 0; --k) {
    d = transpose_conv2(d, param("g.up." + std::to_string(k) + ".w"), 3);
    d = concat_channels(d, lifted[size_t(k)]);
    const std::string name = "g.dec." + std::to_string(k);
    d = leaky_relu(add_channel_bias(conv(d, param(name + ".w"), 3, 1, 1), param(name + ".b")));
  }
  Tensor out = sigmoid(add_channel_bias(conv(d, param("g.head.w"), 3, 1, 0), param("g.head.b")));
  const int64_t n = config_.geometry.grid_n;
  return reshape(out, {n, n, z});
}

// --- DiscriminatorNet ---

DiscriminatorNet::DiscriminatorNet(const DiscriminatorConfig& config) : config_(config) {
  const int stages = static_cast<int>(config.widths.size());
  if (stages < 1) throw std::invalid_argument("discriminator needs at least 1 stage");
  check_divisible("grid_n", config.grid_n, stages);
  check_divisible("depth_z", config.depth_z, stages);
  Rng rng(config.seed);
  int64_t cin = 1;
  for (int i = 0; i < stages; ++i) {
    const int64_t cout = config.widths[size_t(i)];
    params_.push_back({"d." + std::to_string(i) + ".w",
                       he_uniform(rng, {cout, cin, 4, 4, 4}, cin * 64, true)});
    params_.push_back({"d." + std::to_string(i) + ".b", Tensor::zeros({cout}, true)});
    cin = cout;
  }
  params_.push_back({"d.head.w", he_uniform(rng, {1, cin, 3, 3, 3}, cin * 27, true)});
  params_.push_back({"d.head.b", Tensor::zeros({1}, true)});
}

Tensor DiscriminatorNet::param(const std::string& name) const { return find_param(params_, name); }

int64_t DiscriminatorNet::parameter_count() const { return count_params(params_); }

Tensor DiscriminatorNet::forward(const Tensor& v) const {
  const int64_t n = config_.grid_n, z = config_.depth_z;
  if (v.shape() != Shape{n, n, z})
    throw std::invalid_argument("discriminator input shape " + shape_str(v.shape()) +
                                " does not match configuration");
  Tensor h = reshape(v, {1, 1, n, n, z});
  const int stages = static_cast<int>(config_.widths.size());
  for (int i = 0; i < stages; ++i) {
    const std::string name = "d." + std::to_string(i);
    h = leaky_relu(add_channel_bias(conv(h, param(name + ".w"), 3, 2, 1), param(name + ".b")));
  }
  h = add_channel_bias(conv(h, param("d.head.w"), 3, 1, 1), param("d.head.b"));
  const int64_t ns = n / pow2(stages), zs = z / pow2(stages);
  return reshape(h, {ns, ns, zs});
}

// --- SegNet ---

SegNet::SegNet(const SegNetConfig& config) : config_(config) {
  if (config.widths.size() != 3) throw std::invalid_argument("segnet expects 3 level widths");
  check_divisible("grid_n", config.grid_n, 2);
  check_divisible("depth_z", config.depth_z, 2);
  Rng rng(config.seed);
  auto add_conv = [&](const std::string& name, int64_t cout, int64_t cin, int64_t k) {
    params_.push_back({name + ".w", he_uniform(rng, {cout, cin, k, k, k}, cin * k * k * k, true)});
    params_.push_back({name + ".b", Tensor::zeros({cout}, true)});
  };
  const auto& w = config.widths;
  add_conv("s.enc.0", w[0], 1, 3);
  add_conv("s.enc.1", w[1], w[0], 3);
  add_conv("s.enc.2", w[2], w[1], 3);
  params_.push_back({"s.up.1.w", he_uniform(rng, {w[2], w[2], 2, 2, 2}, w[2] * 8, true)});
  add_conv("s.dec.1", w[1], w[2] + w[1], 3);
  params_.push_back({"s.up.0.w", he_uniform(rng, {w[1], w[1], 2, 2, 2}, w[1] * 8, true)});
  add_conv("s.dec.0", w[0], w[1] + w[0], 3);
  add_conv("s.head", 4, w[0], 1);
}

Tensor SegNet::param(const std::string& name) const { return find_param(params_, name); }

int64_t SegNet::parameter_count() const { return count_params(params_); }

void SegNet::freeze() {
  for (auto& p : params_) p.tensor.set_requires_grad(false);
  frozen_ = true;
}

Tensor SegNet::forward(const Tensor& v) const {
  const int64_t n = config_.grid_n, z = config_.depth_z;
  if (v.shape() != Shape{n, n, z})
    throw std::invalid_argument("segnet input shape " + shape_str(v.shape()) +
                                " does not match configuration");
  ++invocations_;
  auto block = [&](const Tensor& h, const std::string& name) {
    return leaky_relu(add_channel_bias(conv(h, param(name + ".w"), 3, 1, 1), param(name + ".b")));
  };
  Tensor e0 = block(reshape(v, {1, 1, n, n, z}), "s.enc.0");
  Tensor e1 = block(avg_pool2(e0, 3), "s.enc.1");
  Tensor e2 = block(avg_pool2(e1, 3), "s.enc.2");
  Tensor d1 = block(concat_channels(transpose_conv2(e2, param("s.up.1.w"), 3), e1), "s.dec.1");
  Tensor d0 = block(concat_channels(transpose_conv2(d1, param("s.up.0.w"), 3), e0), "s.dec.0");
  Tensor logits = add_channel_bias(conv(d0, param("s.head.w"), 3, 1, 0), param("s.head.b"));
  return reshape(softmax_channels(logits), {4, n, n, z});
}

// --- FeatureExtractor ---

FeatureExtractor::FeatureExtractor(const FeatureExtractorConfig& config) : config_(config) {
  if (config.widths.size() != 4) throw std::invalid_argument("feature extractor expects 4 levels");
  Rng rng(config.seed);
  int64_t cin = 1;
  for (int k = 0; k < 4; ++k) {
    const int64_t cout = config.widths[size_t(k)];
    params_.push_back({"fx." + std::to_string(k) + ".w",
                       orthogonal_init(rng, {cout, cin, 3, 3}, cout, cin * 9)});
    params_.push_back({"fx." + std::to_string(k) + ".b", Tensor::zeros({cout}, false)});
    cin = cout;
  }
  if (!config.weights_path.empty()) {
    auto [loaded, meta] = load_tensors(config.weights_path);
    (void)meta;
    load_into(params_, loaded);
  }
}

Tensor FeatureExtractor::param(const std::string& name) const { return find_param(params_, name); }

std::vector<Tensor> FeatureExtractor::forward(const Tensor& slice) const {
  const auto& sh = slice.shape();
  if (sh.size() != 3 || sh[0] != 1 || sh[1] != sh[2] || sh[1] % 8 != 0)
    throw std::invalid_argument("feature extractor expects (1, N, N) with N divisible by 8, got " +
                                shape_str(sh));
  ++invocations_;
  Tensor h = reshape(slice, {1, 1, sh[1], sh[2]});
  std::vector<Tensor> features;
  for (int k = 0; k < 4; ++k) {
    if (k > 0) h = avg_pool2(h, 2);
    const std::string name = "fx." + std::to_string(k);
    h = leaky_relu(add_channel_bias(conv(h, param(name + ".w"), 2, 1, 1), param(name + ".b")));
    features.push_back(h);
  }
  return features;
}

}  // namespace ctrecon
