#include "ctrecon/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

extern "C" void openblas_set_num_threads(int);

namespace ctrecon {

namespace {

bool g_deterministic = true;

struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
} g_blas_init;

}  // namespace

void set_deterministic(bool on) {
  g_deterministic = on;
  // All kernels use a fixed summation order either way; the flag pins the
  // BLAS thread count so reductions inside GEMM stay ordered too.
  openblas_set_num_threads(1);
}

bool deterministic() { return g_deterministic; }

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

using detail::TensorImpl;

namespace {

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int64_t d : shape)
    if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension in " + shape_str(shape));
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

bool any_requires(const std::vector<Tensor>& parents) {
  for (const auto& p : parents)
    if (p.requires_grad()) return true;
  return false;
}

}  // namespace

namespace detail {

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorImpl&)> backward_fn) {
  auto impl = new_impl(std::move(shape), std::move(data), any_requires(parents));
  if (impl->requires_grad) {
    impl->parents.reserve(parents.size());
    for (auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(impl));
}

}  // namespace detail

using detail::make_op;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return wrap(new_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return wrap(new_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return wrap(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  return wrap(new_impl(impl_->shape, impl_->data, false));
}

void Tensor::backward() const {
  if (numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(shape()));
  // iterative post-order DFS for topological order
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorImpl* parent = node->parents[idx++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  impl_->ensure_grad();
  impl_->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_op(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
    }
  });
}

Tensor add(const Tensor& a, double b) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b;
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [ai](TensorImpl& self) {
    ai->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_op(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, double b) { return add(a, -b); }

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_op(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ai->data[i];
    }
  });
}

Tensor mul(const Tensor& a, double b) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b;
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [ai, b](TensorImpl& self) {
    ai->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * b;
  });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [ai](TensorImpl& self) {
    ai->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * 2.0 * ai->data[i];
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, a.data()[i]));
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [ai, lo, hi](TensorImpl& self) {
    ai->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (ai->data[i] > lo && ai->data[i] < hi) ai->grad[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  auto ai = a.impl();
  return make_op({1}, {acc}, {a}, [ai](TensorImpl& self) {
    ai->ensure_grad();
    const double g = self.grad[0];
    for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
  });
}

Tensor mean(const Tensor& a) {
  const double inv_n = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  auto ai = a.impl();
  return make_op({1}, {acc * inv_n}, {a}, [ai, inv_n](TensorImpl& self) {
    ai->ensure_grad();
    const double g = self.grad[0] * inv_n;
    for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
  });
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

Tensor leaky_relu(const Tensor& a, double slope) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = a.data()[i];
    out[i] = x >= 0.0 ? x : slope * x;
  }
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [ai, slope](TensorImpl& self) {
    ai->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      ai->grad[i] += self.grad[i] * (ai->data[i] >= 0.0 ? 1.0 : slope);
  });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {a}, [ai](TensorImpl& self) {
    ai->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.data[i];
      ai->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor softmax_channels(const Tensor& a) {
  if (a.shape().size() < 2)
    throw std::invalid_argument("softmax_channels: need rank >= 2 with a channel axis, got " +
                                shape_str(a.shape()));
  const int64_t batch = a.shape()[0];
  const int64_t channels = a.shape()[1];
  const int64_t spatial = a.numel() / (batch * channels);
  std::vector<double> out(a.data().size());
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t s = 0; s < spatial; ++s) {
      double mx = -1e300;
      for (int64_t c = 0; c < channels; ++c)
        mx = std::max(mx, a.data()[(b * channels + c) * spatial + s]);
      double denom = 0.0;
      for (int64_t c = 0; c < channels; ++c) {
        size_t idx = (b * channels + c) * spatial + s;
        out[idx] = std::exp(a.data()[idx] - mx);
        denom += out[idx];
      }
      for (int64_t c = 0; c < channels; ++c) out[(b * channels + c) * spatial + s] /= denom;
    }
  }
  auto ai = a.impl();
  return make_op(a.shape(), std::move(out), {a},
                 [ai, batch, channels, spatial](TensorImpl& self) {
    ai->ensure_grad();
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t s = 0; s < spatial; ++s) {
        double dot = 0.0;
        for (int64_t c = 0; c < channels; ++c) {
          size_t idx = (b * channels + c) * spatial + s;
          dot += self.grad[idx] * self.data[idx];
        }
        for (int64_t c = 0; c < channels; ++c) {
          size_t idx = (b * channels + c) * spatial + s;
          ai->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// convolution (GEMM-backed, chunked im2col over the outer spatial axis)
// ---------------------------------------------------------------------------

namespace {

// 2D inputs are promoted to 3D with a unit leading spatial axis so a single
// kernel covers both cases.
struct ConvDims {
  int64_t batch, cin, cout;
  int64_t in_d, in_h, in_w;
  int64_t kd, kh, kw;
  int64_t out_d, out_h, out_w;
  int64_t stride_d, stride, pad_d, pad;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int dims, int64_t stride,
                   int64_t padding) {
  if (dims != 2 && dims != 3) throw std::invalid_argument("conv: dims must be 2 or 3");
  if (static_cast<int>(input.shape().size()) != dims + 2)
    throw std::invalid_argument("conv: input rank " + std::to_string(input.shape().size()) +
                                " does not match dims+2 = " + std::to_string(dims + 2));
  if (static_cast<int>(kernel.shape().size()) != dims + 2)
    throw std::invalid_argument("conv: kernel rank mismatch, got shape " + shape_str(kernel.shape()));
  ConvDims d{};
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  d.batch = is[0];
  d.cin = is[1];
  d.cout = ks[0];
  if (ks[1] != d.cin)
    throw std::invalid_argument("conv: kernel expects " + std::to_string(ks[1]) +
                                " input channels, input has " + std::to_string(d.cin));
  if (dims == 2) {
    d.in_d = 1; d.in_h = is[2]; d.in_w = is[3];
    d.kd = 1;   d.kh = ks[2];   d.kw = ks[3];
    d.stride_d = 1; d.pad_d = 0;
  } else {
    d.in_d = is[2]; d.in_h = is[3]; d.in_w = is[4];
    d.kd = ks[2];   d.kh = ks[3];   d.kw = ks[4];
    d.stride_d = stride; d.pad_d = padding;
  }
  d.stride = stride;
  d.pad = padding;
  d.out_d = (d.in_d + 2 * d.pad_d - d.kd) / d.stride_d + 1;
  d.out_h = (d.in_h + 2 * d.pad - d.kh) / d.stride + 1;
  d.out_w = (d.in_w + 2 * d.pad - d.kw) / d.stride + 1;
  if (d.kd > d.in_d + 2 * d.pad_d || d.kh > d.in_h + 2 * d.pad || d.kw > d.in_w + 2 * d.pad)
    throw std::invalid_argument("conv: kernel " + shape_str(kernel.shape()) +
                                " larger than padded input " + shape_str(input.shape()));
  return d;
}

// col layout: (cin*kd*kh*kw) x (out_h*out_w) for one (batch, out_d) slice
void im2col_slice(const std::vector<double>& in, const ConvDims& d, int64_t b, int64_t od,
                  std::vector<double>& col) {
  const int64_t cols = d.out_h * d.out_w;
  std::fill(col.begin(), col.end(), 0.0);
  for (int64_t c = 0; c < d.cin; ++c) {
    const double* in_c = in.data() + ((b * d.cin + c) * d.in_d) * d.in_h * d.in_w;
    for (int64_t kz = 0; kz < d.kd; ++kz) {
      int64_t iz = od * d.stride_d - d.pad_d + kz;
      if (iz < 0 || iz >= d.in_d) continue;
      const double* in_z = in_c + iz * d.in_h * d.in_w;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          double* col_row = col.data() + (((c * d.kd + kz) * d.kh + ky) * d.kw + kx) * cols;
          for (int64_t oh = 0; oh < d.out_h; ++oh) {
            int64_t iy = oh * d.stride - d.pad + ky;
            if (iy < 0 || iy >= d.in_h) continue;
            const double* in_row = in_z + iy * d.in_w;
            double* col_out = col_row + oh * d.out_w;
            for (int64_t ow = 0; ow < d.out_w; ++ow) {
              int64_t ix = ow * d.stride - d.pad + kx;
              if (ix >= 0 && ix < d.in_w) col_out[ow] = in_row[ix];
            }
          }
        }
      }
    }
  }
}

void col2im_slice(const std::vector<double>& col, const ConvDims& d, int64_t b, int64_t od,
                  std::vector<double>& din) {
  const int64_t cols = d.out_h * d.out_w;
  for (int64_t c = 0; c < d.cin; ++c) {
    double* din_c = din.data() + ((b * d.cin + c) * d.in_d) * d.in_h * d.in_w;
    for (int64_t kz = 0; kz < d.kd; ++kz) {
      int64_t iz = od * d.stride_d - d.pad_d + kz;
      if (iz < 0 || iz >= d.in_d) continue;
      double* din_z = din_c + iz * d.in_h * d.in_w;
      for (int64_t ky = 0; ky < d.kh; ++ky) {
        for (int64_t kx = 0; kx < d.kw; ++kx) {
          const double* col_row = col.data() + (((c * d.kd + kz) * d.kh + ky) * d.kw + kx) * cols;
          for (int64_t oh = 0; oh < d.out_h; ++oh) {
            int64_t iy = oh * d.stride - d.pad + ky;
            if (iy < 0 || iy >= d.in_h) continue;
            double* din_row = din_z + iy * d.in_w;
            const double* col_in = col_row + oh * d.out_w;
            for (int64_t ow = 0; ow < d.out_w; ++ow) {
              int64_t ix = ow * d.stride - d.pad + kx;
              if (ix >= 0 && ix < d.in_w) din_row[ix] += col_in[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv(const Tensor& input, const Tensor& kernel, int dims, int64_t stride, int64_t padding) {
  const ConvDims d = conv_dims(input, kernel, dims, stride, padding);
  const int64_t ckk = d.cin * d.kd * d.kh * d.kw;
  const int64_t cols = d.out_h * d.out_w;
  const int64_t out_spatial = d.out_d * cols;

  Shape out_shape;
  if (dims == 2) out_shape = {d.batch, d.cout, d.out_h, d.out_w};
  else out_shape = {d.batch, d.cout, d.out_d, d.out_h, d.out_w};
  std::vector<double> out(d.batch * d.cout * out_spatial, 0.0);

  std::vector<double> col(ckk * cols);
  std::vector<double> temp(d.cout * cols);
  for (int64_t b = 0; b < d.batch; ++b) {
    for (int64_t od = 0; od < d.out_d; ++od) {
      im2col_slice(input.data(), d, b, od, col);
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)d.cout, (int)cols, (int)ckk, 1.0,
                  kernel.data().data(), (int)ckk, col.data(), (int)cols, 0.0, temp.data(),
                  (int)cols);
      for (int64_t co = 0; co < d.cout; ++co) {
        double* dst = out.data() + ((b * d.cout + co) * d.out_d + od) * cols;
        const double* src = temp.data() + co * cols;
        std::copy(src, src + cols, dst);
      }
    }
  }

  auto in_impl = input.impl();
  auto k_impl = kernel.impl();
  return make_op(std::move(out_shape), std::move(out), {input, kernel},
                 [in_impl, k_impl, d, ckk, cols](TensorImpl& self) {
    const bool need_input_grad = in_impl->requires_grad;
    const bool need_kernel_grad = k_impl->requires_grad;
    const int64_t cout = d.cout;
    std::vector<double> col(ckk * cols);
    std::vector<double> dcol(ckk * cols);
    std::vector<double> dtemp(cout * cols);
    if (need_input_grad) in_impl->ensure_grad();
    if (need_kernel_grad) k_impl->ensure_grad();
    for (int64_t b = 0; b < d.batch; ++b) {
      for (int64_t od = 0; od < d.out_d; ++od) {
        for (int64_t co = 0; co < cout; ++co) {
          const double* src = self.grad.data() + ((b * cout + co) * d.out_d + od) * cols;
          std::copy(src, src + cols, dtemp.data() + co * cols);
        }
        if (need_kernel_grad) {
          im2col_slice(in_impl->data, d, b, od, col);
          // dK += dOut · colᵀ
          cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)cout, (int)ckk, (int)cols, 1.0,
                      dtemp.data(), (int)cols, col.data(), (int)cols, 1.0, k_impl->grad.data(),
                      (int)ckk);
        }
        if (need_input_grad) {
          // dCol = Kᵀ · dOut, then scatter
          cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)ckk, (int)cols, (int)cout, 1.0,
                      k_impl->data.data(), (int)ckk, dtemp.data(), (int)cols, 0.0, dcol.data(),
                      (int)cols);
          col2im_slice(dcol, d, b, od, in_impl->grad);
        }
      }
    }
  });
}

Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
  if (input.shape().size() < 2)
    throw std::invalid_argument("add_channel_bias: input rank must be >= 2");
  const int64_t batch = input.shape()[0];
  const int64_t channels = input.shape()[1];
  if (bias.shape().size() != 1 || bias.shape()[0] != channels)
    throw std::invalid_argument("add_channel_bias: bias shape " + shape_str(bias.shape()) +
                                " does not match " + std::to_string(channels) + " channels");
  const int64_t spatial = input.numel() / (batch * channels);
  std::vector<double> out(input.data().size());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t c = 0; c < channels; ++c) {
      const double bv = bias.data()[c];
      const double* src = input.data().data() + (b * channels + c) * spatial;
      double* dst = out.data() + (b * channels + c) * spatial;
      for (int64_t s = 0; s < spatial; ++s) dst[s] = src[s] + bv;
    }
  auto in_impl = input.impl();
  auto b_impl = bias.impl();
  return make_op(input.shape(), std::move(out), {input, bias},
                 [in_impl, b_impl, batch, channels, spatial](TensorImpl& self) {
    const bool gi = in_impl->requires_grad;
    const bool gb = b_impl->requires_grad;
    if (gi) in_impl->ensure_grad();
    if (gb) b_impl->ensure_grad();
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t c = 0; c < channels; ++c) {
        const double* g = self.grad.data() + (b * channels + c) * spatial;
        double acc = 0.0;
        if (gi) {
          double* gin = in_impl->grad.data() + (b * channels + c) * spatial;
          for (int64_t s = 0; s < spatial; ++s) {
            gin[s] += g[s];
            acc += g[s];
          }
        } else {
          for (int64_t s = 0; s < spatial; ++s) acc += g[s];
        }
        if (gb) b_impl->grad[c] += acc;
      }
  });
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

namespace {

void check_spatial_rank(const Tensor& t, int dims, const char* op) {
  if (static_cast<int>(t.shape().size()) != dims + 2)
    throw std::invalid_argument(std::string(op) + ": input rank " +
                                std::to_string(t.shape().size()) + " does not match dims+2");
}

}  // namespace

Tensor avg_pool2(const Tensor& input, int dims) {
  check_spatial_rank(input, dims, "avg_pool2");
  const auto& is = input.shape();
  for (int i = 2; i < dims + 2; ++i)
    if (is[i] % 2 != 0)
      throw std::invalid_argument("avg_pool2: odd spatial size in " + shape_str(is));
  const int64_t batch = is[0], channels = is[1];
  const int64_t in_d = dims == 3 ? is[2] : 1;
  const int64_t in_h = is[dims], in_w = is[dims + 1];
  const int64_t od = in_d / (dims == 3 ? 2 : 1), oh = in_h / 2, ow = in_w / 2;
  const double inv = 1.0 / double(1 << dims);
  Shape out_shape = is;
  for (int i = 2; i < dims + 2; ++i) out_shape[i] /= 2;
  std::vector<double> out(shape_numel(out_shape), 0.0);
  const int64_t dstep = dims == 3 ? 2 : 1;
  for (int64_t bc = 0; bc < batch * channels; ++bc) {
    const double* in_p = input.data().data() + bc * in_d * in_h * in_w;
    double* out_p = out.data() + bc * od * oh * ow;
    for (int64_t z = 0; z < od; ++z)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (int64_t kz = 0; kz < (dims == 3 ? 2 : 1); ++kz)
            for (int64_t ky = 0; ky < 2; ++ky)
              for (int64_t kx = 0; kx < 2; ++kx)
                acc += in_p[((z * dstep + kz) * in_h + y * 2 + ky) * in_w + x * 2 + kx];
          out_p[(z * oh + y) * ow + x] = acc * inv;
        }
  }
  auto in_impl = input.impl();
  return make_op(std::move(out_shape), std::move(out), {input},
                 [in_impl, batch, channels, in_d, in_h, in_w, od, oh, ow, inv, dims, dstep](TensorImpl& self) {
    in_impl->ensure_grad();
    for (int64_t bc = 0; bc < batch * channels; ++bc) {
      double* gin = in_impl->grad.data() + bc * in_d * in_h * in_w;
      const double* g = self.grad.data() + bc * od * oh * ow;
      for (int64_t z = 0; z < od; ++z)
        for (int64_t y = 0; y < oh; ++y)
          for (int64_t x = 0; x < ow; ++x) {
            const double gv = g[(z * oh + y) * ow + x] * inv;
            for (int64_t kz = 0; kz < (dims == 3 ? 2 : 1); ++kz)
              for (int64_t ky = 0; ky < 2; ++ky)
                for (int64_t kx = 0; kx < 2; ++kx)
                  gin[((z * dstep + kz) * in_h + y * 2 + ky) * in_w + x * 2 + kx] += gv;
          }
    }
  });
}

Tensor upsample_nearest2(const Tensor& input, int dims) {
  check_spatial_rank(input, dims, "upsample_nearest2");
  const auto& is = input.shape();
  const int64_t batch = is[0], channels = is[1];
  const int64_t in_d = dims == 3 ? is[2] : 1;
  const int64_t in_h = is[dims], in_w = is[dims + 1];
  const int64_t od = in_d * (dims == 3 ? 2 : 1), oh = in_h * 2, ow = in_w * 2;
  Shape out_shape = is;
  for (int i = 2; i < dims + 2; ++i) out_shape[i] *= 2;
  std::vector<double> out(shape_numel(out_shape));
  const int64_t dfac = dims == 3 ? 2 : 1;
  for (int64_t bc = 0; bc < batch * channels; ++bc) {
    const double* in_p = input.data().data() + bc * in_d * in_h * in_w;
    double* out_p = out.data() + bc * od * oh * ow;
    for (int64_t z = 0; z < od; ++z)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x)
          out_p[(z * oh + y) * ow + x] = in_p[((z / dfac) * in_h + y / 2) * in_w + x / 2];
  }
  auto in_impl = input.impl();
  return make_op(std::move(out_shape), std::move(out), {input},
                 [in_impl, batch, channels, in_d, in_h, in_w, od, oh, ow, dfac](TensorImpl& self) {
    in_impl->ensure_grad();
    for (int64_t bc = 0; bc < batch * channels; ++bc) {
      double* gin = in_impl->grad.data() + bc * in_d * in_h * in_w;
      const double* g = self.grad.data() + bc * od * oh * ow;
      for (int64_t z = 0; z < od; ++z)
        for (int64_t y = 0; y < oh; ++y)
          for (int64_t x = 0; x < ow; ++x)
            gin[((z / dfac) * in_h + y / 2) * in_w + x / 2] += g[(z * oh + y) * ow + x];
    }
  });
}

Tensor transpose_conv2(const Tensor& input, const Tensor& kernel, int dims) {
  check_spatial_rank(input, dims, "transpose_conv2");
  if (static_cast<int>(kernel.shape().size()) != dims + 2)
    throw std::invalid_argument("transpose_conv2: kernel rank mismatch");
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  const int64_t batch = is[0], cin = is[1], cout = ks[1];
  if (ks[0] != cin)
    throw std::invalid_argument("transpose_conv2: kernel input channels " + std::to_string(ks[0]) +
                                " != " + std::to_string(cin));
  for (int i = 2; i < dims + 2; ++i)
    if (ks[i] != 2) throw std::invalid_argument("transpose_conv2: kernel spatial size must be 2");
  const int64_t in_d = dims == 3 ? is[2] : 1;
  const int64_t in_h = is[dims], in_w = is[dims + 1];
  const int64_t kd = dims == 3 ? 2 : 1;
  Shape out_shape = is;
  out_shape[1] = cout;
  for (int i = 2; i < dims + 2; ++i) out_shape[i] *= 2;
  const int64_t od = in_d * kd, oh = in_h * 2, ow = in_w * 2;
  std::vector<double> out(shape_numel(out_shape), 0.0);
  // stride == kernel size, so every output voxel has exactly one source
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t co = 0; co < cout; ++co) {
      double* out_p = out.data() + (b * cout + co) * od * oh * ow;
      for (int64_t ci = 0; ci < cin; ++ci) {
        const double* in_p = input.data().data() + (b * cin + ci) * in_d * in_h * in_w;
        const double* k_p = kernel.data().data() + (ci * cout + co) * kd * 4;
        for (int64_t z = 0; z < in_d; ++z)
          for (int64_t y = 0; y < in_h; ++y)
            for (int64_t x = 0; x < in_w; ++x) {
              const double v = in_p[(z * in_h + y) * in_w + x];
              for (int64_t kz = 0; kz < kd; ++kz)
                for (int64_t ky = 0; ky < 2; ++ky)
                  for (int64_t kx = 0; kx < 2; ++kx)
                    out_p[((z * kd + kz) * oh + y * 2 + ky) * ow + x * 2 + kx] +=
                        v * k_p[(kz * 2 + ky) * 2 + kx];
            }
      }
    }
  auto in_impl = input.impl();
  auto k_impl = kernel.impl();
  return make_op(std::move(out_shape), std::move(out), {input, kernel},
                 [in_impl, k_impl, batch, cin, cout, in_d, in_h, in_w, kd, od, oh, ow](TensorImpl& self) {
    const bool gi = in_impl->requires_grad;
    const bool gk = k_impl->requires_grad;
    if (gi) in_impl->ensure_grad();
    if (gk) k_impl->ensure_grad();
    if (!gi && !gk) return;
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t co = 0; co < cout; ++co) {
        const double* g = self.grad.data() + (b * cout + co) * od * oh * ow;
        for (int64_t ci = 0; ci < cin; ++ci) {
          double* gin =
              gi ? in_impl->grad.data() + (b * cin + ci) * in_d * in_h * in_w : nullptr;
          const double* in_p = in_impl->data.data() + (b * cin + ci) * in_d * in_h * in_w;
          const double* k_p = k_impl->data.data() + (ci * cout + co) * kd * 4;
          double* gkr = gk ? k_impl->grad.data() + (ci * cout + co) * kd * 4 : nullptr;
          for (int64_t z = 0; z < in_d; ++z)
            for (int64_t y = 0; y < in_h; ++y)
              for (int64_t x = 0; x < in_w; ++x) {
                double acc = 0.0;
                const double v = in_p[(z * in_h + y) * in_w + x];
                for (int64_t kz = 0; kz < kd; ++kz)
                  for (int64_t ky = 0; ky < 2; ++ky)
                    for (int64_t kx = 0; kx < 2; ++kx) {
                      const double gv = g[((z * kd + kz) * oh + y * 2 + ky) * ow + x * 2 + kx];
                      acc += gv * k_p[(kz * 2 + ky) * 2 + kx];
                      if (gk) gkr[(kz * 2 + ky) * 2 + kx] += gv * v;
                    }
                if (gi) gin[(z * in_h + y) * in_w + x] += acc;
              }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != b.shape().size() || a.shape().size() < 2)
    throw std::invalid_argument("concat_channels: rank mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  for (size_t i = 0; i < a.shape().size(); ++i)
    if (i != 1 && a.shape()[i] != b.shape()[i])
      throw std::invalid_argument("concat_channels: non-channel dims differ, " +
                                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t batch = a.shape()[0];
  const int64_t ca = a.shape()[1], cb = b.shape()[1];
  const int64_t spatial = a.numel() / (batch * ca);
  Shape out_shape = a.shape();
  out_shape[1] = ca + cb;
  std::vector<double> out(shape_numel(out_shape));
  for (int64_t bi = 0; bi < batch; ++bi) {
    std::copy(a.data().begin() + bi * ca * spatial, a.data().begin() + (bi + 1) * ca * spatial,
              out.begin() + bi * (ca + cb) * spatial);
    std::copy(b.data().begin() + bi * cb * spatial, b.data().begin() + (bi + 1) * cb * spatial,
              out.begin() + (bi * (ca + cb) + ca) * spatial);
  }
  auto ai = a.impl(), bi_impl = b.impl();
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [ai, bi_impl, batch, ca, cb, spatial](TensorImpl& self) {
    if (ai->requires_grad) ai->ensure_grad();
    if (bi_impl->requires_grad) bi_impl->ensure_grad();
    for (int64_t bi = 0; bi < batch; ++bi) {
      const double* g = self.grad.data() + bi * (ca + cb) * spatial;
      if (ai->requires_grad) {
        double* ga = ai->grad.data() + bi * ca * spatial;
        for (int64_t i = 0; i < ca * spatial; ++i) ga[i] += g[i];
      }
      if (bi_impl->requires_grad) {
        double* gb = bi_impl->grad.data() + bi * cb * spatial;
        for (int64_t i = 0; i < cb * spatial; ++i) gb[i] += g[ca * spatial + i];
      }
    }
  });
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(new_shape));
  auto ai = a.impl();
  return make_op(std::move(new_shape), a.data(), {a}, [ai](TensorImpl& self) {
    ai->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
  });
}

Tensor slice_z(const Tensor& a, int64_t z) {
  if (a.shape().size() < 2) throw std::invalid_argument("slice_z: rank must be >= 2");
  const int64_t depth = a.shape().back();
  if (z < 0 || z >= depth)
    throw std::invalid_argument("slice_z: index " + std::to_string(z) + " out of range [0," +
                                std::to_string(depth) + ")");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  const int64_t n_out = shape_numel(out_shape);
  std::vector<double> out(n_out);
  for (int64_t i = 0; i < n_out; ++i) out[i] = a.data()[i * depth + z];
  auto ai = a.impl();
  return make_op(std::move(out_shape), std::move(out), {a}, [ai, z, depth, n_out](TensorImpl& self) {
    ai->ensure_grad();
    for (int64_t i = 0; i < n_out; ++i) ai->grad[i * depth + z] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// sparse linear operator
// ---------------------------------------------------------------------------

Tensor sparse_apply(std::shared_ptr<const SystemMatrix> m, const Tensor& x, bool transposed) {
  const int64_t expected = transposed ? m->n_rows : m->n_cols;
  if (x.numel() != expected)
    throw std::invalid_argument("sparse_apply: input has " + std::to_string(x.numel()) +
                                " elements, matrix expects " + std::to_string(expected));
  std::vector<double> y = m->apply(x.data(), transposed);
  const int64_t n_out = static_cast<int64_t>(y.size());
  auto xi = x.impl();
  return make_op({n_out}, std::move(y), {x}, [m, xi, transposed](TensorImpl& self) {
    xi->ensure_grad();
    std::vector<double> gx = m->apply(self.grad, !transposed);
    for (size_t i = 0; i < gx.size(); ++i) xi->grad[i] += gx[i];
  });
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState make_adam_state(int64_t n_params, double lr, double beta1, double beta2, double epsilon) {
  AdamState s;
  s.m.assign(n_params, 0.0);
  s.v.assign(n_params, 0.0);
  s.t = 0;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  return s;
}

void adam_step(AdamState& state, Tensor& param) {
  const int64_t n = param.numel();
  if (static_cast<int64_t>(state.m.size()) != n || static_cast<int64_t>(state.v.size()) != n)
    throw std::invalid_argument("adam_step: state sized for " + std::to_string(state.m.size()) +
                                " parameters, tensor has " + std::to_string(n));
  const std::vector<double>& g = param.grad();
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(g[i]))
      throw std::runtime_error("adam_step: non-finite gradient at parameter index " +
                               std::to_string(i));
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.t));
  std::vector<double>& p = param.mutable_data();
  for (int64_t i = 0; i < n; ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
    const double mh = state.m[i] / bc1;
    const double vh = state.v[i] / bc2;
    p[i] -= state.lr * mh / (std::sqrt(vh) + state.epsilon);
  }
}

}  // namespace ctrecon
