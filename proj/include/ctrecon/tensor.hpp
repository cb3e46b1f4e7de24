#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctrecon/sparse.hpp"

namespace ctrecon {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // lazily allocated, same length as data
  bool requires_grad = false;
  // Parents on the tape plus the closure that scatters this node's grad into
  // them. Child holds parent references, never the reverse, so the graph is
  // acyclic for shared_ptr purposes.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// N-dimensional row-major tensor of 64-bit floats with reverse-mode autodiff.
// Value-semantic handle to a shared node; data is mutable only through the
// optimizer path.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }
  std::vector<double>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  void zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  double item() const;

  // Same data, cut from the tape; gradients never flow through the result.
  Tensor detach() const;

  // Reverse-mode sweep from a scalar loss. Gradients accumulate until zeroed.
  void backward() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {
// Builds a tape node; modules with custom differentiable operators use this.
// The backward_fn must guard parents whose requires_grad is false.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorImpl&)> backward_fn);
}  // namespace detail

// --- elementwise ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, double b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor mean(const Tensor& a);  // scalar (shape {1})
Tensor sum(const Tensor& a);   // scalar (shape {1})

// --- activations ---
Tensor leaky_relu(const Tensor& a, double slope = 0.2);
Tensor sigmoid(const Tensor& a);
// softmax over axis 1 (channels); input rank >= 2
Tensor softmax_channels(const Tensor& a);

// --- convolution; input rank = dims + 2 (batch, channels, spatial...) ---
Tensor conv(const Tensor& input, const Tensor& kernel, int dims, int64_t stride, int64_t padding);
// bias shape {C}; broadcast over batch and spatial axes of (B, C, ...)
Tensor add_channel_bias(const Tensor& input, const Tensor& bias);

// --- pooling / resampling over all spatial axes, factor 2 ---
Tensor avg_pool2(const Tensor& input, int dims);
Tensor upsample_nearest2(const Tensor& input, int dims);
// kernel shape (Cin, Cout, 2,2[,2]); output spatial size doubled
Tensor transpose_conv2(const Tensor& input, const Tensor& kernel, int dims);

// --- structure ---
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, Shape new_shape);
// extract axial slice z from (C, N, N, Z) -> (C, N, N); differentiable
Tensor slice_z(const Tensor& a, int64_t z);

// --- linear operators ---
// matrix is captured by shared_ptr; backward applies the transpose
Tensor sparse_apply(std::shared_ptr<const SystemMatrix> m, const Tensor& x, bool transposed = false);

// --- optimizer ---
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  int64_t t = 0;
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam_state(int64_t n_params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                          double epsilon = 1e-8);
// In-place bias-corrected Adam update from param.grad(). Throws on non-finite
// gradient, naming the parameter index; the step is not applied in that case.
void adam_step(AdamState& state, Tensor& param);

// Deterministic-reduction mode: fixed summation order in every kernel and a
// single BLAS thread. On by default.
void set_deterministic(bool on);
bool deterministic();

}  // namespace ctrecon
