#include "ctrecon/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ctrecon {

namespace {

// contiguous channel block of a (C, ...) tensor, differentiable
Tensor slice_channel(const Tensor& t, int64_t c) {
  const Shape& sh = t.shape();
  const int64_t channels = sh[0];
  const int64_t block = t.numel() / channels;
  Shape out_shape(sh.begin() + 1, sh.end());
  std::vector<double> out(t.data().begin() + c * block, t.data().begin() + (c + 1) * block);
  auto impl = t.impl();
  return detail::make_op(std::move(out_shape), std::move(out), {t},
                         [impl, c, block](detail::TensorImpl& self) {
                           if (!impl->requires_grad) return;
                           impl->ensure_grad();
                           for (int64_t i = 0; i < block; ++i)
                             impl->grad[size_t(c * block + i)] += self.grad[size_t(i)];
                         });
}

// scalar ratio n / d with gradients into both
Tensor scalar_div(const Tensor& n, const Tensor& d) {
  const double nv = n.item(), dv = d.item();
  auto n_impl = n.impl();
  auto d_impl = d.impl();
  return detail::make_op({1}, {nv / dv}, {n, d}, [n_impl, d_impl, nv, dv](detail::TensorImpl& self) {
    const double g = self.grad[0];
    if (n_impl->requires_grad) {
      n_impl->ensure_grad();
      n_impl->grad[0] += g / dv;
    }
    if (d_impl->requires_grad) {
      d_impl->ensure_grad();
      d_impl->grad[0] += -g * nv / (dv * dv);
    }
  });
}

// mean absolute difference, subgradient 0 at ties
Tensor l1_mean(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("l1_mean: shape mismatch");
  const int64_t n = a.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += std::abs(a.data()[size_t(i)] - b.data()[size_t(i)]);
  auto a_impl = a.impl();
  auto b_impl = b.impl();
  return detail::make_op({1}, {acc / double(n)}, {a, b}, [a_impl, b_impl, n](detail::TensorImpl& self) {
    const double g = self.grad[0] / double(n);
    for (int64_t i = 0; i < n; ++i) {
      const double diff = a_impl->data[size_t(i)] - b_impl->data[size_t(i)];
      const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      if (a_impl->requires_grad) {
        a_impl->ensure_grad();
        a_impl->grad[size_t(i)] += g * sgn;
      }
      if (b_impl->requires_grad) {
        b_impl->ensure_grad();
        b_impl->grad[size_t(i)] -= g * sgn;
      }
    }
  });
}

}  // namespace

Tensor lsgan_d_loss(const Tensor& d_real, const Tensor& d_fake) {
  if (d_real.shape() != d_fake.shape())
    throw std::invalid_argument("lsgan_d_loss: patch map shapes differ, " +
                                shape_str(d_real.shape()) + " vs " + shape_str(d_fake.shape()));
  Tensor real_term = mean(square(sub(d_real, 1.0)));
  Tensor fake_term = mean(square(d_fake));
  return mul(add(real_term, fake_term), 0.5);
}

Tensor lsgan_g_loss(const Tensor& d_fake) { return mean(square(sub(d_fake, 1.0))); }

Tensor recon_loss(const Tensor& y_hat, const Tensor& y) {
  if (y_hat.shape() != y.shape())
    throw std::invalid_argument("recon_loss: shape mismatch " + shape_str(y_hat.shape()) +
                                " vs " + shape_str(y.shape()));
  return mean(square(sub(y_hat, y)));
}

Tensor projection_loss(const Tensor& y_hat, const Tensor& y, const ProjectorPair& pair) {
  if (y_hat.shape() != y.shape())
    throw std::invalid_argument("projection_loss: shape mismatch " + shape_str(y_hat.shape()) +
                                " vs " + shape_str(y.shape()));
  Tensor ap_term = mean(square(sub(project_volume(pair.ap, y_hat), project_volume(pair.ap, y))));
  Tensor lat_term =
      mean(square(sub(project_volume(pair.lat, y_hat), project_volume(pair.lat, y))));
  return mul(add(ap_term, lat_term), 0.5);
}

Tensor soft_dice_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("soft_dice_loss: shape mismatch");
  Tensor intersection = sum(mul(a, b));
  // squared-sum denominator so identical soft masks score exactly 1 (loss 0);
  // coincides with the plain-sum form on hard masks
  Tensor denom = add(add(sum(square(a)), sum(square(b))), kDiceEpsilon);
  Tensor numer = add(mul(intersection, 2.0), kDiceEpsilon);
  return sub(mul(scalar_div(numer, denom), -1.0), -1.0);  // 1 - numer/denom
}

Tensor dice_seg_loss(const Tensor& y_hat, const Tensor& y, const SegNet& seg) {
  if (!seg.frozen()) throw std::invalid_argument("dice_seg_loss requires a frozen SegNet");
  Tensor y_m = seg.forward(y.detach()).detach();
  Tensor y_hat_m = seg.forward(y_hat);
  Tensor acc = Tensor::scalar(0.0);
  for (int64_t c = 1; c < 4; ++c)
    acc = add(acc, soft_dice_loss(slice_channel(y_hat_m, c), slice_channel(y_m, c)));
  return mul(acc, 1.0 / 3.0);
}

Tensor dice_pretrain_loss(const Tensor& probs, const Tensor& onehot) {
  if (probs.shape() != onehot.shape())
    throw std::invalid_argument("dice_pretrain_loss: shape mismatch " + shape_str(probs.shape()) +
                                " vs " + shape_str(onehot.shape()));
  if (probs.shape().empty() || probs.shape()[0] != 4)
    throw std::invalid_argument("dice_pretrain_loss expects 4 channels");
  Tensor acc = Tensor::scalar(0.0);
  for (int64_t c = 1; c < 4; ++c)
    acc = add(acc, soft_dice_loss(slice_channel(probs, c), slice_channel(onehot, c)));
  return mul(acc, 1.0 / 3.0);
}

Tensor perceptual_loss(const Tensor& y_hat, const Tensor& y, const FeatureExtractor& fx,
                       bool use_l1) {
  if (y_hat.shape() != y.shape())
    throw std::invalid_argument("perceptual_loss: shape mismatch " + shape_str(y_hat.shape()) +
                                " vs " + shape_str(y.shape()));
  const Shape& sh = y.shape();
  if (sh.size() != 3) throw std::invalid_argument("perceptual_loss expects (N, N, Z) volumes");
  const int64_t n = sh[0], z = sh[2];
  Tensor vh = reshape(y_hat, {1, n, n, z});
  Tensor vr = reshape(y.detach(), {1, n, n, z});
  Tensor acc = Tensor::scalar(0.0);
  for (int64_t iz = 0; iz < z; ++iz) {
    auto fh = fx.forward(slice_z(vh, iz));
    auto fr = fx.forward(slice_z(vr, iz));
    for (size_t level = 0; level < fh.size(); ++level) {
      Tensor d = use_l1 ? l1_mean(fh[level], fr[level])
                        : mean(square(sub(fh[level], fr[level])));
      acc = add(acc, d);
    }
  }
  return mul(acc, 1.0 / double(z));
}

std::pair<Tensor, LossBreakdown> total_generator_loss(const GeneratorLossTerms& terms,
                                                      const LossWeights& w, int64_t step) {
  for (double lambda : {w.lambda_gen, w.lambda_r, w.lambda_proj, w.lambda_s, w.lambda_p})
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      throw std::invalid_argument("loss weights must be finite and nonnegative");
  LossBreakdown b;
  b.step = step;
  Tensor total = Tensor::scalar(0.0);
  auto take = [&](const char* name, const Tensor& term, double lambda, double& slot) {
    if (lambda == 0.0) return;
    if (!term.defined())
      throw std::invalid_argument(std::string("loss term ") + name + " required by nonzero weight");
    slot = term.item();
    if (!std::isfinite(slot))
      throw std::runtime_error(std::string("non-finite loss term ") + name + " at step " +
                               std::to_string(step));
    total = add(total, mul(term, lambda));
  };
  take("gen", terms.gen, w.lambda_gen, b.gen);
  take("r", terms.r, w.lambda_r, b.r);
  take("proj", terms.proj, w.lambda_proj, b.proj);
  take("s", terms.s, w.lambda_s, b.s);
  take("p", terms.p, w.lambda_p, b.p);
  b.total = total.item();
  return {total, b};
}

std::pair<Tensor, LossBreakdown> generator_objective(const Tensor& y_hat, const Tensor& y,
                                                     const Tensor& d_fake,
                                                     const ProjectorPair& pair, const SegNet* seg,
                                                     const FeatureExtractor* fx,
                                                     const LossWeights& w, bool perceptual_l1,
                                                     int64_t step) {
  GeneratorLossTerms terms;
  if (w.lambda_gen != 0.0) terms.gen = lsgan_g_loss(d_fake);
  if (w.lambda_r != 0.0) terms.r = recon_loss(y_hat, y);
  if (w.lambda_proj != 0.0) terms.proj = projection_loss(y_hat, y, pair);
  if (w.lambda_s != 0.0) {
    if (!seg) throw std::invalid_argument("lambda_s > 0 requires a segmentation network");
    terms.s = dice_seg_loss(y_hat, y, *seg);
  }
  if (w.lambda_p != 0.0) {
    if (!fx) throw std::invalid_argument("lambda_p > 0 requires a feature extractor");
    terms.p = perceptual_loss(y_hat, y, *fx, perceptual_l1);
  }
  return total_generator_loss(terms, w, step);
}

}  // namespace ctrecon
