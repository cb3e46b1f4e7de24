#include <cmath>

#include "ctrecon/losses.hpp"
#include "ctrecon/phantom.hpp"
#include "ctrecon/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ctrecon;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0,
                     bool requires_grad = false) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

ProjectorPair small_pair(int64_t n, int64_t bins) {
  GeometryConfig cfg;
  cfg.grid_n = n;
  cfg.n_detector_bins = bins;
  return make_projector_pair(build_geometry(cfg));
}

}  // namespace

TEST_CASE("lsgan discriminator loss closed-form points") {
  auto patch = [](double v) { return Tensor::full({2, 2, 2}, v); };
  CHECK(lsgan_d_loss(patch(1.0), patch(0.0)).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(lsgan_d_loss(patch(0.5), patch(0.5)).item() == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(lsgan_d_loss(patch(0.0), patch(1.0)).item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS(lsgan_d_loss(patch(0.0), Tensor::zeros({3, 3, 3})));
}

TEST_CASE("lsgan generator loss closed-form points") {
  auto patch = [](double v) { return Tensor::full({2, 2, 2}, v); };
  CHECK(lsgan_g_loss(patch(1.0)).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(lsgan_g_loss(patch(0.0)).item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(lsgan_g_loss(patch(0.5)).item() == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("reconstruction loss closed-form points") {
  Rng rng(1);
  Tensor y = random_tensor({4, 4, 4}, rng);
  CHECK(recon_loss(y, y).item() == 0.0);
  CHECK(recon_loss(Tensor::full({2, 2}, 1.0), Tensor::zeros({2, 2})).item() == 1.0);
  Tensor a = Tensor::from_data({2}, {0.5, 0.5});
  Tensor b = Tensor::from_data({2}, {0.0, 0.5});
  CHECK(recon_loss(a, b).item() == doctest::Approx(0.125).epsilon(1e-12));
  CHECK_THROWS(recon_loss(a, y));
}

TEST_CASE("projection loss vanishes for identical volumes") {
  auto pair = small_pair(16, 16);
  Rng rng(2);
  Tensor y = random_tensor({16, 16, 4}, rng);
  CHECK(projection_loss(y, y, pair).item() == 0.0);
  CHECK_THROWS(projection_loss(y, Tensor::zeros({8, 8, 4}), pair));
}

TEST_CASE("projection loss is blind to voxels outside the fan coverage") {
  // a deliberately narrow detector (16 mm span vs 80 mm FOV, assembled by
  // hand because build_geometry rejects under-covering fans) leaves the grid
  // corners unseen by both views
  FanBeamGeometry g;
  g.sid_mm = 595.0;
  g.sdd_mm = 1085.6;
  g.n_detector_bins = 16;
  g.detector_pitch_mm = 1.0;
  g.grid_n = 32;
  g.voxel_pitch_mm = 2.5;
  auto pair = make_projector_pair(g);
  // verify the corner voxel is truly outside both fans
  std::vector<double> probe(32 * 32, 0.0);
  probe[0] = 1.0;  // voxel (ix=0, iy=0)
  for (const auto* p : {&pair.ap, &pair.lat}) {
    auto hit = p->forward->apply(probe, false);
    for (double h : hit) REQUIRE(h == 0.0);
  }
  Rng rng(3);
  Tensor y = random_tensor({32, 32, 2}, rng);
  Tensor y2 = Tensor::from_data(y.shape(), y.data());
  y2.mutable_data()[0] += 0.7;  // voxel (0,0,z=0)
  y2.mutable_data()[1] += 0.3;  // voxel (0,0,z=1)
  CHECK(projection_loss(y2, y, pair).item() == 0.0);
}

TEST_CASE("projection loss gradient matches finite differences on a 8^3 volume") {
  auto pair = small_pair(8, 8);
  Rng rng(4);
  Tensor y = random_tensor({8, 8, 8}, rng);
  Tensor y_hat = random_tensor({8, 8, 8}, rng, 0.0, 1.0, true);
  projection_loss(y_hat, y, pair).backward();
  auto fd = oracles::finite_diff(
      [&](const std::vector<double>& x) {
        Tensor t = Tensor::from_data({8, 8, 8}, x);
        return projection_loss(t, y, pair).item();
      },
      y_hat.data());
  CHECK(oracles::max_grad_rel_err(y_hat.grad(), fd) < 1e-6);
}

TEST_CASE("soft dice loss closed-form points") {
  auto t = [](std::vector<double> v) {
    const int64_t n = static_cast<int64_t>(v.size());
    return Tensor::from_data({n}, std::move(v));
  };
  // identical soft masks: dice exactly 1, loss exactly 0
  Tensor a = t({0.3, 0.7, 0.1, 0.9});
  CHECK(soft_dice_loss(a, a).item() == 0.0);
  // hard case from Eq. 6: overlap 1 of sizes 2+2
  CHECK(soft_dice_loss(t({1, 1, 0, 0}), t({1, 0, 1, 0})).item() ==
        doctest::Approx(0.5).epsilon(1e-6));
  // disjoint hard masks
  CHECK(soft_dice_loss(t({1, 1, 0, 0}), t({0, 0, 1, 1})).item() ==
        doctest::Approx(1.0).epsilon(1e-6));
  // both empty -> dice 1 by convention
  CHECK(soft_dice_loss(t({0, 0, 0, 0}), t({0, 0, 0, 0})).item() == 0.0);
  // exactly one empty -> loss ~1
  CHECK(soft_dice_loss(t({1, 1, 0, 0}), t({0, 0, 0, 0})).item() ==
        doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("soft dice loss decreases strictly with growing overlap") {
  // masks of fixed size 4 in 12 voxels; overlap 0..4
  double prev = 2.0;
  for (int overlap = 0; overlap <= 4; ++overlap) {
    std::vector<double> a(12, 0.0), b(12, 0.0);
    for (int i = 0; i < 4; ++i) a[size_t(i)] = 1.0;
    for (int i = 0; i < overlap; ++i) b[size_t(i)] = 1.0;
    for (int i = overlap; i < 4; ++i) b[size_t(4 + i)] = 1.0;
    const double loss =
        soft_dice_loss(Tensor::from_data({12}, a), Tensor::from_data({12}, b)).item();
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("dice segmentation loss: zero at equality, gradient isolation") {
  SegNetConfig cfg;
  cfg.grid_n = 16;
  cfg.depth_z = 8;
  cfg.widths = {2, 3, 4};
  SegNet seg(cfg);
  CHECK_THROWS(dice_seg_loss(Tensor::zeros({16, 16, 8}), Tensor::zeros({16, 16, 8}), seg));
  seg.freeze();
  Rng rng(5);
  Tensor y = random_tensor({16, 16, 8}, rng);
  CHECK(dice_seg_loss(y, y, seg).item() == 0.0);

  Tensor y_hat = random_tensor({16, 16, 8}, rng, 0.0, 1.0, true);
  Tensor loss = dice_seg_loss(y_hat, y, seg);
  CHECK(loss.item() > 0.0);
  loss.backward();
  CHECK(y_hat.has_grad());
  for (const auto& p : seg.parameters()) CHECK(!p.tensor.has_grad());
}

TEST_CASE("dice segmentation loss gradient matches finite differences") {
  SegNetConfig cfg;
  cfg.grid_n = 8;
  cfg.depth_z = 4;
  cfg.widths = {2, 2, 2};
  SegNet seg(cfg);
  seg.freeze();
  Rng rng(6);
  Tensor y = random_tensor({8, 8, 4}, rng);
  Tensor y_hat = random_tensor({8, 8, 4}, rng, 0.0, 1.0, true);
  dice_seg_loss(y_hat, y, seg).backward();
  // spot-check the 5 largest components against central differences
  std::vector<size_t> order(y_hat.grad().size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return std::abs(y_hat.grad()[a]) > std::abs(y_hat.grad()[b]);
  });
  for (int k = 0; k < 5; ++k) {
    const size_t i = order[size_t(k)];
    auto x = y_hat.data();
    const double h = 1e-6;
    x[i] += h;
    const double fp = dice_seg_loss(Tensor::from_data({8, 8, 4}, x), y, seg).item();
    x[i] -= 2 * h;
    const double fm = dice_seg_loss(Tensor::from_data({8, 8, 4}, x), y, seg).item();
    const double fd = (fp - fm) / (2 * h);
    CHECK(oracles::rel_err(y_hat.grad()[i], fd) < 1e-4);
  }
}

TEST_CASE("perceptual loss: zero at equality, symmetric, slice oracle") {
  FeatureExtractorConfig fcfg;
  fcfg.widths = {2, 3, 4, 5};
  FeatureExtractor fx(fcfg);
  Rng rng(7);
  Tensor y = random_tensor({16, 16, 4}, rng);
  CHECK(perceptual_loss(y, y, fx).item() == 0.0);

  Tensor y2 = random_tensor({16, 16, 4}, rng);
  const double ab = perceptual_loss(y, y2, fx).item();
  const double ba = perceptual_loss(y2, y, fx).item();
  CHECK(std::abs(ab - ba) < 1e-12);
  CHECK(ab > 0.0);

  // single-slice volume equals the direct 2D feature distance
  Tensor s1 = random_tensor({16, 16, 1}, rng);
  Tensor s2 = random_tensor({16, 16, 1}, rng);
  const double vol_loss = perceptual_loss(s1, s2, fx).item();
  auto f1 = fx.forward(reshape(s1, {1, 16, 16}));
  auto f2 = fx.forward(reshape(s2, {1, 16, 16}));
  double direct = 0.0;
  for (size_t k = 0; k < f1.size(); ++k) direct += mean(square(sub(f1[k], f2[k]))).item();
  CHECK(vol_loss == doctest::Approx(direct).epsilon(1e-12));
  CHECK_THROWS(perceptual_loss(s1, y, fx));
}

TEST_CASE("perceptual loss L1 switch and gradient isolation") {
  FeatureExtractorConfig fcfg;
  fcfg.widths = {2, 3, 4, 5};
  FeatureExtractor fx(fcfg);
  Rng rng(8);
  Tensor y = random_tensor({8, 8, 2}, rng);
  Tensor y_hat = random_tensor({8, 8, 2}, rng, 0.0, 1.0, true);
  const double l2 = perceptual_loss(y_hat, y, fx, false).item();
  const double l1 = perceptual_loss(y_hat, y, fx, true).item();
  CHECK(l2 > 0.0);
  CHECK(l1 > 0.0);
  CHECK(l1 != l2);
  perceptual_loss(y_hat, y, fx, true).backward();
  CHECK(y_hat.has_grad());
  for (const auto& p : fx.parameters()) CHECK(!p.tensor.has_grad());
}

TEST_CASE("total generator loss is the weighted sum") {
  GeneratorLossTerms unit;
  unit.gen = Tensor::scalar(1.0);
  unit.r = Tensor::scalar(1.0);
  unit.proj = Tensor::scalar(1.0);
  unit.s = Tensor::scalar(1.0);
  unit.p = Tensor::scalar(1.0);
  LossWeights w;  // defaults 0.1, 10, 10, 2, 0.5
  auto [total, b] = total_generator_loss(unit, w, 3);
  CHECK(total.item() == doctest::Approx(22.6).epsilon(1e-12));
  CHECK(b.step == 3);
  const double wsum = 0.1 * b.gen + 10 * b.r + 10 * b.proj + 2 * b.s + 0.5 * b.p;
  CHECK(std::abs(b.total - wsum) < 1e-12);

  LossWeights zero;
  zero.lambda_gen = zero.lambda_r = zero.lambda_proj = zero.lambda_s = zero.lambda_p = 0.0;
  auto [t0, b0] = total_generator_loss(GeneratorLossTerms{}, zero, 0);
  CHECK(t0.item() == 0.0);
  CHECK(b0.total == 0.0);

  LossWeights neg;
  neg.lambda_r = -1.0;
  CHECK_THROWS(total_generator_loss(unit, neg, 0));

  GeneratorLossTerms bad = unit;
  bad.r = Tensor::scalar(std::nan(""));
  try {
    total_generator_loss(bad, w, 7);
    FAIL("expected abort on non-finite term");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("r") != std::string::npos);
    CHECK(std::string(e.what()).find("7") != std::string::npos);
  }
}

TEST_CASE("baseline objective never touches phi_s or phi_p") {
  auto pair = small_pair(16, 16);
  Rng rng(9);
  Tensor y = random_tensor({16, 16, 8}, rng);
  Tensor y_hat = random_tensor({16, 16, 8}, rng, 0.0, 1.0, true);
  Tensor d_fake = random_tensor({2, 2, 2}, rng);
  LossWeights base;
  base.lambda_s = 0.0;
  base.lambda_p = 0.0;
  auto [t_base, b_base] = generator_objective(y_hat, y, d_fake, pair, nullptr, nullptr, base,
                                              false, 0);
  CHECK(std::isfinite(t_base.item()));

  // with the networks present but weights zero, the value is bit-identical
  // and the invocation counters stay at zero
  SegNetConfig scfg;
  scfg.grid_n = 16;
  scfg.depth_z = 8;
  scfg.widths = {2, 2, 2};
  SegNet seg(scfg);
  seg.freeze();
  FeatureExtractorConfig fcfg;
  fcfg.widths = {2, 3, 4, 5};
  FeatureExtractor fx(fcfg);
  auto [t2, b2] = generator_objective(y_hat, y, d_fake, pair, &seg, &fx, base, false, 0);
  CHECK(t2.item() == t_base.item());
  CHECK(seg.invocation_count() == 0);
  CHECK(fx.invocation_count() == 0);

  LossWeights full;
  auto [t3, b3] = generator_objective(y_hat, y, d_fake, pair, &seg, &fx, full, false, 0);
  CHECK(seg.invocation_count() == 2);
  CHECK(fx.invocation_count() > 0);
  CHECK(b3.s >= 0.0);
  CHECK(std::abs(b3.total - (0.1 * b3.gen + 10 * b3.r + 10 * b3.proj + 2 * b3.s + 0.5 * b3.p)) <
        1e-12);
}

TEST_CASE("every agreement loss is nonnegative and zero at equality") {
  auto pair = small_pair(16, 16);
  SegNetConfig scfg;
  scfg.grid_n = 16;
  scfg.depth_z = 8;
  scfg.widths = {2, 2, 2};
  SegNet seg(scfg);
  seg.freeze();
  FeatureExtractorConfig fcfg;
  fcfg.widths = {2, 3, 4, 5};
  FeatureExtractor fx(fcfg);
  Rng rng(10);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor y = random_tensor({16, 16, 8}, rng);
    Tensor y_hat = random_tensor({16, 16, 8}, rng);
    CHECK(recon_loss(y_hat, y).item() >= 0.0);
    CHECK(projection_loss(y_hat, y, pair).item() >= 0.0);
    CHECK(dice_seg_loss(y_hat, y, seg).item() >= 0.0);
    CHECK(perceptual_loss(y_hat, y, fx).item() >= 0.0);
    CHECK(recon_loss(y, y).item() == 0.0);
    CHECK(projection_loss(y, y, pair).item() == 0.0);
    CHECK(dice_seg_loss(y, y, seg).item() == 0.0);
    CHECK(perceptual_loss(y, y, fx).item() == 0.0);
  }
}
