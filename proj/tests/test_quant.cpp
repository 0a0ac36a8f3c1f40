#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "qssm/error.hpp"
#include "qssm/ops.hpp"
#include "qssm/quant.hpp"
#include "qssm/quant_layers.hpp"
#include "test_support.hpp"

using namespace qssm;
using namespace qssm::quant;
using qssm::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor param4(std::vector<double> v) { return Tensor::from({4}, std::move(v), true); }

}  // namespace

// --- uniform quantizer ----------------------------------------------------------

TEST(ClipInt, SaturatesAndPassesInterior) {
  EXPECT_EQ(clip_int(100.0, 4), 7.0);
  EXPECT_EQ(clip_int(-100.0, 4), -8.0);
  EXPECT_EQ(clip_int(3.2, 4), 3.2);
  EXPECT_EQ(grid_min(2), -2.0);
  EXPECT_EQ(grid_max(8), 127.0);
}

TEST(QuantizeUniform, WorkedExample) {
  auto q = quantize_uniform(Tensor::from({4}, {-1.0, -0.3, 0.2, 0.9}), {4, 7.0, 0.0});
  const std::vector<double> expected{-1.0, -0.42857142857142855, 0.14285714285714285, 0.8571428571428571};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(q.at(i), expected[i], 1e-15);
}

TEST(QuantizeUniform, ShiftIdentityAndZero) {
  auto q = quantize_uniform(Tensor::full({5}, 0.37), {4, 3.3, 0.37});
  for (double v : q.data()) EXPECT_EQ(v, 0.37);
  auto z = quantize_uniform(Tensor::zeros({5}), {2, 9.0, 0.0});
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(QuantizeUniform, RejectsNonPositiveAlpha) {
  EXPECT_THROW(quantize_uniform(Tensor::zeros({2}), {4, 0.0, 0.0}), NumericError);
  EXPECT_THROW(quantize_uniform(Tensor::zeros({2}), {4, -1.0, 0.0}), NumericError);
  EXPECT_THROW(check_bits(1), ShapeError);
}

TEST(QuantizeUniform, GridCardinalitySpacingMonotoneIdempotent) {
  Rng rng(21);
  for (int bits : {2, 4, 8}) {
    for (int trial = 0; trial < 20; ++trial) {
      const UniformQuantConfig cfg{bits, rng.uniform(0.5, 20.0), rng.uniform(-1.0, 1.0)};
      Tensor x = random_tensor({400}, rng, -3, 3);
      std::sort(x.mutable_data().begin(), x.mutable_data().end());
      Tensor q = quantize_uniform(x, cfg);
      std::set<double> distinct(q.data().begin(), q.data().end());
      EXPECT_LE(distinct.size(), std::size_t{1} << bits);
      double prev = -1e300;
      for (double v : distinct) {
        if (prev > -1e300) {
          const double steps = (v - prev) * cfg.alpha;
          EXPECT_NEAR(steps, std::round(steps), 1e-9);
        }
        prev = v;
      }
      for (std::size_t i = 1; i < q.numel(); ++i) EXPECT_LE(q.at(i - 1), q.at(i));
      Tensor qq = quantize_uniform(q, cfg);
      for (std::size_t i = 0; i < q.numel(); ++i) EXPECT_NEAR(qq.at(i), q.at(i), 1e-12);
    }
  }
}

TEST(FakeQuantize, BackwardFollowsClipMaskedStraightThrough) {
  // x, alpha = 2, beta = 0.25, 2 bits: grid [-2, 1].
  Tensor x = Tensor::from({4}, {-3.0, 0.1, 0.6, 2.0}, true);
  Tensor alpha = Tensor::from({1}, {2.0}, true), beta = Tensor::from({1}, {0.25}, true);
  Tensor c = Tensor::from({4}, {1.0, 2.0, 3.0, 4.0});
  Tape tape;
  TapeScope scope(tape);
  Tensor q = fake_quantize(x, alpha, beta, 2);
  tape.backward(ops::sum(ops::mul(q, c)));
  // z = (x - beta) * alpha = [-6.5, -0.3, 0.7, 3.5]; mask = [0, 1, 1, 0]; f = [-2, -1, 0, 1].
  EXPECT_EQ(values(q), (std::vector<double>{-0.75, -0.25, 0.25, 0.75}));
  EXPECT_EQ(values(x.grad_tensor()), (std::vector<double>{0, 2, 3, 0}));
  const double mask[] = {0, 1, 1, 0}, f[] = {-2, -1, 0, 1}, xv[] = {-3.0, 0.1, 0.6, 2.0};
  double ga = 0, gb = 0;
  for (int i = 0; i < 4; ++i) {
    ga += c.at(i) * (mask[i] * (xv[i] - 0.25) / 2.0 - f[i] / 4.0);
    gb += c.at(i) * (1.0 - mask[i]);
  }
  EXPECT_NEAR(alpha.grad()[0], ga, 1e-14);
  EXPECT_NEAR(beta.grad()[0], gb, 1e-14);
}

// --- statistics and DLS ------------------------------------------------------------

TEST(Stats, WorkedExamples) {
  auto [p1, a1] = compute_stats(Tensor::from({4}, {1, 1, 1, 1}));
  EXPECT_EQ(p1.mu, 1.0);
  EXPECT_EQ(p1.sigma, 0.0);
  EXPECT_EQ(a1.mu, 1.0);
  auto [p2, a2] = compute_stats(Tensor::from({2}, {-2, 2}));
  EXPECT_EQ(p2.mu, 0.0);
  EXPECT_EQ(p2.sigma, 2.0);
  EXPECT_EQ(p2.xmin, -2.0);
  EXPECT_EQ(p2.xmax, 2.0);
  auto [p3, a3] = compute_stats(Tensor::from({4}, {-3, -1, 0, 4}));
  EXPECT_EQ(p3.mu, 0.0);
  EXPECT_NEAR(p3.sigma, 2.5495097567963922, 1e-15);
  EXPECT_EQ(p3.xmin, -3.0);
  EXPECT_EQ(p3.xmax, 4.0);
  auto [p4, a4] = compute_stats(Tensor::from({2}, {-5, 1}));
  EXPECT_EQ(p4.mu, -2.0);
  EXPECT_EQ(a4.mu, 2.0);
  EXPECT_THROW(compute_stats(std::span<const double>{}), ShapeError);
}

TEST(Dls, ScaleShiftInnerProducts) {
  // phi' = (0.5, 0.2, -1, 1) from x = [-1, 1, ...] is not realisable directly,
  // so build the features by hand.
  StatFeatures f{Tensor::from({4}, {0.5, 0.2, -1, 1}), Tensor::from({4}, {0.5, 0.2, -1, 1})};
  auto ss = dls_scale_shift(f, {param4({1, 3, 0, 0}), param4({1, 0, 0, 0})});
  EXPECT_NEAR(ss.alpha.item(), 1.1, 1e-15);
  EXPECT_EQ(ss.beta.item(), 0.5);
  auto neg = dls_scale_shift(f, {param4({-1, -3, 0, 0}), param4({0, 0, 0.5, 0.5})});
  EXPECT_NEAR(neg.alpha.item(), 1.1, 1e-15);
  EXPECT_EQ(neg.beta.item(), 0.0);
}

TEST(Dls, ZeroScaleIsAnError) {
  Tensor x = Tensor::from({3}, {0.1, 0.2, 0.3});
  EXPECT_THROW(dls_quantize(x, {param4({0, 0, 0, 0}), param4({1, 0, 0, 0})}, 4), NumericError);
}

TEST(Dls, ConstantInputMapsToItself) {
  Tensor x = Tensor::full({6}, 0.8);
  auto p = init_dls(x, 4);
  EXPECT_EQ(values(dls_quantize(x, p, 4)), values(x));
}

TEST(Dls, RangeAdaptsToInput) {
  DlsParams p{param4({0.3, 1.2, -0.1, 0.4}), param4({1.0, 0.1, 0.2, 0.3})};
  Rng rng(22);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({50}, rng, rng.uniform(-3, 0), rng.uniform(0.5, 3));
    auto [phi, phi_abs] = compute_stats(x);
    auto ss = dls_scale_shift(stat_features(x), p);
    const double a = std::fabs(0.3 * phi_abs.mu + 1.2 * phi_abs.sigma - 0.1 * phi_abs.xmin + 0.4 * phi_abs.xmax);
    const double b = 1.0 * phi.mu + 0.1 * phi.sigma + 0.2 * phi.xmin + 0.3 * phi.xmax;
    EXPECT_NEAR(ss.alpha.item(), a, 1e-13);
    EXPECT_NEAR(ss.beta.item(), b, 1e-13);
  }
}

TEST(Dls, InitStrategies) {
  Tensor pm1 = Tensor::from({6}, {-1, 1, -1, 1, -1, 1});
  auto g1 = init_dls(pm1, 4, DlsInit::kMu3SigmaMu);
  auto ss = dls_scale_shift(stat_features(pm1), g1);
  EXPECT_NEAR(ss.alpha.item(), 7.0 / 3.0, 1e-14);  // r = 0 + 3 * 1
  EXPECT_EQ(ss.beta.item(), 0.0);

  Tensor s = Tensor::from({2}, {-2, 6});
  auto mm = init_dls(s, 4, DlsInit::kMinMaxMid);
  auto ss2 = dls_scale_shift(stat_features(s), mm);
  EXPECT_NEAR(ss2.alpha.item(), 7.0 / 4.0, 1e-14);  // half-range 4
  EXPECT_EQ(ss2.beta.item(), 2.0);

  auto g3 = dls_scale_shift(stat_features(s), init_dls(s, 4, DlsInit::kMu3SigmaMid));
  EXPECT_NEAR(g3.alpha.item(), 7.0 / (2.0 + 3.0 * 4.0), 1e-14);
  EXPECT_EQ(g3.beta.item(), 2.0);
  auto g4 = dls_scale_shift(stat_features(s), init_dls(s, 4, DlsInit::kMinMaxMu));
  EXPECT_NEAR(g4.alpha.item(), 7.0 / 4.0, 1e-14);
  EXPECT_EQ(g4.beta.item(), 2.0);

  EXPECT_THROW(init_dls(Tensor::zeros({4}), 4), NumericError);
  EXPECT_EQ(parse_dls_init(to_string(DlsInit::kMinMaxMu)), DlsInit::kMinMaxMu);
}

TEST(Dls, OutlierClipsAndDenseRegionBeatsMinMax) {
  Rng rng(23);
  Tensor x = random_tensor({2000}, rng, -1, 1);
  x.mutable_data()[17] = 50.0;
  auto p = init_dls(x, 4);
  Tensor q = dls_quantize(x, p, 4);
  const double top = *std::max_element(q.data().begin(), q.data().end());
  EXPECT_EQ(q.at(17), top);
  const auto mm = minmax_uniform(x.data(), 4);
  Tensor qs = quantize_uniform(x, mm);
  double e_dls = 0, e_mm = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (i == 17) continue;
    e_dls += (q.at(i) - x.at(i)) * (q.at(i) - x.at(i));
    e_mm += (qs.at(i) - x.at(i)) * (qs.at(i) - x.at(i));
  }
  EXPECT_LT(e_dls, e_mm);
}

// Hand chain rule for L = sum(c * Q_dls(x)): straight-through interior, zero on
// clipped elements, plus the scale/shift paths back through the statistics.
TEST(Dls, BackwardMatchesHandChainRule) {
  Rng rng(24);
  const std::size_t n = 40;
  Tensor x = random_tensor({n}, rng, -1.5, 2.0, true);
  x.mutable_data()[3] = 20.0;  // forces clipping at the top
  Tensor c = random_tensor({n}, rng, -1, 1);
  DlsParams p = init_dls(x, 2);
  p.w1.mutable_data()[2] = 0.001;  // give x_min a say in the scale
  p.w2.mutable_data()[1] = 0.1;

  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::mul(dls_quantize(x, p, 2), c)));
  }

  auto [phi, phi_abs] = compute_stats(x);
  const std::vector<double> f1{phi_abs.mu, phi_abs.sigma, phi_abs.xmin, phi_abs.xmax};
  const std::vector<double> f2{phi.mu, phi.sigma, phi.xmin, phi.xmax};
  double a_raw = 0, beta = 0;
  for (int k = 0; k < 4; ++k) {
    a_raw += p.w1.at(k) * f1[k];
    beta += p.w2.at(k) * f2[k];
  }
  const double alpha = std::fabs(a_raw), sgn = a_raw >= 0 ? 1.0 : -1.0;
  std::vector<double> mask(n), gx(n, 0.0);
  double g_alpha = 0, g_beta = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = (x.at(i) - beta) * alpha;
    const double f = std::floor(std::clamp(z, grid_min(2), grid_max(2)));
    mask[i] = (z >= grid_min(2) && z <= grid_max(2)) ? 1.0 : 0.0;
    g_alpha += c.at(i) * (mask[i] * (x.at(i) - beta) / alpha - f / (alpha * alpha));
    g_beta += c.at(i) * (1.0 - mask[i]);
    gx[i] += c.at(i) * mask[i];
  }
  const auto argmin = std::min_element(x.data().begin(), x.data().end()) - x.data().begin();
  const auto argmax = std::max_element(x.data().begin(), x.data().end()) - x.data().begin();
  const double mu_sign = phi.mu >= 0 ? 1.0 : -1.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double dmu = 1.0 / n, dsig = (x.at(j) - phi.mu) / (n * phi.sigma);
    const double dmin = static_cast<double>(j) == static_cast<double>(argmin) ? 1.0 : 0.0;
    const double dmax = static_cast<double>(j) == static_cast<double>(argmax) ? 1.0 : 0.0;
    const double dalpha =
        sgn * (p.w1.at(0) * mu_sign * dmu + p.w1.at(1) * dsig + p.w1.at(2) * dmin + p.w1.at(3) * dmax);
    const double dbeta = p.w2.at(0) * dmu + p.w2.at(1) * dsig + p.w2.at(2) * dmin + p.w2.at(3) * dmax;
    gx[j] += g_alpha * dalpha + g_beta * dbeta;
  }
  for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(x.grad()[j], gx[j], 1e-10) << j;
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(p.w1.grad()[k], g_alpha * sgn * f1[k], 1e-10);
    EXPECT_NEAR(p.w2.grad()[k], g_beta * f2[k], 1e-10);
  }
  EXPECT_NE(p.w2.grad()[0], 0.0);
}

// --- RFA ------------------------------------------------------------------------------

TEST(Rfa, Levels) {
  EXPECT_EQ(rfa_levels(2, -1.0, 0.5), (std::vector<double>{-1.0, -0.5, 0.0, 0.5}));
  EXPECT_EQ(rfa_levels(2, 0.0, 3.0), (std::vector<double>{0, 1, 2, 3}));
  auto q = rfa_levels(4, -1.0, 1.0);
  ASSERT_EQ(q.size(), 16u);
  for (std::size_t i = 1; i < q.size(); ++i) EXPECT_NEAR(q[i] - q[i - 1], 2.0 / 15.0, 1e-15);
  EXPECT_EQ(q.front(), -1.0);
  EXPECT_EQ(q.back(), 1.0);
  EXPECT_THROW(rfa_levels(2, 1.0, 1.0), ShapeError);
}

TEST(Rfa, HalfOpenIntervalLookup) {
  RfaParams p;
  p.bits = 2;
  p.levels = {-1, 0, 1, 2};
  p.thresholds = Tensor::from({4}, {-1.5, -0.5, 0.5, 1.5});
  auto y = rfa_forward(Tensor::from({6}, {0.3, 0.6, 0.5, -0.5, -100.0, 100.0}), p);
  EXPECT_EQ(values(y), (std::vector<double>{0, 1, 1, 0, -1, 2}));
  p.thresholds = Tensor::from({4}, {-1.5, 0.5, -0.5, 1.5});
  EXPECT_THROW(rfa_forward(Tensor::zeros({1}), p), ShapeError);
}

TEST(Rfa, InitPlacesMidpointThresholds) {
  auto p = init_rfa(Tensor::from({4}, {0, 1, 2, 3}), 2);
  EXPECT_EQ(p.levels, (std::vector<double>{0, 1, 2, 3}));
  EXPECT_EQ(values(p.thresholds), (std::vector<double>{-0.5, 0.5, 1.5, 2.5}));
  EXPECT_EQ(p.fixed_slope, 0.1);
  EXPECT_EQ(p.transition_halfwidth, 0.05);
  EXPECT_THROW(init_rfa(Tensor::full({3}, 2.0), 2), NumericError);

  auto s = init_rfa(Tensor::from({5}, {-2, -1, 0, 1, 2}), 4);
  auto t = values(s.thresholds);
  for (std::size_t i = 1; i < t.size(); ++i) EXPECT_NEAR(t[i], -t[t.size() - i], 1e-15);
}

TEST(Rfa, MidpointThresholdsRoundToNearest) {
  Rng rng(25);
  for (int bits : {2, 4, 8}) {
    Tensor w = random_tensor({3000}, rng, -1, 1);
    auto p = init_rfa(w, bits);
    Tensor probe = random_tensor({3000}, rng, -1.5, 1.5);
    auto y = rfa_forward(probe, p);
    for (std::size_t i = 0; i < probe.numel(); ++i) {
      double best = p.levels[0];
      for (double q : p.levels) {
        if (std::fabs(q - probe.at(i)) < std::fabs(best - probe.at(i))) best = q;
      }
      ASSERT_EQ(y.at(i), best);
    }
  }
}

TEST(Rfa, ForwardIsMonotone) {
  Rng rng(26);
  Tensor w = random_tensor({200}, rng, -1, 1);
  auto p = init_rfa(w, 4);
  auto t = p.thresholds.mutable_data();
  for (std::size_t i = 1; i < t.size(); ++i) t[i] += rng.uniform(-0.3, 0.3) * p.step();
  project_thresholds(p);
  Tensor probe = random_tensor({500}, rng, -1.2, 1.2);
  std::sort(probe.mutable_data().begin(), probe.mutable_data().end());
  auto y = rfa_forward(probe, p);
  for (std::size_t i = 1; i < y.numel(); ++i) EXPECT_LE(y.at(i - 1), y.at(i));
}

TEST(Sba, SlopesAtMidpointAndInsideZone) {
  auto p = init_rfa(Tensor::from({4}, {0, 1, 2, 3}), 2);
  EXPECT_EQ(sba_slope(1.0, p).slope, 0.1);  // level centre
  EXPECT_EQ(sba_slope(1.0, p).zone_threshold, -1);
  const auto in_zone = sba_slope(1.48, p);
  EXPECT_EQ(in_zone.slope, 1.0);  // dq / width = 1 / 1
  EXPECT_EQ(in_zone.zone_threshold, 2);
  EXPECT_EQ(sba_slope(1.52, p).zone_threshold, 2);
  EXPECT_EQ(sba_slope(-0.48, p).slope, 0.1);  // outer sentinel has no zone
  EXPECT_EQ(sba_slope(-5.0, p).slope, 0.1);
}

TEST(Sba, ZeroHalfwidthGivesFixedSlopeAndNoThresholdGradient) {
  Rng rng(27);
  Tensor w = random_tensor({300}, rng, -1, 1);
  auto p = init_rfa(w, 2, 0.0);
  auto g = rfa_backward(w, p, Tensor::full({300}, 1.0));
  for (double v : g.grad_w.data()) EXPECT_EQ(v, 0.1);
  for (double v : g.grad_thresholds.data()) EXPECT_EQ(v, 0.0);
}

TEST(Sba, ThresholdGradientCollectsZoneSlopes) {
  Rng rng(28);
  Tensor w = random_tensor({500}, rng, -1, 1);
  auto p = init_rfa(w, 2, 0.2);
  auto t = p.thresholds.mutable_data();
  t[2] += 0.1 * p.step();  // uneven widths so adaptive slopes differ from 1
  Tensor g_up = random_tensor({500}, rng, -1, 1);
  auto g = rfa_backward(w, p, g_up);
  std::vector<double> expected(4, 0.0);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    auto s = sba_slope(w.at(i), p);
    EXPECT_EQ(g.grad_w.at(i), g_up.at(i) * s.slope);
    if (s.zone_threshold >= 0) expected[s.zone_threshold] -= g_up.at(i) * s.slope;
  }
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(g.grad_thresholds.at(j), expected[j], 1e-12);
  EXPECT_EQ(g.grad_thresholds.at(0), 0.0);
}

TEST(Sba, SlopeBoundedAcrossFineGrid) {
  Rng rng(29);
  Tensor w = random_tensor({100}, rng, -1, 1);
  auto p = init_rfa(w, 4);
  auto t = p.thresholds.mutable_data();
  for (std::size_t i = 1; i < t.size(); ++i) t[i] += rng.uniform(-0.2, 0.2) * p.step();
  project_thresholds(p);
  double lo = 0.1, hi = 0.1;
  for (std::size_t i = 1; i < t.size(); ++i) {
    const double width = (i + 1 < t.size() ? t[i + 1] : t[i] + (t[i] - t[i - 1])) - t[i];
    lo = std::min(lo, p.step() / std::max(width, t[i] - t[i - 1]));
    hi = std::max(hi, p.step() / std::min(width, t[i] - t[i - 1]));
  }
  for (double x = -1.2; x < 1.2; x += p.step() / 1000.0) {
    const double s = sba_slope(x, p).slope;
    EXPECT_GE(s, lo - 1e-12);
    EXPECT_LE(s, hi + 1e-12);
  }
}

TEST(Rfa, TapeGradientUsesSoftBackward) {
  Rng rng(30);
  Tensor w = random_tensor({50}, rng, -1, 1, true);
  auto p = init_rfa(w, 2);
  Tensor c = random_tensor({50}, rng, -1, 1);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::mul(rfa_quantize(w, p), c)));
  }
  auto ref = rfa_backward(w, p, c);
  EXPECT_EQ(values(w.grad_tensor()), values(ref.grad_w));
  EXPECT_EQ(values(p.thresholds.grad_tensor()), values(ref.grad_thresholds));
}

TEST(Rfa, ProjectionRestoresStrictOrder) {
  auto p = init_rfa(Tensor::from({4}, {0, 1, 2, 3}), 2);
  auto t = p.thresholds.mutable_data();
  t[2] = 0.2;  // crossed below t[1] = 0.5
  t[3] = 0.5;
  project_thresholds(p);
  EXPECT_NO_THROW(p.validate());
  EXPECT_NEAR(t[2] - t[1], 1e-6, 1e-15);
  EXPECT_GE(t[3] - t[2], 1e-6 - 1e-15);
}

// --- packing ---------------------------------------------------------------------

TEST(Packing, PayloadSizes) {
  auto q2 = rfa_levels(2, 0.0, 3.0);
  auto p8 = pack_weights(Tensor::from({8}, {0, 1, 2, 3, 3, 2, 1, 0}), q2, 2);
  EXPECT_EQ(p8.bitstream.size(), 2u);
  auto q4 = rfa_levels(4, 0.0, 15.0);
  auto p3 = pack_weights(Tensor::from({3}, {1, 15, 7}), q4, 4);
  EXPECT_EQ(p3.bitstream.size(), 2u);
  EXPECT_EQ(p3.bitstream[1] & 0xF0, 0);  // zero padding
}

TEST(Packing, LeastSignificantBitsFirst) {
  auto p = pack_weights(Tensor::from({4}, {1, 2, 3, 0}), rfa_levels(2, 0.0, 3.0), 2);
  ASSERT_EQ(p.bitstream.size(), 1u);
  EXPECT_EQ(p.bitstream[0], 1 | (2 << 2) | (3 << 4));
}

TEST(Packing, RoundTripAndOffGrid) {
  Rng rng(31);
  for (int bits : {2, 4, 8}) {
    Tensor w = random_tensor({7, 13}, rng, -1, 1);
    auto p = init_rfa(w, bits);
    Tensor wq = rfa_forward(w, p);
    auto packed = pack_weights(wq, p.levels, bits);
    EXPECT_EQ(packed.bitstream.size(), (bits * 91 + 7) / 8);
    EXPECT_EQ(values(unpack_weights(packed)), values(wq));
    auto bytes = serialize(packed);
    EXPECT_EQ(bytes.size(), packed_header_size(packed) + packed.bitstream.size());
    EXPECT_EQ(packed_header_size(packed), 4u + 2 + 1 + 1 + 4 * 2 + 2 + 8 * (std::size_t{1} << bits));
    std::size_t used = 0;
    auto back = deserialize(bytes, &used);
    EXPECT_EQ(used, bytes.size());
    EXPECT_EQ(values(unpack_weights(back)), values(wq));
    EXPECT_EQ(back.shape, packed.shape);
  }
  EXPECT_THROW(pack_weights(Tensor::from({1}, {0.5}), rfa_levels(2, 0.0, 3.0), 2), NumericError);
}

TEST(Packing, CorruptMagic) {
  auto packed = pack_weights(Tensor::from({2}, {0, 1}), rfa_levels(2, 0.0, 3.0), 2);
  auto bytes = serialize(packed);
  bytes[0] = 'X';
  try {
    deserialize(bytes);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("not a QSSM container"), std::string::npos);
  }
  bytes = serialize(packed);
  bytes.resize(bytes.size() - 1);
  EXPECT_THROW(deserialize(bytes), DataError);
}

// --- quantizer slots ---------------------------------------------------------------

TEST(QuantLayers, StaticWeightSitsOnUniformGrid) {
  Rng rng(32);
  QuantWeight w;
  w.name = "w";
  w.latent = random_tensor({20}, rng, -1, 1, true);
  w.quantize(Method::kStatic, 2);
  auto e = w.effective_values();
  std::set<double> distinct(e.data().begin(), e.data().end());
  EXPECT_LE(distinct.size(), 4u);
  w.quantize(Method::kQssm, 2);
  auto r = w.effective_values();
  for (double v : r.data()) {
    EXPECT_TRUE(std::find(w.rfa.levels.begin(), w.rfa.levels.end(), v) != w.rfa.levels.end());
  }
  EXPECT_EQ(parse_method("dls_rfa"), Method::kQssm);
  EXPECT_EQ(parse_method("ste"), Method::kStatic);
  EXPECT_THROW(parse_method("bogus"), ConfigError);
}

TEST(QuantLayers, HookSeesActivationBeforeQuantization) {
  ActSite site;
  site.name = "s";
  site.calibrate(Method::kQssm, 4, Tensor::from({4}, {-1, 0, 1, 2}), DlsInit::kMu3SigmaMu);
  std::string seen;
  ActivationHook hook = [&](const std::string& name, Tensor& x) {
    seen = name;
    x.mutable_data()[0] = 0.123456;
  };
  auto y = site.apply(Tensor::from({4}, {-1, 0, 1, 2}), ForwardContext{&hook});
  EXPECT_EQ(seen, "s");
  EXPECT_NE(y.at(0), -1.0);
  try {
    site.calibrate(Method::kQssm, 4, Tensor::zeros({3}), DlsInit::kMu3SigmaMu);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'s'"), std::string::npos);
  }
}
