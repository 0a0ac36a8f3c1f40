#include "qssm/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qssm/bytes.hpp"
#include "qssm/error.hpp"
#include "qssm/ops.hpp"

namespace qssm::quant {

void check_bits(int bits) {
  if (bits < 2 || bits > 16) throw ShapeError("bit-width must be in [2, 16], got " + std::to_string(bits));
}

double grid_min(int bits) { return -std::ldexp(1.0, bits - 1); }
double grid_max(int bits) { return std::ldexp(1.0, bits - 1) - 1.0; }

double clip_int(double x, int bits) { return std::max(std::min(x, grid_max(bits)), grid_min(bits)); }

Tensor clip_int(const Tensor& x, int bits) {
  check_bits(bits);
  return ops::clamp(x, grid_min(bits), grid_max(bits));
}

void UniformQuantConfig::validate() const {
  check_bits(bits);
  if (!(alpha > 0.0)) throw NumericError("uniform quantizer: alpha must be > 0");
}

namespace {

// Floor that forgives rounding shortfalls: a value a few ulps below an integer
// (as when re-quantizing k / alpha + beta) stays on that integer.
double grid_floor(double z) { return std::floor(z + 1e-9); }

}  // namespace

double quantize_uniform(double x, const UniformQuantConfig& cfg) {
  return grid_floor(clip_int((x - cfg.beta) * cfg.alpha, cfg.bits)) / cfg.alpha + cfg.beta;
}

Tensor quantize_uniform(const Tensor& x, const UniformQuantConfig& cfg) {
  cfg.validate();
  Tensor out = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = quantize_uniform(xd[i], cfg);
  return out;
}

Tensor fake_quantize(const Tensor& x, const Tensor& alpha, const Tensor& beta, int bits) {
  check_bits(bits);
  if (alpha.numel() != 1 || beta.numel() != 1) throw ShapeError("fake_quantize: alpha/beta must be scalars");
  const double a = alpha.item();
  const double b = beta.item();
  if (!(a > 0.0)) throw NumericError("fake_quantize: scale must be > 0 (degenerate range)");
  const double lo = grid_min(bits), hi = grid_max(bits);
  CustomGradNode node;
  node.name = "fake_quantize";
  node.output_shape = x.shape();
  node.forward = [=](std::span<const Tensor> in) {
    return quantize_uniform(in[0], UniformQuantConfig{bits, a, b});
  };
  node.backward = [=](std::span<const Tensor> in, const Tensor&, const Tensor& g) {
    auto xd = in[0].data();
    auto gd = g.data();
    Tensor gx = Tensor::zeros(in[0].shape());
    auto gxd = gx.mutable_data();
    double ga = 0.0, gb = 0.0;
    for (std::size_t i = 0; i < xd.size(); ++i) {
      const double z = (xd[i] - b) * a;
      const bool inside = z >= lo && z <= hi;
      const double f = grid_floor(std::clamp(z, lo, hi));
      if (inside) {
        gxd[i] = gd[i];
        ga += gd[i] * ((xd[i] - b) / a - f / (a * a));
      } else {
        ga += gd[i] * (-f / (a * a));
        gb += gd[i];
      }
    }
    return std::vector<Tensor>{gx, Tensor::scalar(ga), Tensor::scalar(gb)};
  };
  return register_custom_grad(node, {x, alpha, beta});
}

// --- Statistics ---------------------------------------------------------------

std::pair<StatsVector, StatsVector> compute_stats(std::span<const double> x) {
  if (x.empty()) throw ShapeError("compute_stats: empty tensor");
  const double n = static_cast<double>(x.size());
  // Shifted by x[0] so a constant tensor yields its value exactly.
  double s = 0.0, mn = x[0], mx = x[0];
  for (double v : x) {
    s += v - x[0];
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  const double mu = x[0] + s / n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  StatsVector phi{mu, std::sqrt(var / n), mn, mx};
  StatsVector phi_abs = phi;
  phi_abs.mu = std::fabs(mu);
  return {phi, phi_abs};
}

std::pair<StatsVector, StatsVector> compute_stats(const Tensor& x) { return compute_stats(x.data()); }

StatFeatures stat_features(const Tensor& x) {
  CustomGradNode node;
  node.name = "stat_features";
  node.output_shape = Shape{4};
  node.forward = [](std::span<const Tensor> in) {
    auto [phi, unused] = compute_stats(in[0]);
    (void)unused;
    return Tensor::from({4}, {phi.mu, phi.sigma, phi.xmin, phi.xmax});
  };
  node.backward = [](std::span<const Tensor> in, const Tensor& out, const Tensor& g) {
    auto xd = in[0].data();
    auto od = out.data();
    auto gd = g.data();
    const double n = static_cast<double>(xd.size());
    const double mu = od[0], sigma = od[1];
    Tensor gx = Tensor::zeros(in[0].shape());
    auto gxd = gx.mutable_data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
      gxd[i] = gd[0] / n;
      if (sigma > 0.0) gxd[i] += gd[1] * (xd[i] - mu) / (n * sigma);
    }
    const auto argmin = std::min_element(xd.begin(), xd.end()) - xd.begin();
    const auto argmax = std::max_element(xd.begin(), xd.end()) - xd.begin();
    gxd[argmin] += gd[2];
    gxd[argmax] += gd[3];
    return std::vector<Tensor>{gx};
  };
  Tensor phi = register_custom_grad(node, {x});
  // |mu| = sign(mu) * mu, with the sign held constant (matches d|mu|/dmu).
  const double mu = phi.at(0);
  const double sign = mu > 0.0 ? 1.0 : (mu < 0.0 ? -1.0 : 0.0);
  Tensor phi_abs = ops::mul(phi, Tensor::from({4}, {sign, 1.0, 1.0, 1.0}));
  return {phi, phi_abs};
}

// --- DLS --------------------------------------------------------------------------

DlsInit parse_dls_init(const std::string& name) {
  if (name == "mu3sigma_mu") return DlsInit::kMu3SigmaMu;
  if (name == "minmax_mid") return DlsInit::kMinMaxMid;
  if (name == "mu3sigma_mid") return DlsInit::kMu3SigmaMid;
  if (name == "minmax_mu") return DlsInit::kMinMaxMu;
  throw ConfigError("unknown DLS init strategy '" + name + "'");
}

std::string to_string(DlsInit init) {
  switch (init) {
    case DlsInit::kMu3SigmaMu: return "mu3sigma_mu";
    case DlsInit::kMinMaxMid: return "minmax_mid";
    case DlsInit::kMu3SigmaMid: return "mu3sigma_mid";
    case DlsInit::kMinMaxMu: return "minmax_mu";
  }
  return "?";
}

ScaleShift dls_scale_shift(const StatFeatures& features, const DlsParams& params) {
  Tensor a = ops::matmul(ops::reshape(params.w1, {1, 4}), ops::reshape(features.phi_abs, {4, 1}));
  Tensor b = ops::matmul(ops::reshape(params.w2, {1, 4}), ops::reshape(features.phi, {4, 1}));
  return {ops::reshape(ops::abs(a), {1}), ops::reshape(b, {1})};
}

Tensor dls_quantize(const Tensor& x, const DlsParams& params, int bits) {
  ScaleShift ss = dls_scale_shift(stat_features(x), params);
  if (!(ss.alpha.item() > 0.0)) throw NumericError("DLS: projected scale is zero (degenerate range)");
  return fake_quantize(x, ss.alpha, ss.beta, bits);
}

DlsParams init_dls(const Tensor& sample, int bits, DlsInit strategy) {
  check_bits(bits);
  auto [phi, phi_abs] = compute_stats(sample);
  const bool alpha_from_sigma = strategy == DlsInit::kMu3SigmaMu || strategy == DlsInit::kMu3SigmaMid;
  const bool beta_from_mean = strategy == DlsInit::kMu3SigmaMu || strategy == DlsInit::kMinMaxMu;

  const double minmax_half = 0.5 * (phi.xmax - phi.xmin);
  double r = alpha_from_sigma ? phi_abs.mu + 3.0 * phi_abs.sigma : minmax_half;
  std::vector<double> direction = alpha_from_sigma ? std::vector<double>{1.0, 3.0, 0.0, 0.0}
                                                   : std::vector<double>{0.0, 0.0, -0.5, 0.5};
  if (!(r > 0.0)) {
    r = minmax_half;
    direction = {0.0, 0.0, -0.5, 0.5};
  }
  if (!(r > 0.0)) throw NumericError("DLS init: calibration sample has zero range");

  // direction . phi' == r, so w1 . phi' == grid_max / r on the calibration sample.
  const double c = grid_max(bits) / (r * r);
  std::vector<double> w1(4);
  for (int i = 0; i < 4; ++i) w1[i] = c * direction[i];
  std::vector<double> w2 = beta_from_mean ? std::vector<double>{1.0, 0.0, 0.0, 0.0}
                                          : std::vector<double>{0.0, 0.0, 0.5, 0.5};
  return {Tensor::from({4}, std::move(w1), true), Tensor::from({4}, std::move(w2), true)};
}

// --- RFA --------------------------------------------------------------------------

void RfaParams::validate() const {
  check_bits(bits);
  const std::size_t n = std::size_t{1} << bits;
  if (levels.size() != n) throw ShapeError("RFA: expected " + std::to_string(n) + " levels");
  if (!thresholds.defined() || thresholds.numel() != n) throw ShapeError("RFA: threshold count mismatch");
  auto t = thresholds.data();
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (!(t[i] > t[i - 1])) throw ShapeError("RFA: thresholds must be strictly increasing");
  }
  if (!(transition_halfwidth >= 0.0 && transition_halfwidth < 0.5)) {
    throw ShapeError("RFA: transition half-width must lie in [0, 0.5)");
  }
}

std::vector<double> rfa_levels(int bits, double w_min, double w_max) {
  check_bits(bits);
  if (!(w_min < w_max)) throw ShapeError("rfa_levels: w_min must be < w_max");
  const std::size_t n = std::size_t{1} << bits;
  std::vector<double> q(n);
  const double step = (w_max - w_min) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) q[i] = w_min + step * static_cast<double>(i);
  q.back() = w_max;
  return q;
}

std::size_t rfa_level_index(double w, std::span<const double> thresholds) {
  // Number of thresholds <= w, minus one; values below T_1 clamp to the first level.
  const auto it = std::upper_bound(thresholds.begin(), thresholds.end(), w);
  const std::size_t count = static_cast<std::size_t>(it - thresholds.begin());
  return count == 0 ? 0 : count - 1;
}

Tensor rfa_forward(const Tensor& w, const RfaParams& params) {
  params.validate();
  Tensor out = Tensor::zeros(w.shape());
  auto wd = w.data();
  auto od = out.mutable_data();
  auto t = params.thresholds.data();
  for (std::size_t i = 0; i < wd.size(); ++i) od[i] = params.levels[rfa_level_index(wd[i], t)];
  return out;
}

SlopeInfo sba_slope(double w, const RfaParams& params) {
  auto t = params.thresholds.data();
  const std::size_t n = t.size();
  if (w < t[0]) return {params.fixed_slope, -1};
  const std::size_t k = rfa_level_index(w, t);
  // The unbounded top interval borrows its neighbour's width.
  const double width = k + 1 < n ? t[k + 1] - t[k] : t[n - 1] - t[n - 2];
  const double dq = k + 1 < n ? params.levels[k + 1] - params.levels[k] : params.levels[n - 1] - params.levels[n - 2];
  const double zone = params.transition_halfwidth * width;
  // T_1 is an outer clamp, not a level jump, so it carries no transition zone.
  if (k >= 1 && w - t[k] < zone) return {dq / width, static_cast<int>(k)};
  if (k + 1 < n && t[k + 1] - w < zone) return {dq / width, static_cast<int>(k + 1)};
  return {params.fixed_slope, -1};
}

RfaGrad rfa_backward(const Tensor& w, const RfaParams& params, const Tensor& grad_up) {
  if (w.shape() != grad_up.shape()) throw ShapeError("rfa_backward: gradient shape mismatch");
  Tensor gw = Tensor::zeros(w.shape());
  Tensor gt = Tensor::zeros(params.thresholds.shape());
  auto wd = w.data();
  auto gu = grad_up.data();
  auto gwd = gw.mutable_data();
  auto gtd = gt.mutable_data();
  for (std::size_t i = 0; i < wd.size(); ++i) {
    const SlopeInfo s = sba_slope(wd[i], params);
    gwd[i] = gu[i] * s.slope;
    // Moving a threshold right delays its level jump.
    if (s.zone_threshold >= 0) gtd[static_cast<std::size_t>(s.zone_threshold)] -= gu[i] * s.slope;
  }
  return {gw, gt};
}

Tensor rfa_quantize(const Tensor& w, const RfaParams& params) {
  params.validate();
  CustomGradNode node;
  node.name = "rfa_quantize";
  node.output_shape = w.shape();
  RfaParams p = params;  // shares the thresholds tensor
  node.forward = [p](std::span<const Tensor> in) { return rfa_forward(in[0], p); };
  node.backward = [p](std::span<const Tensor> in, const Tensor&, const Tensor& g) {
    RfaGrad r = rfa_backward(in[0], p, g);
    return std::vector<Tensor>{r.grad_w, r.grad_thresholds};
  };
  return register_custom_grad(node, {w, params.thresholds});
}

RfaParams init_rfa(const Tensor& w, int bits, double transition_halfwidth) {
  check_bits(bits);
  if (w.numel() == 0) throw ShapeError("init_rfa: empty tensor");
  auto [mn_it, mx_it] = std::minmax_element(w.data().begin(), w.data().end());
  if (!(*mn_it < *mx_it)) throw NumericError("init_rfa: constant tensor has zero range");
  RfaParams p;
  p.bits = bits;
  p.levels = rfa_levels(bits, *mn_it, *mx_it);
  p.transition_halfwidth = transition_halfwidth;
  const std::size_t n = p.levels.size();
  std::vector<double> t(n);
  t[0] = p.levels[0] - 0.5 * p.step();
  for (std::size_t i = 1; i < n; ++i) t[i] = 0.5 * (p.levels[i - 1] + p.levels[i]);
  p.thresholds = Tensor::from({n}, std::move(t), true);
  p.validate();
  return p;
}

void project_thresholds(RfaParams& params) {
  auto t = params.thresholds.mutable_data();
  const double gap = 1e-6 * params.step();
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (t[i] < t[i - 1] + gap) t[i] = t[i - 1] + gap;
  }
}

// --- Packing ------------------------------------------------------------------------

PackedWeights pack_weights(const Tensor& w_hat, std::span<const double> levels, int bits) {
  check_bits(bits);
  if (levels.size() != (std::size_t{1} << bits)) throw ShapeError("pack_weights: level count mismatch");
  PackedWeights pw;
  pw.bits = bits;
  pw.shape = w_hat.shape();
  pw.levels.assign(levels.begin(), levels.end());
  const std::size_t nbits = static_cast<std::size_t>(bits) * w_hat.numel();
  pw.bitstream.assign((nbits + 7) / 8, 0);
  auto wd = w_hat.data();
  for (std::size_t e = 0; e < wd.size(); ++e) {
    const auto it = std::lower_bound(levels.begin(), levels.end(), wd[e] - 1e-9);
    if (it == levels.end() || std::fabs(*it - wd[e]) > 1e-9) {
      throw NumericError("pack_weights: value " + std::to_string(wd[e]) + " is not on the level grid");
    }
    const auto index = static_cast<std::uint32_t>(it - levels.begin());
    for (int b = 0; b < bits; ++b) {
      if ((index >> b) & 1u) {
        const std::size_t pos = e * static_cast<std::size_t>(bits) + static_cast<std::size_t>(b);
        pw.bitstream[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
      }
    }
  }
  return pw;
}

Tensor unpack_weights(const PackedWeights& packed) {
  const std::size_t n = shape_numel(packed.shape);
  std::vector<double> values(n);
  for (std::size_t e = 0; e < n; ++e) {
    std::uint32_t index = 0;
    for (int b = 0; b < packed.bits; ++b) {
      const std::size_t pos = e * static_cast<std::size_t>(packed.bits) + static_cast<std::size_t>(b);
      if ((packed.bitstream[pos / 8] >> (pos % 8)) & 1u) index |= 1u << b;
    }
    if (index >= packed.levels.size()) throw DataError("unpack_weights: level index out of range");
    values[e] = packed.levels[index];
  }
  return Tensor::from(packed.shape, std::move(values));
}

namespace {
constexpr char kMagic[4] = {'Q', 'S', 'S', 'M'};
constexpr std::uint16_t kVersion = 1;
}  // namespace

std::size_t packed_header_size(const PackedWeights& packed) {
  return 4 + 2 + 1 + 1 + 4 * packed.shape.size() + 2 + 8 * packed.levels.size();
}

std::vector<std::uint8_t> serialize(const PackedWeights& packed) {
  bytes::Writer w;
  for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kVersion);
  w.put(static_cast<std::uint8_t>(packed.bits));
  w.put(static_cast<std::uint8_t>(packed.shape.size()));
  for (auto d : packed.shape) w.put(static_cast<std::uint32_t>(d));
  w.put(static_cast<std::uint16_t>(packed.levels.size()));
  for (double q : packed.levels) w.put(q);
  w.put_bytes(packed.bitstream);
  return std::move(w.buffer());
}

PackedWeights deserialize(std::span<const std::uint8_t> in, std::size_t* consumed) {
  bytes::Reader r(in);
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0) throw DataError("not a QSSM container");
  r.get_bytes(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) throw DataError("unsupported QSSM version " + std::to_string(version));
  PackedWeights pw;
  pw.bits = r.get<std::uint8_t>();
  const auto rank = r.get<std::uint8_t>();
  for (int i = 0; i < rank; ++i) pw.shape.push_back(r.get<std::uint32_t>());
  const auto level_count = r.get<std::uint16_t>();
  for (int i = 0; i < level_count; ++i) pw.levels.push_back(r.get<double>());
  if (pw.bits < 2 || pw.bits > 16 || pw.levels.size() != (std::size_t{1} << pw.bits)) {
    throw DataError("QSSM record has inconsistent bits/levels");
  }
  const std::size_t nbits = static_cast<std::size_t>(pw.bits) * shape_numel(pw.shape);
  auto payload = r.get_bytes((nbits + 7) / 8);
  pw.bitstream.assign(payload.begin(), payload.end());
  if (consumed) *consumed = r.position();
  return pw;
}

}  // namespace qssm::quant
