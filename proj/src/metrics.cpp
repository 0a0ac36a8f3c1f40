#include "qssm/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "qssm/error.hpp"
#include "qssm/image.hpp"

namespace qssm::metrics {

namespace {

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::size_t i, std::size_t j) const { return v[i * w + j]; }
};

// Splits [H x W] or [C x H x W] into cropped planes.
std::vector<Plane> planes(const Tensor& t, std::size_t crop) {
  const auto& s = t.shape();
  if (s.size() != 2 && s.size() != 3) throw ShapeError("metrics expect [H x W] or [C x H x W]");
  const std::size_t c = s.size() == 3 ? s[0] : 1, h = s[s.size() - 2], w = s[s.size() - 1];
  if (h <= 2 * crop || w <= 2 * crop) throw ShapeError("crop border leaves no pixels");
  std::vector<Plane> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    out[ch].h = h - 2 * crop;
    out[ch].w = w - 2 * crop;
    for (std::size_t i = crop; i < h - crop; ++i)
      for (std::size_t j = crop; j < w - crop; ++j) out[ch].v.push_back(t.at((ch * h + i) * w + j));
  }
  return out;
}

constexpr int kWin = 11;

std::array<double, kWin> gaussian_taps() {
  std::array<double, kWin> g{};
  double s = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

// Separable valid-mode Gaussian filter.
Plane filter(const Plane& p) {
  static const auto g = gaussian_taps();
  Plane rows{p.h, p.w - kWin + 1, {}};
  rows.v.assign(rows.h * rows.w, 0.0);
  for (std::size_t i = 0; i < rows.h; ++i)
    for (std::size_t j = 0; j < rows.w; ++j) {
      double s = 0.0;
      for (int k = 0; k < kWin; ++k) s += g[k] * p.at(i, j + k);
      rows.v[i * rows.w + j] = s;
    }
  Plane out{p.h - kWin + 1, rows.w, {}};
  out.v.assign(out.h * out.w, 0.0);
  for (std::size_t i = 0; i < out.h; ++i)
    for (std::size_t j = 0; j < out.w; ++j) {
      double s = 0.0;
      for (int k = 0; k < kWin; ++k) s += g[k] * rows.at(i + k, j);
      out.v[i * out.w + j] = s;
    }
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane out{a.h, a.w, a.v};
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

double ssim_plane(const Plane& a, const Plane& b) {
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Plane mu_a = filter(a), mu_b = filter(b);
  const Plane aa = filter(product(a, a)), bb = filter(product(b, b)), ab = filter(product(a, b));
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i];
    const double va = aa.v[i] - ma * ma, vb = bb.v[i] - mb * mb, cov = ab.v[i] - ma * mb;
    total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.v.size());
}

}  // namespace

Tensor rgb_to_y(const Tensor& img) {
  if (img.shape().size() != 3 || img.shape()[0] != 3) throw ShapeError("rgb_to_y expects [3 x H x W]");
  image::check_unit_range(img, "rgb_to_y input");
  const std::size_t hw = img.shape()[1] * img.shape()[2];
  std::vector<double> y(hw);
  for (std::size_t i = 0; i < hw; ++i)
    y[i] = (16.0 + 65.481 * img.at(i) + 128.553 * img.at(hw + i) + 24.966 * img.at(2 * hw + i)) / 255.0;
  return Tensor::from({img.shape()[1], img.shape()[2]}, std::move(y));
}

double psnr(const Tensor& a, const Tensor& b, std::size_t crop_border) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shape mismatch");
  const auto pa = planes(a, crop_border), pb = planes(b, crop_border);
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < pa.size(); ++c)
    for (std::size_t i = 0; i < pa[c].v.size(); ++i) {
      const double d = pa[c].v[i] - pb[c].v[i];
      se += d * d;
      ++n;
    }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(n) / se);
}

double ssim(const Tensor& a, const Tensor& b, std::size_t crop_border) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shape mismatch");
  const auto pa = planes(a, crop_border), pb = planes(b, crop_border);
  if (pa[0].h < kWin || pa[0].w < kWin) throw ShapeError("ssim needs at least 11x11 pixels after cropping");
  double total = 0.0;
  for (std::size_t c = 0; c < pa.size(); ++c) total += ssim_plane(pa[c], pb[c]);
  return total / static_cast<double>(pa.size());
}

double psnr_y(const Tensor& a, const Tensor& b, std::size_t crop_border) {
  return psnr(rgb_to_y(a), rgb_to_y(b), crop_border);
}

double ssim_y(const Tensor& a, const Tensor& b, std::size_t crop_border) {
  return ssim(rgb_to_y(a), rgb_to_y(b), crop_border);
}

std::string format_metric(double v, int precision) {
  if (std::isinf(v) && v > 0) return "inf";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

ComplexityReport tally(const std::vector<model::LayerCost>& layers, int w_bits, int a_bits) {
  const double wf = w_bits / 32.0, of = std::max(w_bits, a_bits) / 32.0;
  ComplexityReport r;
  for (const auto& l : layers) {
    const double weights = static_cast<double>(l.weights), other = static_cast<double>(l.other_params);
    const double macs = static_cast<double>(l.macs);
    r.params_full += weights + other;
    r.ops_full += macs;
    r.params_effective += (l.body ? wf : 1.0) * weights + other;
    r.ops_effective += (l.body ? of : 1.0) * macs;
  }
  return r;
}

ComplexityReport count_complexity(const model::ModelConfig& cfg, std::size_t h, std::size_t w, int w_bits,
                                  int a_bits) {
  return tally(model::layer_costs(cfg, h, w), w_bits, a_bits);
}

}  // namespace qssm::metrics

