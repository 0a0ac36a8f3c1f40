#include "qssm/image.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "qssm/error.hpp"

namespace qssm::image {

namespace {

double cubic(double x) {
  const double ax = std::fabs(x);
  const double ax2 = ax * ax, ax3 = ax2 * ax;
  if (ax <= 1.0) return 1.5 * ax3 - 2.5 * ax2 + 1.0;
  if (ax < 2.0) return -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0;
  return 0.0;
}

struct Taps {
  std::vector<std::size_t> index;
  std::vector<double> weight;
  std::size_t per_output = 0;
};

// Weights along one axis, normalized to sum to one per output sample.
Taps axis_taps(std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(out) / static_cast<double>(in);
  const double kscale = std::min(scale, 1.0);
  const double support = 2.0 / kscale;
  Taps taps;
  taps.per_output = static_cast<std::size_t>(std::ceil(2.0 * support)) + 2;
  taps.index.resize(out * taps.per_output);
  taps.weight.resize(out * taps.per_output);
  for (std::size_t i = 0; i < out; ++i) {
    const double center = (static_cast<double>(i) + 0.5) / scale - 0.5;
    const long first = static_cast<long>(std::floor(center - support));
    double total = 0.0;
    for (std::size_t k = 0; k < taps.per_output; ++k) {
      const long j = first + static_cast<long>(k);
      const double wgt = kscale * cubic((center - static_cast<double>(j)) * kscale);
      const long clamped = std::clamp<long>(j, 0, static_cast<long>(in) - 1);
      taps.index[i * taps.per_output + k] = static_cast<std::size_t>(clamped);
      taps.weight[i * taps.per_output + k] = wgt;
      total += wgt;
    }
    for (std::size_t k = 0; k < taps.per_output; ++k) taps.weight[i * taps.per_output + k] /= total;
  }
  return taps;
}

}  // namespace

Tensor resize_bicubic(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3) throw ShapeError("resize_bicubic expects [C x H x W]");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bicubic: empty output");
  const std::size_t c_n = img.dim(0), h = img.dim(1), w = img.dim(2);
  const Taps tw = axis_taps(w, out_w);
  const Taps th = axis_taps(h, out_h);
  std::vector<double> tmp(c_n * h * out_w);
  auto src = img.data();
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* row = src.data() + (c * h + y) * w;
      for (std::size_t x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < tw.per_output; ++k) {
          s += tw.weight[x * tw.per_output + k] * row[tw.index[x * tw.per_output + k]];
        }
        tmp[(c * h + y) * out_w + x] = s;
      }
    }
  }
  Tensor out = Tensor::zeros({c_n, out_h, out_w});
  auto od = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t y = 0; y < out_h; ++y) {
      for (std::size_t x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < th.per_output; ++k) {
          s += th.weight[y * th.per_output + k] * tmp[(c * h + th.index[y * th.per_output + k]) * out_w + x];
        }
        od[(c * out_h + y) * out_w + x] = s;
      }
    }
  }
  return out;
}

Tensor flip_horizontal(const Tensor& img) {
  const std::size_t c_n = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out = Tensor::zeros(img.shape());
  auto s = img.data();
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) d[(c * h + y) * w + x] = s[(c * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor rotate90(const Tensor& img, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return img.clone();
  const std::size_t c_n = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::size_t oh = (k % 2) ? w : h, ow = (k % 2) ? h : w;
  Tensor out = Tensor::zeros({c_n, oh, ow});
  auto s = img.data();
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t sy = 0, sx = 0;
        switch (k) {
          case 1: sy = x; sx = w - 1 - y; break;  // counter-clockwise
          case 2: sy = h - 1 - y; sx = w - 1 - x; break;
          case 3: sy = h - 1 - x; sx = y; break;
        }
        d[(c * oh + y) * ow + x] = s[(c * h + sy) * w + sx];
      }
    }
  }
  return out;
}

Tensor crop(const Tensor& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (img.rank() != 3 || top + h > img.dim(1) || left + w > img.dim(2)) throw ShapeError("crop out of bounds");
  const std::size_t c_n = img.dim(0), ih = img.dim(1), iw = img.dim(2);
  Tensor out = Tensor::zeros({c_n, h, w});
  auto s = img.data();
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(s.data() + (c * ih + top + y) * iw + left, w, d.data() + (c * h + y) * w);
  return out;
}

void check_unit_range(const Tensor& img, const char* what) {
  for (double v : img.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError(std::string(what) + ": values must lie in [0, 1] (got " + std::to_string(v) + ")");
    }
  }
}

}  // namespace qssm::image
