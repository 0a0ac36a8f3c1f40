#pragma once

#include <cstddef>
#include <string>

#include "qssm/model.hpp"
#include "qssm/tensor.hpp"

namespace qssm::metrics {

// BT.601 studio-swing luminance of a [3 x H x W] image in [0, 1]: [H x W] in [16/255, 235/255].
Tensor rgb_to_y(const Tensor& img);

// 10 log10(1 / MSE) over the last two dims after removing `crop_border` pixels
// per side. Identical inputs give +infinity.
double psnr(const Tensor& a, const Tensor& b, std::size_t crop_border = 0);

// Mean single-scale SSIM over valid 11x11 Gaussian (sigma 1.5) windows, dynamic
// range 1. Accepts [H x W] or [C x H x W] (channel mean).
double ssim(const Tensor& a, const Tensor& b, std::size_t crop_border = 0);

// Both metrics on the Y channel of RGB images.
double psnr_y(const Tensor& a, const Tensor& b, std::size_t crop_border);
double ssim_y(const Tensor& a, const Tensor& b, std::size_t crop_border);

// "inf" for the identical-image sentinel, fixed precision otherwise.
std::string format_metric(double v, int precision = 6);

struct ComplexityReport {
  double params_full = 0.0;
  double params_effective = 0.0;  // an n-bit parameter counts as n/32
  double ops_full = 0.0;          // multiply-accumulates
  double ops_effective = 0.0;
  double param_reduction() const { return params_full > 0 ? 1.0 - params_effective / params_full : 0.0; }
  double ops_reduction() const { return ops_full > 0 ? 1.0 - ops_effective / ops_full : 0.0; }
};

// Sums a layer census. Body weights scale by w_bits/32 and body MACs by max(w_bits, a_bits)/32; biases,
// norms, scan parameters, shallow and head layers count at full precision.
ComplexityReport tally(const std::vector<model::LayerCost>& layers, int w_bits, int a_bits);
ComplexityReport count_complexity(const model::ModelConfig& cfg, std::size_t h, std::size_t w, int w_bits,
                                  int a_bits);

}  // namespace qssm::metrics
