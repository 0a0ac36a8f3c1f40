#pragma once

#include <cstddef>

#include "qssm/tensor.hpp"

// Value-level image utilities on [C x H x W] tensors (no gradient).
namespace qssm::image {

// Catmull-Rom (a = -0.5) cubic resize with an antialiasing prefilter when
// shrinking, replicated borders, separable.
Tensor resize_bicubic(const Tensor& img, std::size_t out_h, std::size_t out_w);

Tensor flip_horizontal(const Tensor& img);
// Counter-clockwise rotation by 90 degrees `quarter_turns` times.
Tensor rotate90(const Tensor& img, int quarter_turns);
Tensor crop(const Tensor& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w);

// Throws unless every value lies in [0, 1].
void check_unit_range(const Tensor& img, const char* what);

}  // namespace qssm::image
