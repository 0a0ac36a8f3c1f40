#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qssm/tensor.hpp"

namespace qssm::quant {

// Signed integer grid [-2^(n-1), 2^(n-1) - 1].
double grid_min(int bits);
double grid_max(int bits);
void check_bits(int bits);

double clip_int(double x, int bits);
Tensor clip_int(const Tensor& x, int bits);

struct UniformQuantConfig {
  int bits = 4;
  double alpha = 1.0;  // multiplies the input: grid spacing is 1/alpha
  double beta = 0.0;   // zero-point shift

  void validate() const;
};

// Q(x) = floor(clip_int((x - beta) * alpha)) / alpha + beta. Values only, no gradient.
Tensor quantize_uniform(const Tensor& x, const UniformQuantConfig& cfg);
double quantize_uniform(double x, const UniformQuantConfig& cfg);

// Differentiable fake quantizer over tape tensors alpha/beta (shape [1]).
// Floor is straight-through; elements clipped by clip_int get no gradient
// through the rounding path.
Tensor fake_quantize(const Tensor& x, const Tensor& alpha, const Tensor& beta, int bits);

// --- Statistics ---------------------------------------------------------------

struct StatsVector {
  double mu = 0.0;
  double sigma = 0.0;  // population standard deviation
  double xmin = 0.0;
  double xmax = 0.0;
};

// Returns (phi, phi') where phi' carries |mu| in place of mu.
std::pair<StatsVector, StatsVector> compute_stats(std::span<const double> x);
std::pair<StatsVector, StatsVector> compute_stats(const Tensor& x);

// Differentiable feature vectors, both shape [4].
struct StatFeatures {
  Tensor phi;
  Tensor phi_abs;
};
StatFeatures stat_features(const Tensor& x);

// --- Dynamic-balancing learnable scalar (activations) -------------------------

struct DlsParams {
  Tensor w1;  // [4], projects phi' to the scale
  Tensor w2;  // [4], projects phi to the shift
};

enum class DlsInit { kMu3SigmaMu, kMinMaxMid, kMu3SigmaMid, kMinMaxMu };

DlsInit parse_dls_init(const std::string& name);
std::string to_string(DlsInit init);

struct ScaleShift {
  Tensor alpha;  // [1], |w1 . phi'|
  Tensor beta;   // [1], w2 . phi
};

ScaleShift dls_scale_shift(const StatFeatures& features, const DlsParams& params);

// Throws NumericError when the projected scale is not positive.
Tensor dls_quantize(const Tensor& x, const DlsParams& params, int bits);

DlsParams init_dls(const Tensor& sample, int bits, DlsInit strategy = DlsInit::kMu3SigmaMu);

// --- Range-floating flexible allocator (weights) ------------------------------

struct RfaParams {
  int bits = 4;
  std::vector<double> levels;  // frozen after init, uniform spacing
  Tensor thresholds;           // [N], learnable; levels[i] owns [T_i, T_{i+1})
  double fixed_slope = 0.1;
  double transition_halfwidth = 0.05;  // fraction of the interval width

  double step() const { return levels[1] - levels[0]; }
  void validate() const;
};

std::vector<double> rfa_levels(int bits, double w_min, double w_max);

// Index of the level a value maps to under the half-open interval rule.
std::size_t rfa_level_index(double w, std::span<const double> thresholds);

Tensor rfa_forward(const Tensor& w, const RfaParams& params);

// Soft backward slope at w and the threshold whose transition zone holds w
// (-1 when w is outside every zone).
struct SlopeInfo {
  double slope;
  int zone_threshold;
};
SlopeInfo sba_slope(double w, const RfaParams& params);

struct RfaGrad {
  Tensor grad_w;
  Tensor grad_thresholds;
};
RfaGrad rfa_backward(const Tensor& w, const RfaParams& params, const Tensor& grad_up);

// Tape-recorded RFA: forward per the interval rule, backward per the soft slopes.
Tensor rfa_quantize(const Tensor& w, const RfaParams& params);

RfaParams init_rfa(const Tensor& w, int bits, double transition_halfwidth = 0.05);

// Restores strict ordering after an optimizer step (minimum gap 1e-6 * step).
void project_thresholds(RfaParams& params);

// --- Bit packing ----------------------------------------------------------------

struct PackedWeights {
  int bits = 0;
  Shape shape;
  std::vector<std::uint8_t> bitstream;
  std::vector<double> levels;
};

PackedWeights pack_weights(const Tensor& w_hat, std::span<const double> levels, int bits);
Tensor unpack_weights(const PackedWeights& packed);

std::size_t packed_header_size(const PackedWeights& packed);
std::vector<std::uint8_t> serialize(const PackedWeights& packed);
// Parses one record starting at `bytes`; `consumed` receives its length.
PackedWeights deserialize(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr);

}  // namespace qssm::quant
