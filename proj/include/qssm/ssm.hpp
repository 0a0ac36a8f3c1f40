#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qssm/tensor.hpp"

// Linear state-space machinery: recurrence, zero-order-hold discretization,
// convolution-kernel form, and the four-direction 2D scan.
namespace qssm::ssm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Continuous-time parameters: x' = A x + B u, y = C x + D u, step size delta.
struct SsmParams {
  Matrix a;
  Vector b;
  Vector c;
  double d = 0.0;
  double delta = 1.0;

  std::size_t state_size() const { return static_cast<std::size_t>(a.rows()); }
  void validate() const;
};

struct DiscreteSsm {
  Matrix a_bar;
  Vector b_bar;
};

// a_bar = exp(delta A); b_bar = (delta A)^-1 (exp(delta A) - I) delta B, with a
// series fallback when ||delta A|| < 1e-6.
DiscreteSsm discretize_zoh(const SsmParams& params);

// h(t) = a_bar h(t-1) + b_bar x(t);  y(t) = c.h(t) + d x(t).
std::vector<double> ssm_recurrence(std::span<const double> x, const DiscreteSsm& disc, const Vector& c,
                                   double d, const Vector& h0 = Vector());

// K[t] = c . a_bar^t b_bar, built iteratively.
std::vector<double> build_kernel(const DiscreteSsm& disc, const Vector& c, std::size_t length);

// Causal convolution y[t] = sum_{s<=t} K[s] x[t-s] + d x[t].
std::vector<double> ssm_conv(std::span<const double> x, std::span<const double> kernel, double d);

enum class ScanOrder { kRowForward, kRowBackward, kColForward, kColBackward };
inline constexpr std::array<ScanOrder, 4> kScanOrders = {ScanOrder::kRowForward, ScanOrder::kRowBackward,
                                                          ScanOrder::kColForward, ScanOrder::kColBackward};
std::string to_string(ScanOrder order);

// perm[t] = flat pixel index (y * w + x) visited at step t.
std::vector<std::size_t> scan_permutation(ScanOrder order, std::size_t h, std::size_t w);
std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);

// Flattens [C x H x W] to [C x L] in scan order, and back.
Tensor scan_flatten(const Tensor& feature, ScanOrder order);
Tensor scan_unflatten(const Tensor& sequence, ScanOrder order, std::size_t h, std::size_t w);

// One fixed (non-selective) SSM applied to every channel along one direction.
struct DirectionSsm {
  DiscreteSsm disc;
  Vector c;
  double d = 0.0;
};

// Runs each direction's SSM over every channel and sums the four results.
Tensor ss2d_fixed(const Tensor& feature, const std::array<DirectionSsm, 4>& directions);

// Selective scan with per-token parameters and diagonal state matrix.
//   u, delta: [C x L]; a: [C x N] (entries of diag A, per channel);
//   b, c: [N x L]; d: [C].
//   h[c,n,t] = exp(delta A) h[c,n,t-1] + (exp(delta A) - 1)/A * b[n,t] * u[c,t]
//   y[c,t]   = sum_n c[n,t] h[c,n,t] + d[c] u[c,t]
// Tape-recorded with a hand-written adjoint.
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                      const Tensor& d);

}  // namespace qssm::ssm
