#include "qssm/ssm.hpp"

#include <cmath>

#include <unsupported/Eigen/MatrixFunctions>

#include "qssm/error.hpp"
#include "qssm/ops.hpp"

namespace qssm::ssm {

void SsmParams::validate() const {
  const auto n = a.rows();
  if (n < 1 || a.cols() != n || b.size() != n || c.size() != n) {
    throw ShapeError("SSM parameters: A must be NxN with B, C of length N");
  }
  if (!(delta > 0.0)) throw ShapeError("SSM parameters: delta must be > 0");
}

DiscreteSsm discretize_zoh(const SsmParams& params) {
  params.validate();
  const auto n = params.a.rows();
  const Matrix da = params.delta * params.a;
  const Vector db = params.delta * params.b;
  const Matrix eye = Matrix::Identity(n, n);
  DiscreteSsm out;
  out.a_bar = da.exp();
  if (da.norm() < 1e-6) {
    out.b_bar = (eye + da / 2.0 + da * da / 6.0) * db;
    return out;
  }
  Eigen::FullPivLU<Matrix> lu(da);
  if (lu.isInvertible()) {
    out.b_bar = lu.solve((out.a_bar - eye) * db);
    return out;
  }
  // Singular delta*A: exp([[dA, dB], [0, 0]]) = [[a_bar, b_bar], [0, 1]].
  Matrix aug = Matrix::Zero(n + 1, n + 1);
  aug.topLeftCorner(n, n) = da;
  aug.topRightCorner(n, 1) = db;
  const Matrix e = aug.exp();
  out.b_bar = e.topRightCorner(n, 1);
  return out;
}

std::vector<double> ssm_recurrence(std::span<const double> x, const DiscreteSsm& disc, const Vector& c,
                                   double d, const Vector& h0) {
  const auto n = disc.a_bar.rows();
  if (disc.a_bar.cols() != n || disc.b_bar.size() != n || c.size() != n) {
    throw ShapeError("ssm_recurrence: dimension mismatch");
  }
  if (h0.size() != 0 && h0.size() != n) throw ShapeError("ssm_recurrence: initial state size mismatch");
  if (x.empty()) throw ShapeError("ssm_recurrence: empty sequence");
  Vector h = h0.size() ? h0 : Vector::Zero(n);
  std::vector<double> y(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    h = disc.a_bar * h + disc.b_bar * x[t];
    y[t] = c.dot(h) + d * x[t];
  }
  return y;
}

std::vector<double> build_kernel(const DiscreteSsm& disc, const Vector& c, std::size_t length) {
  if (length < 1) throw ShapeError("build_kernel: length must be >= 1");
  std::vector<double> k(length);
  Vector v = disc.b_bar;
  for (std::size_t t = 0; t < length; ++t) {
    k[t] = c.dot(v);
    v = disc.a_bar * v;
  }
  return k;
}

std::vector<double> ssm_conv(std::span<const double> x, std::span<const double> kernel, double d) {
  if (kernel.size() != x.size()) throw ShapeError("ssm_conv: kernel length must equal sequence length");
  std::vector<double> y(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    double s = d * x[t];
    for (std::size_t k = 0; k <= t; ++k) s += kernel[k] * x[t - k];
    y[t] = s;
  }
  return y;
}

std::string to_string(ScanOrder order) {
  switch (order) {
    case ScanOrder::kRowForward: return "row_fwd";
    case ScanOrder::kRowBackward: return "row_bwd";
    case ScanOrder::kColForward: return "col_fwd";
    case ScanOrder::kColBackward: return "col_bwd";
  }
  return "?";
}

std::vector<std::size_t> scan_permutation(ScanOrder order, std::size_t h, std::size_t w) {
  const std::size_t l = h * w;
  std::vector<std::size_t> perm(l);
  for (std::size_t t = 0; t < l; ++t) {
    switch (order) {
      case ScanOrder::kRowForward: perm[t] = t; break;
      case ScanOrder::kRowBackward: perm[t] = l - 1 - t; break;
      case ScanOrder::kColForward: perm[t] = (t % h) * w + t / h; break;
      case ScanOrder::kColBackward: {
        const std::size_t s = l - 1 - t;
        perm[t] = (s % h) * w + s / h;
        break;
      }
    }
  }
  return perm;
}

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t t = 0; t < perm.size(); ++t) inv[perm[t]] = t;
  return inv;
}

Tensor scan_flatten(const Tensor& feature, ScanOrder order) {
  if (feature.rank() != 3) throw ShapeError("scan_flatten expects [C x H x W]");
  const std::size_t c_n = feature.dim(0), h = feature.dim(1), w = feature.dim(2), l = h * w;
  const auto perm = scan_permutation(order, h, w);
  std::vector<std::size_t> index(c_n * l);
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t t = 0; t < l; ++t) index[c * l + t] = c * l + perm[t];
  }
  return ops::gather(feature, index, {c_n, l});
}

Tensor scan_unflatten(const Tensor& sequence, ScanOrder order, std::size_t h, std::size_t w) {
  if (sequence.rank() != 2 || sequence.dim(1) != h * w) throw ShapeError("scan_unflatten: length mismatch");
  const std::size_t c_n = sequence.dim(0), l = h * w;
  const auto inv = inverse_permutation(scan_permutation(order, h, w));
  std::vector<std::size_t> index(c_n * l);
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t p = 0; p < l; ++p) index[c * l + p] = c * l + inv[p];
  }
  return ops::gather(sequence, index, {c_n, h, w});
}

Tensor ss2d_fixed(const Tensor& feature, const std::array<DirectionSsm, 4>& directions) {
  if (feature.rank() != 3) throw ShapeError("ss2d expects [C x H x W]");
  const std::size_t c_n = feature.dim(0), h = feature.dim(1), w = feature.dim(2), l = h * w;
  Tensor out = Tensor::zeros(feature.shape());
  auto od = out.mutable_data();
  for (std::size_t k = 0; k < 4; ++k) {
    const ScanOrder order = kScanOrders[k];
    const auto perm = scan_permutation(order, h, w);
    auto fd = feature.data();
    std::vector<double> seq(l);
    for (std::size_t c = 0; c < c_n; ++c) {
      for (std::size_t t = 0; t < l; ++t) seq[t] = fd[c * l + perm[t]];
      const auto y = ssm_recurrence(seq, directions[k].disc, directions[k].c, directions[k].d);
      for (std::size_t t = 0; t < l; ++t) od[c * l + perm[t]] += y[t];
    }
  }
  return out;
}

namespace {

// (x e^x - (e^x - 1)) / x^2, the derivative factor of expm1(x)/x.
// Takes expm1(x) precomputed.
double psi(double x, double em1) {
  if (std::fabs(x) < 1e-4) return 0.5 + x / 3.0 + x * x / 8.0;
  return (x * (em1 + 1.0) - em1) / (x * x);
}

}  // namespace

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                      const Tensor& d) {
  if (u.rank() != 2 || delta.shape() != u.shape() || a.rank() != 2 || a.dim(0) != u.dim(0) || b.rank() != 2 ||
      c.shape() != b.shape() || b.dim(0) != a.dim(1) || b.dim(1) != u.dim(1) || d.numel() != u.dim(0)) {
    throw ShapeError("selective_scan: inconsistent shapes");
  }
  const std::size_t c_n = u.dim(0), l = u.dim(1), n_n = a.dim(1);
  for (double v : delta.data()) {
    if (!(v > 0.0)) throw NumericError("selective_scan: step sizes must be positive");
  }
  auto ud = u.data();
  auto dd = delta.data();
  auto ad = a.data();
  auto bd = b.data();
  auto cd = c.data();
  auto dv = d.data();
  Tensor out = Tensor::zeros({c_n, l});
  auto od = out.mutable_data();
  std::vector<double> states(c_n * n_n * l), em1s(c_n * n_n * l);
  for (std::size_t ch = 0; ch < c_n; ++ch) {
    for (std::size_t n = 0; n < n_n; ++n) {
      const double av = ad[ch * n_n + n];
      double h = 0.0;
      double* hs = states.data() + (ch * n_n + n) * l;
      double* es = em1s.data() + (ch * n_n + n) * l;
      for (std::size_t t = 0; t < l; ++t) {
        const double x = dd[ch * l + t] * av;
        const double em1 = std::expm1(x);
        es[t] = em1;
        const double coef = av != 0.0 ? em1 / av : dd[ch * l + t];
        h = (em1 + 1.0) * h + coef * bd[n * l + t] * ud[ch * l + t];
        hs[t] = h;
        od[ch * l + t] += cd[n * l + t] * h;
      }
    }
    for (std::size_t t = 0; t < l; ++t) od[ch * l + t] += dv[ch] * ud[ch * l + t];
  }
  if (!should_record({&u, &delta, &a, &b, &c, &d})) return out;
  Tensor su = u, sdl = delta, sa = a, sb = b, sc = c, sd = d, so = out;
  record_op("selective_scan", {u, delta, a, b, c, d}, out,
            [=, states = std::move(states), em1s = std::move(em1s)]() mutable {
              auto gy = so.grad();
              auto ud = su.data();
              auto dd = sdl.data();
              auto ad = sa.data();
              auto bd = sb.data();
              auto cd = sc.data();
              auto dv = sd.data();
              std::vector<double> gu(c_n * l, 0.0), gdl(c_n * l, 0.0), ga(c_n * n_n, 0.0);
              std::vector<double> gb(n_n * l, 0.0), gc(n_n * l, 0.0), gdv(c_n, 0.0);
              for (std::size_t ch = 0; ch < c_n; ++ch) {
                for (std::size_t t = 0; t < l; ++t) {
                  gdv[ch] += gy[ch * l + t] * ud[ch * l + t];
                  gu[ch * l + t] += gy[ch * l + t] * dv[ch];
                }
                for (std::size_t n = 0; n < n_n; ++n) {
                  const double av = ad[ch * n_n + n];
                  const double* hs = states.data() + (ch * n_n + n) * l;
                  const double* es = em1s.data() + (ch * n_n + n) * l;
                  double gh = 0.0;
                  for (std::size_t t = l; t-- > 0;) {
                    const double g_out = gy[ch * l + t];
                    gh += g_out * cd[n * l + t];
                    gc[n * l + t] += g_out * hs[t];
                    const double h_prev = t > 0 ? hs[t - 1] : 0.0;
                    const double dt = dd[ch * l + t];
                    const double x = dt * av;
                    const double ea = es[t] + 1.0;
                    const double coef = av != 0.0 ? es[t] / av : dt;
                    const double dcoef_da = dt * dt * psi(x, es[t]);
                    const double bu = bd[n * l + t] * ud[ch * l + t];
                    gu[ch * l + t] += gh * coef * bd[n * l + t];
                    gb[n * l + t] += gh * coef * ud[ch * l + t];
                    gdl[ch * l + t] += gh * (h_prev * av * ea + bu * ea);
                    ga[ch * n_n + n] += gh * (h_prev * dt * ea + bu * dcoef_da);
                    gh *= ea;
                  }
                }
              }
              auto acc = [](Tensor& t, const std::vector<double>& g) {
                if (!t.requires_grad()) return;
                auto dst = t.mutable_grad();
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
              };
              acc(su, gu);
              acc(sdl, gdl);
              acc(sa, ga);
              acc(sb, gb);
              acc(sc, gc);
              acc(sd, gdv);
            });
  return out;
}

}  // namespace qssm::ssm
