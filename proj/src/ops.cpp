#include "qssm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "qssm/error.hpp"

namespace qssm::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<RowMat> mat(std::span<double> s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
Eigen::Map<RowMat> mat(std::vector<double>& s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
Eigen::Map<const RowMat> cmat(std::span<const double> s, std::size_t r, std::size_t c) {
  return {s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

// Patch matrix layout: row (ci, ky, kx), column (oy, ox); zero padding.
struct Im2col {
  std::size_t ci_n, h, w, kh, kw, ho, wo, pad, stride;

  template <typename F>
  void each(F&& f) const {
    const std::size_t l = ho * wo;
    for (std::size_t ci = 0; ci < ci_n; ++ci)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::size_t row = (ci * kh + ky) * kw + kx;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              f(row * l + oy * wo + ox, (ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix));
            }
          }
        }
  }
  std::vector<double> gather(std::span<const double> x) const {
    std::vector<double> cols(ci_n * kh * kw * ho * wo, 0.0);
    each([&](std::size_t c, std::size_t i) { cols[c] = x[i]; });
    return cols;
  }
  void scatter_add(const std::vector<double>& cols, std::span<double> gx) const {
    each([&](std::size_t c, std::size_t i) { gx[i] += cols[c]; });
  }
};

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Offsets of every output element into each broadcast operand.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_offset;
  std::vector<std::size_t> b_offset;
};

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t in_axis = in.size() - 1 - k;
    std::size_t out_axis = out.size() - 1 - k;
    strides[out_axis] = in[in_axis] == 1 ? 0 : stride;
    stride *= in[in_axis];
  }
  return strides;
}

BroadcastPlan make_plan(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.out = broadcast_shape(a, b);
  const std::size_t n = shape_numel(plan.out);
  const auto sa = broadcast_strides(a, plan.out);
  const auto sb = broadcast_strides(b, plan.out);
  plan.a_offset.resize(n);
  plan.b_offset.resize(n);
  std::vector<std::size_t> idx(plan.out.size(), 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    plan.a_offset[i] = oa;
    plan.b_offset[i] = ob;
    for (std::size_t axis = plan.out.size(); axis-- > 0;) {
      ++idx[axis];
      oa += sa[axis];
      ob += sb[axis];
      if (idx[axis] < plan.out[axis]) break;
      oa -= sa[axis] * idx[axis];
      ob -= sb[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
  return plan;
}

// f(x, y) -> value; df(x, y, out) -> {d/dx, d/dy}.
template <typename F, typename DF>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DF df) {
  const bool same = a.shape() == b.shape();
  const bool b_scalar = !same && b.numel() == 1 && a.rank() >= 1;
  Tensor out;
  BroadcastPlan plan;
  auto ad = a.data();
  auto bd = b.data();
  if (same) {
    out = Tensor::zeros(a.shape());
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(ad[i], bd[i]);
  } else if (b_scalar && b.rank() <= a.rank()) {
    out = Tensor::zeros(a.shape());
    auto od = out.mutable_data();
    const double y = bd[0];
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(ad[i], y);
  } else {
    plan = make_plan(a.shape(), b.shape());
    out = Tensor::zeros(plan.out);
    auto od = out.mutable_data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(ad[plan.a_offset[i]], bd[plan.b_offset[i]]);
  }
  if (!should_record({&a, &b})) return out;
  Tensor ca = a, cb = b, co = out;
  record_op(name, {a, b}, out, [ca, cb, co, plan = std::move(plan), same, b_scalar, df]() mutable {
    auto g = co.grad();
    auto ad = ca.data();
    auto bd = cb.data();
    auto od = co.data();
    const bool need_a = ca.requires_grad();
    const bool need_b = cb.requires_grad();
    std::span<double> ga = need_a ? ca.mutable_grad() : std::span<double>{};
    std::span<double> gb = need_b ? cb.mutable_grad() : std::span<double>{};
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g[i] == 0.0) continue;
      std::size_t ia, ib;
      if (same) {
        ia = ib = i;
      } else if (b_scalar && plan.out.empty()) {
        ia = i;
        ib = 0;
      } else {
        ia = plan.a_offset[i];
        ib = plan.b_offset[i];
      }
      auto [dx, dy] = df(ad[ia], bd[ib], od[i]);
      if (need_a) ga[ia] += g[i] * dx;
      if (need_b) gb[ib] += g[i] * dy;
    }
  });
  return out;
}

// f(x) -> value; df(x, out) -> derivative.
template <typename F, typename DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
  Tensor out = Tensor::zeros(a.shape());
  auto ad = a.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(ad[i]);
  if (!should_record({&a})) return out;
  Tensor ca = a, co = out;
  record_op(name, {a}, out, [ca, co, df]() mutable {
    auto g = co.grad();
    auto ad = ca.data();
    auto od = co.data();
    auto ga = ca.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g[i] != 0.0) ga[i] += g[i] * df(ad[i], od[i]);
    }
  });
  return out;
}

struct Pair {
  double dx, dy;
};

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    }
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](double, double, double) { return Pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double, double) { return Pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](double x, double y, double) { return Pair{y, x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw NumericError("div: division by zero");
  }
  return binary("div", a, b, [](double x, double y) { return x / y; },
                [](double x, double y, double) { return Pair{1.0 / y, -x / (y * y)}; });
}

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }

Tensor neg(const Tensor& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw NumericError("sqrt: negative input");
  }
  return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) {
    if (y == 0.0) throw NumericError("sqrt: gradient undefined at 0");
    return 0.5 / y;
  });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ShapeError("clamp: lo > hi");
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary("silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
               [](double x, double) {
                 const double s = 1.0 / (1.0 + std::exp(-x));
                 return s * (1.0 + x * (1.0 - s));
               });
}

Tensor softplus(const Tensor& a) {
  return unary("softplus", a,
               [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
               [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary("gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
               [](double x, double) {
                 return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
               });
}

Tensor elementwise(OpKind kind, const Tensor& a, const Tensor& b, double lo, double hi) {
  switch (kind) {
    case OpKind::kAdd: return add(a, b);
    case OpKind::kSub: return sub(a, b);
    case OpKind::kMul: return mul(a, b);
    case OpKind::kDiv: return div(a, b);
    case OpKind::kExp: return exp(a);
    case OpKind::kAbs: return abs(a);
    case OpKind::kSqrt: return sqrt(a);
    case OpKind::kClamp: return clamp(a, lo, hi);
  }
  throw ShapeError("elementwise: unknown op kind");
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (!should_record({&a})) return out;
  Tensor ca = a, co = out;
  record_op("sum", {a}, out, [ca, co]() mutable {
    const double g = co.grad()[0];
    for (double& v : ca.mutable_grad()) v += g;
  });
  return out;
}

Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto d = a.data();
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(d.begin(), d.end()));
  if (!should_record({&a})) return out;
  Tensor ca = a, co = out;
  record_op("reshape", {a}, out, [ca, co]() mutable { add_into(ca.mutable_grad(), co.grad()); });
  return out;
}

Tensor gather(const Tensor& a, const std::vector<std::size_t>& index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) throw ShapeError("gather: index count != output size");
  auto ad = a.data();
  std::vector<double> values(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= ad.size()) throw ShapeError("gather: index out of range");
    values[i] = ad[index[i]];
  }
  Tensor out = Tensor::from(std::move(out_shape), std::move(values));
  if (!should_record({&a})) return out;
  Tensor ca = a, co = out;
  record_op("gather", {a}, out, [ca, co, index]() mutable {
    auto g = co.grad();
    auto ga = ca.mutable_grad();
    for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  mat(out.mutable_data(), m, n).noalias() = cmat(a.data(), m, k) * cmat(b.data(), k, n);
  if (!should_record({&a, &b})) return out;
  Tensor ca = a, cb = b, co = out;
  record_op("matmul", {a, b}, out, [ca, cb, co, m, k, n]() mutable {
    auto g = cmat(co.grad(), m, n);
    if (ca.requires_grad()) mat(ca.mutable_grad(), m, k).noalias() += g * cmat(cb.data(), k, n).transpose();
    if (cb.requires_grad()) mat(cb.mutable_grad(), k, n).noalias() += cmat(ca.data(), m, k).transpose() * g;
  });
  return out;
}

namespace {


}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t padding,
              std::size_t stride) {
  if (x.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(kernel.shape()));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t ci_n = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co_n = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (h + 2 * padding < kh || w + 2 * padding < kw) throw ShapeError("conv2d: output size < 1");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  if (bias.defined() && (bias.numel() != co_n)) throw ShapeError("conv2d: bias size mismatch");

  const Im2col geo{ci_n, h, w, kh, kw, ho, wo, padding, stride};
  const std::size_t rows = ci_n * kh * kw, l = ho * wo;
  std::vector<double> cols = geo.gather(x.data());
  Tensor out = Tensor::zeros({co_n, ho, wo});
  auto om = mat(out.mutable_data(), co_n, l);
  om.noalias() = cmat(kernel.data(), co_n, rows) * cmat(cols, rows, l);
  if (bias.defined()) om.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), co_n);
  if (!should_record({&x, &kernel, &bias})) return out;
  Tensor cx = x, ck = kernel, cb = bias, co_t = out;
  std::vector<Tensor> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  record_op("conv2d", inputs, out, [=, cols = std::move(cols)]() mutable {
    auto g = cmat(co_t.grad(), co_n, l);
    if (cb.defined() && cb.requires_grad()) {
      Eigen::Map<Eigen::VectorXd>(cb.mutable_grad().data(), co_n) += g.rowwise().sum();
    }
    if (ck.requires_grad()) mat(ck.mutable_grad(), co_n, rows).noalias() += g * cmat(cols, rows, l).transpose();
    if (cx.requires_grad()) {
      std::vector<double> gcols(rows * l);
      mat(gcols, rows, l).noalias() = cmat(ck.data(), co_n, rows).transpose() * g;
      geo.scatter_add(gcols, cx.mutable_grad());
    }
  });
  return out;
}

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 3) throw ShapeError("layer_norm_channels expects [C x H x W]");
  const std::size_t c_n = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (gamma.numel() != c_n || beta.numel() != c_n) throw ShapeError("layer_norm_channels: affine size mismatch");
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(hw);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto od = out.mutable_data();
  for (std::size_t p = 0; p < hw; ++p) {
    double m = 0.0;
    for (std::size_t c = 0; c < c_n; ++c) m += xd[c * hw + p];
    m /= static_cast<double>(c_n);
    double v = 0.0;
    for (std::size_t c = 0; c < c_n; ++c) {
      const double d = xd[c * hw + p] - m;
      v += d * d;
    }
    v /= static_cast<double>(c_n);
    const double is = 1.0 / std::sqrt(v + eps);
    inv_std[p] = is;
    for (std::size_t c = 0; c < c_n; ++c) {
      const double xh = (xd[c * hw + p] - m) * is;
      xhat[c * hw + p] = xh;
      od[c * hw + p] = gd[c] * xh + bd[c];
    }
  }
  if (!should_record({&x, &gamma, &beta})) return out;
  Tensor cx = x, cg = gamma, cb = beta, co = out;
  record_op("layer_norm", {x, gamma, beta}, out,
            [cx, cg, cb, co, xhat = std::move(xhat), inv_std = std::move(inv_std), c_n, hw]() mutable {
              auto g = co.grad();
              auto gd = cg.data();
              if (cg.requires_grad() || cb.requires_grad()) {
                auto gg = cg.mutable_grad();
                auto gbeta = cb.mutable_grad();
                for (std::size_t c = 0; c < c_n; ++c) {
                  double sg = 0.0, sb = 0.0;
                  for (std::size_t p = 0; p < hw; ++p) {
                    sg += g[c * hw + p] * xhat[c * hw + p];
                    sb += g[c * hw + p];
                  }
                  gg[c] += sg;
                  gbeta[c] += sb;
                }
              }
              if (!cx.requires_grad()) return;
              auto gx = cx.mutable_grad();
              const double inv_c = 1.0 / static_cast<double>(c_n);
              for (std::size_t p = 0; p < hw; ++p) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t c = 0; c < c_n; ++c) {
                  const double d = g[c * hw + p] * gd[c];
                  mean_d += d;
                  mean_dx += d * xhat[c * hw + p];
                }
                mean_d *= inv_c;
                mean_dx *= inv_c;
                for (std::size_t c = 0; c < c_n; ++c) {
                  const double d = g[c * hw + p] * gd[c];
                  gx[c * hw + p] += inv_std[p] * (d - mean_d - xhat[c * hw + p] * mean_dx);
                }
              }
            });
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("global_avg_pool expects [C x H x W]");
  const std::size_t c_n = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out = Tensor::zeros({c_n, 1, 1});
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += xd[c * hw + p];
    od[c] = s / static_cast<double>(hw);
  }
  if (!should_record({&x})) return out;
  Tensor cx = x, co = out;
  record_op("global_avg_pool", {x}, out, [cx, co, c_n, hw]() mutable {
    auto g = co.grad();
    auto gx = cx.mutable_grad();
    for (std::size_t c = 0; c < c_n; ++c) {
      const double v = g[c] / static_cast<double>(hw);
      for (std::size_t p = 0; p < hw; ++p) gx[c * hw + p] += v;
    }
  });
  return out;
}

Tensor pixel_shuffle(const Tensor& x, std::size_t scale) {
  if (x.rank() != 3 || x.dim(0) % (scale * scale) != 0) {
    throw ShapeError("pixel_shuffle: channels not divisible by scale^2");
  }
  const std::size_t c_out = x.dim(0) / (scale * scale), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = h * scale, wo = w * scale;
  std::vector<std::size_t> index(c_out * ho * wo);
  for (std::size_t c = 0; c < c_out; ++c) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t src_c = c * scale * scale + (oy % scale) * scale + (ox % scale);
        index[(c * ho + oy) * wo + ox] = (src_c * h + oy / scale) * w + ox / scale;
      }
    }
  }
  return gather(x, index, {c_out, ho, wo});
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace qssm::ops
