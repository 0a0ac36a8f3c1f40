#include "qssm/blocks.hpp"

#include <cmath>

#include "qssm/error.hpp"
#include "qssm/ops.hpp"

namespace qssm::ssm {

void kaiming_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
}

quant::QuantWeight make_weight(std::string name, Shape shape, Rng& rng) {
  quant::QuantWeight w;
  w.name = std::move(name);
  const std::size_t fan_in = shape_numel(shape) / shape[0];
  w.latent = Tensor::zeros(std::move(shape), true);
  kaiming_uniform(w.latent, fan_in, rng);
  return w;
}

namespace {

quant::ActSite make_site(std::string name) {
  quant::ActSite s;
  s.name = std::move(name);
  return s;
}

Tensor param(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

}  // namespace

// --- SS2D -----------------------------------------------------------------------

Ss2dLayer::Ss2dLayer(const std::string& prefix, std::size_t channels, std::size_t state_size, Rng& rng)
    : prefix_(prefix), channels_(channels), state_size_(state_size) {
  if (channels < 1 || state_size < 1) throw ShapeError("Ss2dLayer: channels and state size must be >= 1");
  in_proj_ = make_weight(prefix + ".in_proj", {channels, channels}, rng);
  for (std::size_t k = 0; k < 4; ++k) {
    const std::string p = prefix + "." + to_string(kScanOrders[k]);
    ScanParams& s = dirs_[k];
    s.w_delta = make_weight(p + ".w_delta", {channels, channels}, rng);
    s.w_b = make_weight(p + ".w_b", {state_size, channels}, rng);
    s.w_c = make_weight(p + ".w_c", {state_size, channels}, rng);
    // Step sizes start log-uniform in [1e-3, 1e-1] through the softplus bias.
    s.b_delta = Tensor::zeros({channels, 1}, true);
    for (double& v : s.b_delta.mutable_data()) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = dt + std::log(-std::expm1(-dt));
    }
    s.a_log = Tensor::zeros({channels, state_size}, true);
    auto al = s.a_log.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t n = 0; n < state_size; ++n) al[c * state_size + n] = std::log(static_cast<double>(n + 1));
    }
    s.d = param({channels}, 1.0);
  }
  out_proj_ = make_weight(prefix + ".out_proj", {channels, channels}, rng);
  site_in_proj_out_ = make_site(prefix + ".in_proj_out");
  site_scan_in_ = make_site(prefix + ".scan_in");
  site_out_proj_in_ = make_site(prefix + ".out_proj_in");
}

Tensor Ss2dLayer::forward(const Tensor& x, const quant::ForwardContext& ctx) const {
  if (x.rank() != 3 || x.dim(0) != channels_) {
    throw ShapeError("Ss2dLayer: expected [" + std::to_string(channels_) + " x H x W], got " + shape_str(x.shape()));
  }
  const std::size_t h = x.dim(1), w = x.dim(2), l = h * w;
  Tensor p = ops::matmul(in_proj_.effective(), ops::reshape(x, {channels_, l}));
  p = site_in_proj_out_.apply(p, ctx);
  Tensor u = site_scan_in_.apply(ops::silu(p), ctx);
  Tensor u_img = ops::reshape(u, {channels_, h, w});

  Tensor merged;
  for (std::size_t k = 0; k < 4; ++k) {
    const ScanParams& s = dirs_[k];
    Tensor seq = scan_flatten(u_img, kScanOrders[k]);
    Tensor delta = ops::softplus(ops::add(ops::matmul(s.w_delta.effective(), seq), s.b_delta));
    Tensor bm = ops::matmul(s.w_b.effective(), seq);
    Tensor cm = ops::matmul(s.w_c.effective(), seq);
    Tensor a = ops::neg(ops::exp(s.a_log));
    Tensor y = scan_unflatten(selective_scan(seq, delta, a, bm, cm, s.d), kScanOrders[k], h, w);
    merged = merged.defined() ? ops::add(merged, y) : y;
  }
  Tensor y = site_out_proj_in_.apply(ops::reshape(merged, {channels_, l}), ctx);
  return ops::reshape(ops::matmul(out_proj_.effective(), y), {channels_, h, w});
}

void Ss2dLayer::enumerate(LayerRegistry& reg) {
  reg.params.push_back({in_proj_.name, in_proj_.latent});
  reg.weights.push_back(&in_proj_);
  for (std::size_t k = 0; k < 4; ++k) {
    ScanParams& s = dirs_[k];
    const std::string p = prefix_ + "." + to_string(kScanOrders[k]);
    reg.params.push_back({s.w_delta.name, s.w_delta.latent});
    reg.params.push_back({p + ".b_delta", s.b_delta});
    reg.params.push_back({s.w_b.name, s.w_b.latent});
    reg.params.push_back({s.w_c.name, s.w_c.latent});
    reg.params.push_back({p + ".a_log", s.a_log});
    reg.params.push_back({p + ".d", s.d});
    reg.weights.push_back(&s.w_delta);
    reg.weights.push_back(&s.w_b);
    reg.weights.push_back(&s.w_c);
  }
  reg.params.push_back({out_proj_.name, out_proj_.latent});
  reg.weights.push_back(&out_proj_);
  reg.sites.push_back(&site_in_proj_out_);
  reg.sites.push_back(&site_scan_in_);
  reg.sites.push_back(&site_out_proj_in_);
}

// --- CAB ---------------------------------------------------------------------------

Cab::Cab(const std::string& prefix, std::size_t channels, std::size_t reduction, Rng& rng) {
  if (reduction < 1 || channels % reduction != 0) {
    throw ShapeError("CAB: channels " + std::to_string(channels) + " not divisible by reduction " +
                     std::to_string(reduction));
  }
  const std::size_t squeezed = channels / reduction;
  conv1_ = make_weight(prefix + ".conv1", {channels, channels, 3, 3}, rng);
  conv2_ = make_weight(prefix + ".conv2", {channels, channels, 3, 3}, rng);
  ca_down_ = make_weight(prefix + ".ca_down", {squeezed, channels, 1, 1}, rng);
  ca_up_ = make_weight(prefix + ".ca_up", {channels, squeezed, 1, 1}, rng);
  site_in_ = make_site(prefix + ".in");
  site_mid_ = make_site(prefix + ".mid");
}

Tensor Cab::forward(const Tensor& x, const quant::ForwardContext& ctx) const {
  Tensor h = ops::conv2d(site_in_.apply(x, ctx), conv1_.effective(), {}, 1);
  h = site_mid_.apply(ops::gelu(h), ctx);
  h = ops::conv2d(h, conv2_.effective(), {}, 1);
  Tensor att = ops::conv2d(ops::global_avg_pool(h), ca_down_.effective(), {}, 0);
  att = ops::sigmoid(ops::conv2d(ops::relu(att), ca_up_.effective(), {}, 0));
  return ops::mul(h, att);
}

void Cab::enumerate(LayerRegistry& reg) {
  for (quant::QuantWeight* w : {&conv1_, &conv2_, &ca_down_, &ca_up_}) {
    reg.params.push_back({w->name, w->latent});
    reg.weights.push_back(w);
  }
  reg.sites.push_back(&site_in_);
  reg.sites.push_back(&site_mid_);
}

// --- RSSB --------------------------------------------------------------------------

Rssb::Rssb(const std::string& prefix, std::size_t channels, std::size_t state_size, std::size_t reduction,
           Rng& rng)
    : norm1_gamma_(param({channels}, 1.0)),
      norm1_beta_(param({channels}, 0.0)),
      norm2_gamma_(param({channels}, 1.0)),
      norm2_beta_(param({channels}, 0.0)),
      scale1_(param({channels, 1, 1}, 1.0)),
      scale2_(param({channels, 1, 1}, 1.0)),
      ss2d_(prefix + ".ss2d", channels, state_size, rng),
      cab_(prefix + ".cab", channels, reduction, rng),
      site_norm1_(make_site(prefix + ".norm1_out")) {}

Tensor Rssb::forward(const Tensor& x, const quant::ForwardContext& ctx) const {
  Tensor n1 = site_norm1_.apply(ops::layer_norm_channels(x, norm1_gamma_, norm1_beta_), ctx);
  Tensor y = ops::add(x, ops::mul(scale1_, ss2d_.forward(n1, ctx)));
  Tensor n2 = ops::layer_norm_channels(y, norm2_gamma_, norm2_beta_);
  return ops::add(y, ops::mul(scale2_, cab_.forward(n2, ctx)));
}

void Rssb::enumerate(LayerRegistry& reg) {
  // Names are derived from the SS2D prefix ("<block>.ss2d").
  const std::string block = site_norm1_.name.substr(0, site_norm1_.name.rfind('.'));
  reg.params.push_back({block + ".norm1.gamma", norm1_gamma_});
  reg.params.push_back({block + ".norm1.beta", norm1_beta_});
  reg.sites.push_back(&site_norm1_);
  ss2d_.enumerate(reg);
  reg.params.push_back({block + ".scale1", scale1_});
  reg.params.push_back({block + ".norm2.gamma", norm2_gamma_});
  reg.params.push_back({block + ".norm2.beta", norm2_beta_});
  cab_.enumerate(reg);
  reg.params.push_back({block + ".scale2", scale2_});
}

}  // namespace qssm::ssm
