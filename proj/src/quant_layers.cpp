#include "qssm/quant_layers.hpp"

#include <algorithm>

#include "qssm/error.hpp"

namespace qssm::quant {

Method parse_method(const std::string& name) {
  if (name == "none" || name == "fp") return Method::kNone;
  if (name == "qssm" || name == "dls_rfa") return Method::kQssm;
  if (name == "static" || name == "ste") return Method::kStatic;
  throw ConfigError("unknown quantization method '" + name + "'");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kNone: return "none";
    case Method::kQssm: return "qssm";
    case Method::kStatic: return "static";
  }
  return "?";
}

UniformQuantConfig minmax_uniform(std::span<const double> values, int bits) {
  if (values.empty()) throw ShapeError("minmax_uniform: empty tensor");
  auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double half = 0.5 * (*mx - *mn);
  if (!(half > 0.0)) throw NumericError("minmax_uniform: zero range");
  return UniformQuantConfig{bits, grid_max(bits) / half, 0.5 * (*mx + *mn)};
}

Tensor QuantWeight::effective() const {
  if (deployed) return *deployed;
  switch (method) {
    case Method::kNone: return latent;
    case Method::kQssm: return rfa_quantize(latent, rfa);
    case Method::kStatic:
      return fake_quantize(latent, Tensor::scalar(uniform.alpha), Tensor::scalar(uniform.beta), uniform.bits);
  }
  return latent;
}

Tensor QuantWeight::effective_values() const {
  if (deployed) return *deployed;
  switch (method) {
    case Method::kNone: return latent.clone();
    case Method::kQssm: return rfa_forward(latent, rfa);
    case Method::kStatic: return quantize_uniform(latent, uniform);
  }
  return latent.clone();
}

void QuantWeight::quantize(Method m, int bits) {
  method = m;
  deployed.reset();
  if (m == Method::kQssm) {
    rfa = init_rfa(latent, bits);
  } else if (m == Method::kStatic) {
    check_bits(bits);
    uniform = minmax_uniform(latent.data(), bits);
  }
}

Tensor ActSite::apply(Tensor x, const ForwardContext& ctx) const {
  if (ctx.hook && *ctx.hook) (*ctx.hook)(name, x);
  switch (method) {
    case Method::kNone: return x;
    case Method::kQssm: return dls_quantize(x, dls, bits);
    case Method::kStatic:
      return fake_quantize(x, Tensor::scalar(uniform.alpha), Tensor::scalar(uniform.beta), uniform.bits);
  }
  return x;
}

void ActSite::calibrate(Method m, int n_bits, const Tensor& sample, DlsInit init) {
  method = m;
  bits = n_bits;
  if (m == Method::kNone) return;
  check_bits(n_bits);
  try {
    if (m == Method::kQssm) {
      dls = init_dls(sample, n_bits, init);
    } else {
      uniform = minmax_uniform(sample.data(), n_bits);
    }
  } catch (const std::exception& e) {
    throw NumericError("calibration failed at activation site '" + name + "': " + e.what());
  }
}

}  // namespace qssm::quant
