#pragma once

#include <functional>
#include <optional>
#include <string>

#include "qssm/quant.hpp"
#include "qssm/tensor.hpp"

// Quantizer slots attached to network weights and activation sites.
namespace qssm::quant {

enum class Method {
  kNone,    // full precision
  kQssm,    // RFA weights + DLS activations
  kStatic,  // static min-max uniform quantizers with a clip-masked STE
};

Method parse_method(const std::string& name);
std::string to_string(Method m);

// A weight whose forward value may be fake-quantized. The optimizer updates
// `latent`; RFA thresholds are learnable alongside it.
struct QuantWeight {
  std::string name;
  Tensor latent;
  Method method = Method::kNone;
  RfaParams rfa;
  UniformQuantConfig uniform;
  // Set after import from packed storage: the forward uses these values verbatim.
  std::optional<Tensor> deployed;

  bool quantized() const { return method != Method::kNone; }
  int bits() const { return method == Method::kQssm ? rfa.bits : uniform.bits; }
  // Forward value (tape-recorded when training).
  Tensor effective() const;
  // Forward value as plain numbers.
  Tensor effective_values() const;

  void quantize(Method m, int bits);
};

// Observes (and may rewrite) an activation before it is quantized.
using ActivationHook = std::function<void(const std::string& site, Tensor& activation)>;

struct ForwardContext {
  const ActivationHook* hook = nullptr;
};

struct ActSite {
  std::string name;
  Method method = Method::kNone;
  int bits = 32;
  DlsParams dls;
  UniformQuantConfig uniform;

  Tensor apply(Tensor x, const ForwardContext& ctx) const;
  void calibrate(Method m, int bits, const Tensor& sample, DlsInit init);
};

// Static min-max uniform config: zero point at the range midpoint, the
// half-range mapped onto the positive grid end.
UniformQuantConfig minmax_uniform(std::span<const double> values, int bits);

}  // namespace qssm::quant
