#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qssm/blocks.hpp"
#include "qssm/quant_layers.hpp"
#include "qssm/tensor.hpp"

namespace qssm::model {

enum class Task { kClassicSr, kLightSr, kDenoise, kJpegCar };

Task parse_task(const std::string& name);
std::string to_string(Task task);
std::size_t default_blocks(Task task);

struct ModelConfig {
  Task task = Task::kLightSr;
  std::size_t scale = 2;
  std::size_t blocks = 4;
  std::size_t channels = 16;
  std::size_t state_size = 4;
  std::size_t reduction = 4;
  int w_bits = 32;  // 32/32 denotes full precision
  int a_bits = 32;
  quant::Method method = quant::Method::kNone;

  bool quantized() const { return w_bits < 32 || a_bits < 32; }
  void validate() const;
  // Canonical "key = value" lines, sorted by key.
  std::string to_text() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
  static ModelConfig defaults_for(Task task);
};

// Shallow conv -> residual state-space blocks -> body-end conv (+ shallow skip)
// -> reconstruction head, plus a global residual from the (upsampled) input.
class RestorationNet {
 public:
  RestorationNet(const ModelConfig& cfg, std::uint64_t seed);
  RestorationNet(const RestorationNet&) = delete;
  RestorationNet& operator=(const RestorationNet&) = delete;
  RestorationNet(RestorationNet&&) = delete;

  const ModelConfig& config() const { return cfg_; }

  // img: [3 x H x W] in [0, 1], H, W >= 8.
  Tensor forward(const Tensor& img, const quant::ForwardContext& ctx = {}) const;

  // Deterministic enumeration of trainable tensors, in construction order.
  const std::vector<ssm::ParamRef>& parameters() const { return registry_.params; }
  // Weights eligible for quantization (body only).
  const std::vector<quant::QuantWeight*>& body_weights() const { return registry_.weights; }
  const std::vector<quant::ActSite*>& activation_sites() const { return registry_.sites; }
  // Learnable quantizer tensors (RFA thresholds, DLS projections).
  std::vector<ssm::ParamRef> quantizer_parameters() const;

  // Named snapshot of every tensor that defines the model, quantizer state included.
  std::map<std::string, Tensor> state() const;
  void load_state(const std::map<std::string, Tensor>& state);

  std::size_t parameter_count() const;
  std::size_t body_weight_count() const;

  // Marks the model as quantized (config bits/method) without calibrating; used
  // before load_state on a quantized checkpoint.
  void set_quant_layout(quant::Method method, int w_bits, int a_bits);

 private:
  void enumerate();

  ModelConfig cfg_;
  Tensor shallow_w_, shallow_b_;
  std::vector<ssm::Rssb> blocks_;
  quant::QuantWeight body_end_;
  Tensor body_end_b_;
  quant::ActSite site_body_end_in_;
  Tensor head_w_, head_b_;
  ssm::LayerRegistry registry_;
};

// Copies every tensor value from `src` into a freshly built net with the same config.
std::unique_ptr<RestorationNet> clone(const RestorationNet& src);

// Wraps body weights with weight quantizers and calibrates activation sites on
// `calib_batch`. w_bits = a_bits = 32 leaves the net untouched.
void quantize_model(RestorationNet& net, int w_bits, int a_bits, const std::vector<Tensor>& calib_batch,
                    quant::Method method = quant::Method::kQssm,
                    quant::DlsInit init = quant::DlsInit::kMu3SigmaMu);

// Pure residual path: bicubic upsample for SR, identity for scale 1.
Tensor residual_path(const Tensor& img, std::size_t scale);

// Per-layer cost census used by complexity accounting.
struct LayerCost {
  std::string name;
  std::size_t weights = 0;  // quantizable weight parameters
  std::size_t other_params = 0;  // biases, norms, scan parameters
  std::size_t macs = 0;
  bool body = false;  // quantized when the model is
};
std::vector<LayerCost> layer_costs(const ModelConfig& cfg, std::size_t h, std::size_t w);

}  // namespace qssm::model
