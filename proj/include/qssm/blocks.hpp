#pragma once

#include <array>
#include <string>
#include <vector>

#include "qssm/quant_layers.hpp"
#include "qssm/random.hpp"
#include "qssm/ssm.hpp"
#include "qssm/tensor.hpp"

// Trainable building blocks of the restoration body: the selective 2D scan
// layer, the channel-attention block and the residual state-space block.
namespace qssm::ssm {

struct ParamRef {
  std::string name;
  Tensor tensor;
};

// Shared enumeration surface of every layer. Order is fixed by construction.
struct LayerRegistry {
  std::vector<ParamRef> params;
  std::vector<quant::QuantWeight*> weights;
  std::vector<quant::ActSite*> sites;
};

quant::QuantWeight make_weight(std::string name, Shape shape, Rng& rng);
void kaiming_uniform(Tensor& t, std::size_t fan_in, Rng& rng);

// Per-direction selective SSM parameters.
struct ScanParams {
  quant::QuantWeight w_delta;  // [C x C]
  Tensor b_delta;              // [C x 1]
  quant::QuantWeight w_b;      // [N x C]
  quant::QuantWeight w_c;      // [N x C]
  Tensor a_log;                // [C x N], A = -exp(a_log)
  Tensor d;                    // [C]
};

class Ss2dLayer {
 public:
  Ss2dLayer() = default;
  Ss2dLayer(const std::string& prefix, std::size_t channels, std::size_t state_size, Rng& rng);

  // [C x H x W] -> [C x H x W].
  Tensor forward(const Tensor& x, const quant::ForwardContext& ctx) const;
  void enumerate(LayerRegistry& reg);

  std::size_t channels() const { return channels_; }
  std::size_t state_size() const { return state_size_; }
  std::array<ScanParams, 4>& directions() { return dirs_; }
  quant::QuantWeight& in_proj() { return in_proj_; }
  quant::QuantWeight& out_proj() { return out_proj_; }

 private:
  std::string prefix_;
  std::size_t channels_ = 0;
  std::size_t state_size_ = 0;
  quant::QuantWeight in_proj_;   // [C x C]
  quant::QuantWeight out_proj_;  // [C x C]
  std::array<ScanParams, 4> dirs_;
  quant::ActSite site_in_proj_out_;
  quant::ActSite site_scan_in_;
  quant::ActSite site_out_proj_in_;
};

class Cab {
 public:
  Cab() = default;
  Cab(const std::string& prefix, std::size_t channels, std::size_t reduction, Rng& rng);

  Tensor forward(const Tensor& x, const quant::ForwardContext& ctx) const;
  void enumerate(LayerRegistry& reg);

 private:
  quant::QuantWeight conv1_;    // [C x C x 3 x 3]
  quant::QuantWeight conv2_;    // [C x C x 3 x 3]
  quant::QuantWeight ca_down_;  // [C/r x C x 1 x 1]
  quant::QuantWeight ca_up_;    // [C x C/r x 1 x 1]
  quant::ActSite site_in_;
  quant::ActSite site_mid_;
};

// y = x + s1 * ss2d(norm1(x)); y' = y + s2 * cab(norm2(y)).
class Rssb {
 public:
  Rssb() = default;
  Rssb(const std::string& prefix, std::size_t channels, std::size_t state_size, std::size_t reduction, Rng& rng);

  Tensor forward(const Tensor& x, const quant::ForwardContext& ctx) const;
  void enumerate(LayerRegistry& reg);

  Ss2dLayer& ss2d() { return ss2d_; }

 private:
  Tensor norm1_gamma_, norm1_beta_, norm2_gamma_, norm2_beta_;
  Tensor scale1_, scale2_;  // [C x 1 x 1]
  Ss2dLayer ss2d_;
  Cab cab_;
  quant::ActSite site_norm1_;
};

}  // namespace qssm::ssm
