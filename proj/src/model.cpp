#include "qssm/model.hpp"

#include <algorithm>
#include <sstream>

#include "qssm/error.hpp"
#include "qssm/image.hpp"
#include "qssm/ops.hpp"

namespace qssm::model {

Task parse_task(const std::string& name) {
  if (name == "classic_sr") return Task::kClassicSr;
  if (name == "light_sr") return Task::kLightSr;
  if (name == "denoise") return Task::kDenoise;
  if (name == "jpeg_car") return Task::kJpegCar;
  throw ConfigError("unknown task '" + name + "'");
}

std::string to_string(Task task) {
  switch (task) {
    case Task::kClassicSr: return "classic_sr";
    case Task::kLightSr: return "light_sr";
    case Task::kDenoise: return "denoise";
    case Task::kJpegCar: return "jpeg_car";
  }
  return "?";
}

std::size_t default_blocks(Task task) { return task == Task::kLightSr ? 4 : 6; }

static bool valid_bits(int b) { return b == 2 || b == 4 || b == 8 || b == 32; }

void ModelConfig::validate() const {
  if ((task == Task::kDenoise || task == Task::kJpegCar) && scale != 1) {
    throw ConfigError("task " + to_string(task) + " requires scale 1");
  }
  if ((task == Task::kClassicSr || task == Task::kLightSr) && (scale < 2 || scale > 4)) {
    throw ConfigError("super-resolution tasks require scale in {2, 3, 4}");
  }
  if (blocks < 1 || channels < 1 || state_size < 1) throw ConfigError("blocks, channels and state_size must be >= 1");
  if (reduction < 1 || channels % reduction != 0) throw ConfigError("channels must be divisible by reduction");
  if (!valid_bits(w_bits) || !valid_bits(a_bits)) throw ConfigError("bits must be in {2, 4, 8} (32 = full precision)");
  if ((w_bits == 32) != (a_bits == 32)) throw ConfigError("bits: either both or neither of w/a may be 32");
  if (quantized() && method == quant::Method::kNone) throw ConfigError("quantized config needs a quantization method");
}

std::string ModelConfig::to_text() const {
  std::map<std::string, std::string> kv{
      {"task", to_string(task)},
      {"scale", std::to_string(scale)},
      {"blocks", std::to_string(blocks)},
      {"channels", std::to_string(channels)},
      {"state_size", std::to_string(state_size)},
      {"reduction", std::to_string(reduction)},
      {"w_bits", std::to_string(w_bits)},
      {"a_bits", std::to_string(a_bits)},
      {"method", quant::to_string(method)},
  };
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  return os.str();
}

ModelConfig ModelConfig::defaults_for(Task task) {
  ModelConfig cfg;
  cfg.task = task;
  cfg.scale = (task == Task::kDenoise || task == Task::kJpegCar) ? 1 : 2;
  cfg.blocks = default_blocks(task);
  return cfg;
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    return it->second;
  };
  auto to_size = [](const std::string& key, const std::string& v) -> std::size_t {
    try {
      std::size_t pos = 0;
      const long long x = std::stoll(v, &pos);
      if (pos != v.size() || x < 0) throw std::invalid_argument(v);
      return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
  };
  ModelConfig cfg = defaults_for(parse_task(get("task").value_or("light_sr")));
  if (auto v = get("scale")) cfg.scale = to_size("scale", *v);
  if (auto v = get("blocks")) cfg.blocks = to_size("blocks", *v);
  if (auto v = get("channels")) cfg.channels = to_size("channels", *v);
  if (auto v = get("state_size")) cfg.state_size = to_size("state_size", *v);
  if (auto v = get("reduction")) cfg.reduction = to_size("reduction", *v);
  if (auto v = get("w_bits")) cfg.w_bits = static_cast<int>(to_size("w_bits", *v));
  if (auto v = get("a_bits")) cfg.a_bits = static_cast<int>(to_size("a_bits", *v));
  if (auto v = get("method")) cfg.method = quant::parse_method(*v);
  if (!get("method") && cfg.quantized()) cfg.method = quant::Method::kQssm;
  cfg.validate();
  return cfg;
}

// --- Network -------------------------------------------------------------------------

RestorationNet::RestorationNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  ModelConfig fp = cfg;
  if (fp.w_bits == 32 && fp.a_bits == 32) fp.method = quant::Method::kNone;
  fp.validate();
  cfg_ = fp;
  const std::size_t c = cfg.channels;
  Rng rng(seed);
  shallow_w_ = Tensor::zeros({c, 3, 3, 3}, true);
  ssm::kaiming_uniform(shallow_w_, 27, rng);
  shallow_b_ = Tensor::zeros({c}, true);
  blocks_.reserve(cfg.blocks);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    blocks_.emplace_back("body." + std::to_string(b), c, cfg.state_size, cfg.reduction, rng);
  }
  body_end_ = ssm::make_weight("body.end", {c, c, 3, 3}, rng);
  body_end_b_ = Tensor::zeros({c}, true);
  site_body_end_in_.name = "body.end_in";
  const std::size_t head_out = 3 * cfg.scale * cfg.scale;
  head_w_ = Tensor::zeros({head_out, c, 3, 3}, true);
  ssm::kaiming_uniform(head_w_, c * 9, rng);
  head_b_ = Tensor::zeros({head_out}, true);
  // Model state starts full precision; quantization is applied via quantize_model
  // or set_quant_layout.
  cfg_.w_bits = cfg_.a_bits = 32;
  cfg_.method = quant::Method::kNone;
  enumerate();
}

void RestorationNet::enumerate() {
  registry_ = {};
  registry_.params.push_back({"shallow.weight", shallow_w_});
  registry_.params.push_back({"shallow.bias", shallow_b_});
  for (auto& block : blocks_) block.enumerate(registry_);
  registry_.sites.push_back(&site_body_end_in_);
  registry_.params.push_back({body_end_.name, body_end_.latent});
  registry_.weights.push_back(&body_end_);
  registry_.params.push_back({"body.end.bias", body_end_b_});
  registry_.params.push_back({"head.weight", head_w_});
  registry_.params.push_back({"head.bias", head_b_});
}

Tensor residual_path(const Tensor& img, std::size_t scale) {
  if (scale == 1) return img.clone();
  return image::resize_bicubic(img, img.dim(1) * scale, img.dim(2) * scale);
}

Tensor RestorationNet::forward(const Tensor& img, const quant::ForwardContext& ctx) const {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("forward expects [3 x H x W], got " + shape_str(img.shape()));
  if (img.dim(1) < 8 || img.dim(2) < 8) throw ShapeError("forward requires H, W >= 8");
  image::check_unit_range(img, "forward input");
  Tensor shallow = ops::conv2d(img, shallow_w_, shallow_b_, 1);
  Tensor x = shallow;
  for (const auto& block : blocks_) x = block.forward(x, ctx);
  x = ops::conv2d(site_body_end_in_.apply(x, ctx), body_end_.effective(), body_end_b_, 1);
  x = ops::add(x, shallow);
  Tensor recon = ops::conv2d(x, head_w_, head_b_, 1);
  if (cfg_.scale > 1) recon = ops::pixel_shuffle(recon, cfg_.scale);
  return ops::add(recon, residual_path(img, cfg_.scale));
}

std::vector<ssm::ParamRef> RestorationNet::quantizer_parameters() const {
  std::vector<ssm::ParamRef> out;
  for (const auto* w : registry_.weights) {
    if (w->method == quant::Method::kQssm) out.push_back({w->name + ".rfa.thresholds", w->rfa.thresholds});
  }
  for (const auto* s : registry_.sites) {
    if (s->method == quant::Method::kQssm) {
      out.push_back({s->name + ".dls.w1", s->dls.w1});
      out.push_back({s->name + ".dls.w2", s->dls.w2});
    }
  }
  return out;
}

std::map<std::string, Tensor> RestorationNet::state() const {
  std::map<std::string, Tensor> st;
  for (const auto& p : registry_.params) st[p.name] = p.tensor.clone();
  for (const auto* w : registry_.weights) {
    if (w->method == quant::Method::kQssm) {
      st[w->name + ".rfa.levels"] = Tensor::from({w->rfa.levels.size()}, w->rfa.levels);
      st[w->name + ".rfa.thresholds"] = w->rfa.thresholds.clone();
    } else if (w->method == quant::Method::kStatic) {
      st[w->name + ".uq"] = Tensor::from({2}, {w->uniform.alpha, w->uniform.beta});
    }
  }
  for (const auto* s : registry_.sites) {
    if (s->method == quant::Method::kQssm) {
      st[s->name + ".dls.w1"] = s->dls.w1.clone();
      st[s->name + ".dls.w2"] = s->dls.w2.clone();
    } else if (s->method == quant::Method::kStatic) {
      st[s->name + ".uq"] = Tensor::from({2}, {s->uniform.alpha, s->uniform.beta});
    }
  }
  return st;
}

void RestorationNet::load_state(const std::map<std::string, Tensor>& st) {
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = st.find(name);
    if (it == st.end()) throw DataError("state is missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw DataError("state tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                      shape_str(shape));
    }
    return it->second;
  };
  auto copy_into = [](Tensor& dst, const Tensor& src) {
    auto s = src.data();
    std::copy(s.begin(), s.end(), dst.mutable_data().begin());
  };
  for (auto& p : registry_.params) copy_into(p.tensor, fetch(p.name, p.tensor.shape()));
  for (auto* w : registry_.weights) {
    if (w->method == quant::Method::kQssm) {
      const std::size_t n = w->rfa.levels.size();
      auto lv = fetch(w->name + ".rfa.levels", {n}).data();
      w->rfa.levels.assign(lv.begin(), lv.end());
      copy_into(w->rfa.thresholds, fetch(w->name + ".rfa.thresholds", {n}));
      w->rfa.validate();
    } else if (w->method == quant::Method::kStatic) {
      auto ab = fetch(w->name + ".uq", {2}).data();
      w->uniform.alpha = ab[0];
      w->uniform.beta = ab[1];
    }
  }
  for (auto* s : registry_.sites) {
    if (s->method == quant::Method::kQssm) {
      copy_into(s->dls.w1, fetch(s->name + ".dls.w1", {4}));
      copy_into(s->dls.w2, fetch(s->name + ".dls.w2", {4}));
    } else if (s->method == quant::Method::kStatic) {
      auto ab = fetch(s->name + ".uq", {2}).data();
      s->uniform.alpha = ab[0];
      s->uniform.beta = ab[1];
    }
  }
}

std::size_t RestorationNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : registry_.params) n += p.tensor.numel();
  return n;
}

std::size_t RestorationNet::body_weight_count() const {
  std::size_t n = 0;
  for (const auto* w : registry_.weights) n += w->latent.numel();
  return n;
}

void RestorationNet::set_quant_layout(quant::Method method, int w_bits, int a_bits) {
  ModelConfig next = cfg_;
  next.method = method;
  next.w_bits = w_bits;
  next.a_bits = a_bits;
  if (w_bits == 32 && a_bits == 32) next.method = quant::Method::kNone;
  next.validate();
  cfg_ = next;
  if (!cfg_.quantized()) {
    for (auto* w : registry_.weights) {
      w->method = quant::Method::kNone;
      w->deployed.reset();
    }
    for (auto* s : registry_.sites) s->method = quant::Method::kNone;
    return;
  }
  for (auto* w : registry_.weights) {
    w->method = method;
    w->deployed.reset();
    const std::size_t n = std::size_t{1} << w_bits;
    if (method == quant::Method::kQssm) {
      w->rfa.bits = w_bits;
      w->rfa.levels = quant::rfa_levels(w_bits, -1.0, 1.0);
      std::vector<double> t(n);
      for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i);
      w->rfa.thresholds = Tensor::from({n}, std::move(t), true);
    } else {
      w->uniform = quant::UniformQuantConfig{w_bits, 1.0, 0.0};
    }
  }
  for (auto* s : registry_.sites) {
    s->method = method;
    s->bits = a_bits;
    if (method == quant::Method::kQssm) {
      s->dls = {Tensor::zeros({4}, true), Tensor::zeros({4}, true)};
    } else {
      s->uniform = quant::UniformQuantConfig{a_bits, 1.0, 0.0};
    }
  }
}

std::unique_ptr<RestorationNet> clone(const RestorationNet& src) {
  const ModelConfig& cfg = src.config();
  ModelConfig fp = cfg;
  fp.w_bits = fp.a_bits = 32;
  fp.method = quant::Method::kNone;
  auto out = std::make_unique<RestorationNet>(fp, 0);
  if (cfg.quantized()) out->set_quant_layout(cfg.method, cfg.w_bits, cfg.a_bits);
  out->load_state(src.state());
  for (std::size_t i = 0; i < src.body_weights().size(); ++i) {
    const auto& d = src.body_weights()[i]->deployed;
    if (d) out->body_weights()[i]->deployed = d->clone();
  }
  return out;
}

void quantize_model(RestorationNet& net, int w_bits, int a_bits, const std::vector<Tensor>& calib_batch,
                    quant::Method method, quant::DlsInit init) {
  if (w_bits == 32 && a_bits == 32) return;
  if (calib_batch.empty()) throw DataError("quantize_model: calibration batch is empty");
  net.set_quant_layout(method, w_bits, a_bits);
  // Calibrate on full-precision activations: strip quantizers, record, then restore.
  std::map<std::string, std::vector<double>> seen;
  for (auto* w : net.body_weights()) w->method = quant::Method::kNone;
  for (auto* s : net.activation_sites()) s->method = quant::Method::kNone;
  quant::ActivationHook hook = [&](const std::string& site, Tensor& x) {
    auto& v = seen[site];
    v.insert(v.end(), x.data().begin(), x.data().end());
  };
  {
    NoGradScope no_grad;
    for (const auto& img : calib_batch) net.forward(img, quant::ForwardContext{&hook});
  }
  for (auto* w : net.body_weights()) {
    try {
      w->quantize(method, w_bits);
    } catch (const std::exception& e) {
      throw NumericError("weight quantizer init failed for '" + w->name + "': " + e.what());
    }
  }
  for (auto* s : net.activation_sites()) {
    auto& v = seen[s->name];
    if (v.empty()) throw NumericError("calibration never reached activation site '" + s->name + "'");
    const std::size_t n = v.size();
    s->calibrate(method, a_bits, Tensor::from({n}, std::move(v)), init);
  }
}

std::vector<LayerCost> layer_costs(const ModelConfig& cfg, std::size_t h, std::size_t w) {
  const std::size_t c = cfg.channels, n = cfg.state_size, l = h * w, r = cfg.reduction;
  std::vector<LayerCost> out;
  out.push_back({"shallow", 27 * c, c, 27 * c * l, false});
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string p = "body." + std::to_string(b);
    out.push_back({p + ".norm1", 0, 2 * c, 0, false});
    out.push_back({p + ".ss2d.in_proj", c * c, 0, c * c * l, true});
    for (auto order : ssm::kScanOrders) {
      const std::string d = p + ".ss2d." + ssm::to_string(order);
      out.push_back({d + ".w_delta", c * c, c, c * c * l, true});
      out.push_back({d + ".w_b", n * c, 0, n * c * l, true});
      out.push_back({d + ".w_c", n * c, 0, n * c * l, true});
      out.push_back({d + ".scan", 0, c * n + c, 3 * c * n * l, false});
    }
    out.push_back({p + ".ss2d.out_proj", c * c, 0, c * c * l, true});
    out.push_back({p + ".scale1", 0, c, 0, false});
    out.push_back({p + ".norm2", 0, 2 * c, 0, false});
    out.push_back({p + ".cab.conv1", 9 * c * c, 0, 9 * c * c * l, true});
    out.push_back({p + ".cab.conv2", 9 * c * c, 0, 9 * c * c * l, true});
    out.push_back({p + ".cab.ca_down", c * (c / r), 0, c * (c / r), true});
    out.push_back({p + ".cab.ca_up", c * (c / r), 0, c * (c / r), true});
    out.push_back({p + ".scale2", 0, c, 0, false});
  }
  out.push_back({"body.end", 9 * c * c, c, 9 * c * c * l, true});
  const std::size_t head_out = 3 * cfg.scale * cfg.scale;
  out.push_back({"head", 9 * c * head_out, head_out, 9 * c * head_out * l, false});
  return out;
}

}  // namespace qssm::model
