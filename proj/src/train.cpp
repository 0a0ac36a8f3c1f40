#include "qssm/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "qssm/error.hpp"
#include "qssm/image.hpp"
#include "qssm/metrics.hpp"
#include "qssm/ops.hpp"
#include "qssm/quant.hpp"

namespace qssm::train {

std::string to_string(Loss loss) { return loss == Loss::kL1 ? "l1" : "charbonnier"; }

Loss parse_loss(const std::string& name) {
  if (name == "l1") return Loss::kL1;
  if (name == "charbonnier") return Loss::kCharbonnier;
  throw ConfigError("unknown loss '" + name + "'");
}

TrainPreset TrainPreset::for_task(model::Task task) {
  TrainPreset p;
  p.task = task;
  switch (task) {
    case model::Task::kClassicSr: p.batch_size = 4, p.base_lr = 1e-4, p.loss = Loss::kL1, p.gt_size = 192, p.blocks = 6; break;
    case model::Task::kLightSr: p.batch_size = 2, p.base_lr = 2e-4, p.loss = Loss::kL1, p.gt_size = 192, p.blocks = 4; break;
    case model::Task::kDenoise:
      p.batch_size = 4, p.base_lr = 1e-4, p.loss = Loss::kCharbonnier, p.gt_size = 128, p.blocks = 6;
      break;
    case model::Task::kJpegCar:
      p.batch_size = 4, p.base_lr = 1e-4, p.loss = Loss::kCharbonnier, p.gt_size = 128, p.blocks = 6;
      break;
  }
  return p;
}

TrainPreset TrainPreset::desk() const {
  TrainPreset p = *this;
  p.iterations = 2000;
  for (auto& m : p.milestones) m /= 10;
  p.gt_size = 48;
  return p;
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long n = std::stoll(v, &pos);
    if (pos != v.size() || n < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

}  // namespace

std::string TrainPreset::to_text() const {
  std::ostringstream os;
  os.precision(17);
  std::string ms;
  for (std::size_t i = 0; i < milestones.size(); ++i) ms += (i ? "," : "") + std::to_string(milestones[i]);
  os << "base_lr = " << base_lr << "\n"
     << "batch_size = " << batch_size << "\n"
     << "blocks = " << blocks << "\n"
     << "gt_size = " << gt_size << "\n"
     << "iterations = " << iterations << "\n"
     << "loss = " << to_string(loss) << "\n"
     << "milestones = " << ms << "\n"
     << "task = " << model::to_string(task) << "\n";
  return os.str();
}

TrainPreset TrainPreset::from_map(const std::map<std::string, std::string>& kv) {
  auto task_it = kv.find("task");
  TrainPreset p = for_task(task_it == kv.end() ? model::Task::kLightSr : model::parse_task(task_it->second));
  p.apply(kv);
  return p;
}

void TrainPreset::apply(const std::map<std::string, std::string>& kv) {
  TrainPreset& p = *this;
  for (const auto& [k, v] : kv) {
    if (k == "base_lr") {
      try {
        p.base_lr = std::stod(v);
      } catch (const std::exception&) {
        throw ConfigError("'base_lr' expects a number, got '" + v + "'");
      }
      if (!(p.base_lr > 0.0)) throw ConfigError("'base_lr' must be positive");
    } else if (k == "batch_size") {
      p.batch_size = parse_size(k, v);
      if (p.batch_size == 0) throw ConfigError("'batch_size' must be positive");
    } else if (k == "blocks") {
      p.blocks = parse_size(k, v);
    } else if (k == "gt_size") {
      p.gt_size = parse_size(k, v);
    } else if (k == "iterations") {
      p.iterations = parse_size(k, v);
    } else if (k == "loss") {
      p.loss = parse_loss(v);
    } else if (k == "milestones") {
      p.milestones.clear();
      std::istringstream is(v);
      std::string tok;
      while (std::getline(is, tok, ',')) p.milestones.push_back(parse_size(k, tok));
      if (!std::is_sorted(p.milestones.begin(), p.milestones.end())) throw ConfigError("'milestones' must ascend");
    }
  }
}

Tensor l1_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) throw ShapeError("l1_loss: shape mismatch");
  return ops::mean(ops::abs(ops::sub(pred, gt)));
}

Tensor charbonnier_loss(const Tensor& pred, const Tensor& gt, double eps) {
  if (pred.shape() != gt.shape()) throw ShapeError("charbonnier_loss: shape mismatch");
  return ops::mean(ops::sqrt(ops::add(ops::square(ops::sub(pred, gt)), eps * eps)));
}

Tensor loss_fn(Loss loss, const Tensor& pred, const Tensor& gt) {
  return loss == Loss::kL1 ? l1_loss(pred, gt) : charbonnier_loss(pred, gt);
}

double lr_at(std::size_t iter, const TrainPreset& preset) {
  const auto passed = std::count_if(preset.milestones.begin(), preset.milestones.end(),
                                    [&](std::size_t m) { return m <= iter; });
  return preset.base_lr * std::ldexp(1.0, -static_cast<int>(passed));
}

Tensor apply_transform(const Tensor& img, int code) {
  if (code < 0 || code > 7) throw ShapeError("transform code must lie in [0, 8)");
  const Tensor flipped = (code & 4) ? image::flip_horizontal(img) : img;
  return image::rotate90(flipped, code & 3);
}

// With F a flip and R a quarter turn, F R = R^-1 F, so
// R^rb F^fb R^ra F^fa = R^(rb + (fb ? -ra : ra)) F^(fa ^ fb).
int compose_transforms(int a, int b) {
  const int fa = (a >> 2) & 1, ra = a & 3, fb = (b >> 2) & 1, rb = b & 3;
  const int r = ((rb + (fb ? -ra : ra)) % 4 + 4) % 4;
  return ((fa ^ fb) << 2) | r;
}

Pair augment(const Pair& pair, std::uint64_t seed) {
  Rng rng(seed);
  const int code = static_cast<int>(rng.index(8));
  return {apply_transform(pair.hr, code), apply_transform(pair.lr, code)};
}

DegradationSpec DegradationSpec::for_task(model::Task task, std::size_t scale) {
  DegradationSpec s;
  switch (task) {
    case model::Task::kClassicSr:
    case model::Task::kLightSr: s.kind = DegradationKind::kBicubicDown, s.scale = scale; break;
    case model::Task::kDenoise: s.kind = DegradationKind::kGaussianNoise, s.scale = 1; break;
    case model::Task::kJpegCar: s.kind = DegradationKind::kJpegLike, s.scale = 1; break;
  }
  return s;
}

std::array<int, 64> jpeg_quant_table(int quality) {
  static constexpr std::array<int, 64> kLuma{16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                             14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                             18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                             49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> t{};
  for (int i = 0; i < 64; ++i) t[i] = std::clamp((kLuma[i] * scale + 50) / 100, 1, 255);
  return t;
}

namespace {

// Orthonormal 8-point DCT-II basis: basis[k][n].
const std::array<std::array<double, 8>, 8>& dct_basis() {
  static const auto b = [] {
    std::array<std::array<double, 8>, 8> m{};
    for (int k = 0; k < 8; ++k)
      for (int n = 0; n < 8; ++n)
        m[k][n] = (k == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8)) * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0);
    return m;
  }();
  return b;
}

Tensor jpeg_like(const Tensor& hr, int quality) {
  const auto table = jpeg_quant_table(quality);
  const auto& d = dct_basis();
  const std::size_t c_n = hr.shape()[0], h = hr.shape()[1], w = hr.shape()[2];
  Tensor out = Tensor::zeros(hr.shape());
  auto o = out.mutable_data();
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t by = 0; by < h; by += 8) {
      for (std::size_t bx = 0; bx < w; bx += 8) {
        // Partial edge blocks replicate the last row/column.
        double blk[8][8], tmp[8][8], coef[8][8];
        for (int i = 0; i < 8; ++i)
          for (int j = 0; j < 8; ++j) {
            const std::size_t y = std::min(by + i, h - 1), x = std::min(bx + j, w - 1);
            blk[i][j] = hr.at((c * h + y) * w + x) * 255.0 - 128.0;
          }
        for (int u = 0; u < 8; ++u)
          for (int j = 0; j < 8; ++j) {
            double s = 0.0;
            for (int i = 0; i < 8; ++i) s += d[u][i] * blk[i][j];
            tmp[u][j] = s;
          }
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int j = 0; j < 8; ++j) s += tmp[u][j] * d[v][j];
            const double q = table[u * 8 + v];
            coef[u][v] = std::round(s / q) * q;
          }
        for (int i = 0; i < 8; ++i)
          for (int v = 0; v < 8; ++v) {
            double s = 0.0;
            for (int u = 0; u < 8; ++u) s += d[u][i] * coef[u][v];
            tmp[i][v] = s;
          }
        for (int i = 0; i < 8 && by + i < h; ++i)
          for (int j = 0; j < 8 && bx + j < w; ++j) {
            double s = 0.0;
            for (int v = 0; v < 8; ++v) s += tmp[i][v] * d[v][j];
            o[(c * h + by + i) * w + bx + j] = std::clamp((s + 128.0) / 255.0, 0.0, 1.0);
          }
      }
    }
  }
  return out;
}

}  // namespace

Tensor degrade(const Tensor& hr, const DegradationSpec& spec, std::uint64_t seed) {
  if (hr.shape().size() != 3) throw ShapeError("degrade expects [C x H x W]");
  image::check_unit_range(hr, "degrade input");
  switch (spec.kind) {
    case DegradationKind::kBicubicDown: {
      const std::size_t s = spec.scale, h = hr.shape()[1], w = hr.shape()[2];
      if (s < 1 || h % s || w % s) throw ShapeError("bicubic_down: image size not divisible by the scale");
      if (s == 1) return hr.clone();
      // Cubic overshoot at edges is clipped, as it would be in a stored LR image.
      Tensor lr = image::resize_bicubic(hr, h / s, w / s);
      for (double& v : lr.mutable_data()) v = std::clamp(v, 0.0, 1.0);
      return lr;
    }
    case DegradationKind::kGaussianNoise: {
      if (spec.sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
      Tensor out = hr.clone();
      if (spec.sigma == 0.0) return out;
      Rng rng(seed);
      const double sd = spec.sigma / 255.0;
      for (double& v : out.mutable_data()) v = std::clamp(v + rng.normal(0.0, sd), 0.0, 1.0);
      return out;
    }
    case DegradationKind::kJpegLike: return jpeg_like(hr, spec.quality);
  }
  return hr.clone();
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!params_[k].has_grad()) continue;
    auto x = params_[k].mutable_data();
    auto g = params_[k].grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

namespace {

std::uint64_t id_seed(const std::string& id) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : id) h = (h ^ c) * 1099511628211ull;
  return h;
}

std::size_t crop_border(const DegradationSpec& spec) {
  return spec.kind == DegradationKind::kBicubicDown ? spec.scale : 0;
}

// On-grid check for a fake-quantized weight's forward values.
void assert_on_grid(const quant::QuantWeight& w) {
  const Tensor v = w.effective_values();
  if (w.method == quant::Method::kQssm) {
    for (double x : v.data()) {
      if (!std::binary_search(w.rfa.levels.begin(), w.rfa.levels.end(), x))
        throw NumericError("weight '" + w.name + "' left its level grid");
    }
  } else if (w.method == quant::Method::kStatic) {
    for (double x : v.data()) {
      const double z = (x - w.uniform.beta) * w.uniform.alpha;
      if (std::fabs(z - std::round(z)) > 1e-6) throw NumericError("weight '" + w.name + "' left its level grid");
    }
  }
}

Tensor crop_patch(const Tensor& img, std::size_t top, std::size_t left, std::size_t size) {
  return image::crop(img, top, left, size, size);
}

}  // namespace

Pair validation_pair(const Sample& s, const DegradationSpec& spec) {
  if (s.lr) return {s.hr, *s.lr};
  return {s.hr, degrade(s.hr, spec, id_seed(s.id))};
}

EvalScore evaluate(const model::RestorationNet& net, const std::vector<Sample>& val, const DegradationSpec& spec) {
  if (val.empty()) throw DataError("validation set is empty");
  NoGradScope no_grad;
  EvalScore score;
  for (const auto& s : val) {
    const Pair p = validation_pair(s, spec);
    const Tensor out = ops::clamp(net.forward(p.lr), 0.0, 1.0);
    if (out.shape() != p.hr.shape())
      throw DataError("output of '" + s.id + "' does not match its HR shape; check the scale");
    score.psnr += metrics::psnr_y(out, p.hr, crop_border(spec));
    score.ssim += metrics::ssim_y(out, p.hr, crop_border(spec));
  }
  score.psnr /= static_cast<double>(val.size());
  score.ssim /= static_cast<double>(val.size());
  return score;
}

EvalScore evaluate_bicubic(const std::vector<Sample>& val, const DegradationSpec& spec) {
  if (val.empty()) throw DataError("validation set is empty");
  EvalScore score;
  for (const auto& s : val) {
    const Pair p = validation_pair(s, spec);
    const Tensor out = ops::clamp(model::residual_path(p.lr, spec.scale), 0.0, 1.0);
    score.psnr += metrics::psnr_y(out, p.hr, crop_border(spec));
    score.ssim += metrics::ssim_y(out, p.hr, crop_border(spec));
  }
  score.psnr /= static_cast<double>(val.size());
  score.ssim /= static_cast<double>(val.size());
  return score;
}

TrainResult qat_train(model::RestorationNet& net, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& val_set, const TrainOptions& opts) {
  if (train_set.empty()) throw DataError("training set is empty");
  const TrainPreset& preset = opts.preset;
  const std::size_t scale = opts.degradation.kind == DegradationKind::kBicubicDown ? opts.degradation.scale : 1;
  if (scale != net.config().scale) throw ConfigError("degradation scale does not match the model scale");
  const std::size_t gt = preset.gt_size;
  if (gt == 0 || gt % scale) throw ConfigError("gt_size must be a positive multiple of the scale");
  if (gt / scale < 8) throw ConfigError("gt_size / scale must be at least 8");
  for (const auto& s : train_set) {
    if (s.hr.shape()[1] < gt || s.hr.shape()[2] < gt)
      throw DataError("image '" + s.id + "' is smaller than the " + std::to_string(gt) + "px training patch");
  }

  std::vector<Tensor> params;
  for (const auto& p : net.parameters()) params.push_back(p.tensor);
  for (const auto& p : net.quantizer_parameters()) params.push_back(p.tensor);
  Adam adam(params);
  Rng rng(opts.seed);

  TrainResult result;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t iter = 0; iter < opts.iterations; ++iter) {
    const double lr = lr_at(iter, preset);
    adam.zero_grad();
    Tape tape;
    double loss_value = 0.0;
    {
      TapeScope scope(tape);
      Tensor total;
      for (std::size_t b = 0; b < preset.batch_size; ++b) {
        const Sample& s = train_set[rng.index(train_set.size())];
        const std::size_t h = s.hr.shape()[1], w = s.hr.shape()[2];
        const std::size_t top = rng.index((h - gt) / scale + 1) * scale;
        const std::size_t left = rng.index((w - gt) / scale + 1) * scale;
        const std::uint64_t degrade_seed = rng.next(), aug_seed = rng.next();
        Pair pair;
        pair.hr = crop_patch(s.hr, top, left, gt);
        pair.lr = s.lr ? crop_patch(*s.lr, top / scale, left / scale, gt / scale)
                       : degrade(pair.hr, opts.degradation, degrade_seed);
        pair = augment(pair, aug_seed);
        Tensor l = loss_fn(preset.loss, net.forward(pair.lr), pair.hr);
        total = b == 0 ? l : ops::add(total, l);
      }
      Tensor loss = ops::mul(total, 1.0 / static_cast<double>(preset.batch_size));
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        const auto node = tape.first_non_finite();
        throw NumericError("non-finite loss at iteration " + std::to_string(iter) + "; first bad node: " +
                           node.value_or("unknown"));
      }
      tape.backward(loss);
    }
    adam.step(lr);
    for (auto* w : net.body_weights()) {
      if (w->method == quant::Method::kQssm) quant::project_thresholds(w->rfa);
      if (opts.check_grid) assert_on_grid(*w);
    }
    result.final_loss = loss_value;

    const bool last = iter + 1 == opts.iterations;
    const bool eval_now = !val_set.empty() && (last || (opts.eval_every && (iter + 1) % opts.eval_every == 0));
    if (last || eval_now || (opts.log_every && (iter + 1) % opts.log_every == 0)) {
      LogRow row{iter + 1, lr, loss_value, nan, nan};
      if (eval_now) {
        const auto score = evaluate(net, val_set, opts.degradation);
        row.psnr_val = score.psnr;
        row.ssim_val = score.ssim;
        result.val_psnr = score.psnr;
        result.val_ssim = score.ssim;
      }
      result.log.push_back(row);
    }
  }
  if (opts.iterations == 0 && !val_set.empty()) {
    const auto score = evaluate(net, val_set, opts.degradation);
    result.val_psnr = score.psnr;
    result.val_ssim = score.ssim;
  }
  return result;
}

std::string log_to_csv(const std::vector<LogRow>& log) {
  std::ostringstream os;
  os << "iter,lr,loss,psnr_val,ssim_val\n";
  auto cell = [](double v) { return std::isnan(v) ? std::string() : metrics::format_metric(v, 6); };
  for (const auto& r : log) {
    std::ostringstream lr;
    lr.precision(6);
    lr << std::scientific << r.lr;
    std::ostringstream loss;
    loss.precision(9);
    loss << std::fixed << r.loss;
    os << r.iter << ',' << lr.str() << ',' << loss.str() << ',' << cell(r.psnr_val) << ',' << cell(r.ssim_val) << '\n';
  }
  return os.str();
}

}  // namespace qssm::train
