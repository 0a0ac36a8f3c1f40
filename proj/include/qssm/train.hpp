#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qssm/model.hpp"
#include "qssm/random.hpp"
#include "qssm/tensor.hpp"

namespace qssm::train {

enum class Loss { kL1, kCharbonnier };

std::string to_string(Loss loss);
Loss parse_loss(const std::string& name);

struct TrainPreset {
  model::Task task = model::Task::kLightSr;
  std::size_t batch_size = 2;
  double base_lr = 2e-4;
  Loss loss = Loss::kL1;
  std::size_t gt_size = 192;
  std::size_t blocks = 4;
  std::vector<std::size_t> milestones{10000, 15000, 17500, 18750};
  std::size_t iterations = 20000;

  static TrainPreset for_task(model::Task task);
  // CPU-budget variant: 2000 iterations, milestones x0.1, 48-pixel GT patches.
  TrainPreset desk() const;

  std::string to_text() const;
  // Overrides fields named in `kv`; other keys are ignored.
  void apply(const std::map<std::string, std::string>& kv);
  static TrainPreset from_map(const std::map<std::string, std::string>& kv);
};

// Mean absolute error; the subgradient at a tie is 0.
Tensor l1_loss(const Tensor& pred, const Tensor& gt);
// Mean of sqrt((pred - gt)^2 + eps^2).
Tensor charbonnier_loss(const Tensor& pred, const Tensor& gt, double eps = 1e-3);
Tensor loss_fn(Loss loss, const Tensor& pred, const Tensor& gt);

// base_lr * 0.5^(number of milestones <= iter).
double lr_at(std::size_t iter, const TrainPreset& preset);

// Dihedral transform: bit 2 selects a horizontal flip (applied first), bits 0-1
// the number of counter-clockwise quarter turns.
Tensor apply_transform(const Tensor& img, int code);
// Code of transform(b) after transform(a).
int compose_transforms(int a, int b);

struct Pair {
  Tensor hr;
  Tensor lr;
};
// Same random transform on both images.
Pair augment(const Pair& pair, std::uint64_t seed);

enum class DegradationKind { kBicubicDown, kGaussianNoise, kJpegLike };

struct DegradationSpec {
  DegradationKind kind = DegradationKind::kBicubicDown;
  std::size_t scale = 2;  // bicubic_down
  double sigma = 25.0;    // gaussian_noise, 0-255 scale
  int quality = 30;       // jpeg_like, 1..100

  // Task defaults: bicubic for SR, sigma 25 for denoise, q 30 for JPEG.
  static DegradationSpec for_task(model::Task task, std::size_t scale);
};

Tensor degrade(const Tensor& hr, const DegradationSpec& spec, std::uint64_t seed);

// Standard JPEG luminance table scaled by quality (IJG convention), entries >= 1.
std::array<int, 64> jpeg_quant_table(int quality);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct Sample {
  std::string id;
  Tensor hr;
  std::optional<Tensor> lr;  // stored degradation; generated from hr otherwise
};

struct LogRow {
  std::size_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  double psnr_val = 0.0;  // NaN when not evaluated at this row
  double ssim_val = 0.0;
};

struct TrainOptions {
  TrainPreset preset;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  DegradationSpec degradation;
  std::size_t log_every = 100;
  std::size_t eval_every = 500;  // 0: evaluate only at the end
  // Assert after every step that forward body weights sit on their level grids.
  bool check_grid = true;
};

struct TrainResult {
  std::vector<LogRow> log;
  double final_loss = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
};

// Validation pair for a sample (stored LR, or the degradation with a seed fixed per id).
Pair validation_pair(const Sample& s, const DegradationSpec& spec);

struct EvalScore {
  double psnr = 0.0;
  double ssim = 0.0;
};
// Mean Y-channel PSNR/SSIM over `val`, border cropped by the scale.
EvalScore evaluate(const model::RestorationNet& net, const std::vector<Sample>& val, const DegradationSpec& spec);
// Same protocol for the bicubic residual path alone.
EvalScore evaluate_bicubic(const std::vector<Sample>& val, const DegradationSpec& spec);

// Quantization-aware training loop. Deterministic given (net state, data, options).
// A non-finite loss aborts with NumericError naming the first offending tape node.
TrainResult qat_train(model::RestorationNet& net, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& val_set, const TrainOptions& opts);

std::string log_to_csv(const std::vector<LogRow>& log);

}  // namespace qssm::train
