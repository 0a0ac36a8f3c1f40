#include "qssm/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <limits>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>
#include <sstream>

#include "qssm/error.hpp"
#include "qssm/image.hpp"
#include "qssm/io.hpp"
#include "qssm/metrics.hpp"
#include "qssm/ops.hpp"
#include "qssm/train.hpp"

#ifndef QSSM_VERSION
#define QSSM_VERSION "0.1.0"
#endif

namespace qssm::cli {

namespace {

using Settings = std::map<std::string, std::string>;

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "task",       "scale",     "blocks",   "channels",   "state_size", "reduction", "w_bits",   "a_bits",
      "method",     "batch_size", "base_lr", "loss",       "gt_size",    "milestones", "iterations", "seed",
      "desk",       "hr_dir",    "lr_dir",   "val_count",  "out",        "dls_init",  "eval_every", "log_every",
      "checkpoint", "packed",    "sites",    "sigma",      "quality",    "calib_count"};
  return keys;
}

std::optional<std::string> get(const Settings& s, const std::string& key) {
  auto it = s.find(key);
  if (it == s.end() || it->second.empty()) return std::nullopt;
  return it->second;
}

std::size_t get_size(const Settings& s, const std::string& key, std::size_t fallback) {
  auto v = get(s, key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    const long long n = std::stoll(*v, &pos);
    if (pos != v->size() || n < 0) throw std::invalid_argument(*v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + *v + "'");
  }
}

double get_double(const Settings& s, const std::string& key, double fallback) {
  auto v = get(s, key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    const double d = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument(*v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + *v + "'");
  }
}

bool get_bool(const Settings& s, const std::string& key) {
  auto v = get(s, key);
  if (!v) return false;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + *v + "'");
}

fs::path require_path(const Settings& s, const std::string& key, const std::string& what) {
  auto v = get(s, key);
  if (!v) throw ConfigError(what + ": no '" + key + "' given");
  return *v;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::size_t crop_for(const model::ModelConfig& cfg) {
  return cfg.task == model::Task::kClassicSr || cfg.task == model::Task::kLightSr ? cfg.scale : 0;
}

train::DegradationSpec degradation_for(const model::ModelConfig& cfg, const Settings& s) {
  auto spec = train::DegradationSpec::for_task(cfg.task, cfg.scale);
  spec.sigma = get_double(s, "sigma", spec.sigma);
  spec.quality = static_cast<int>(get_size(s, "quality", static_cast<std::size_t>(spec.quality)));
  return spec;
}

std::vector<train::Sample> load_dataset(const Settings& s) {
  const fs::path hr = require_path(s, "hr_dir", "dataset");
  if (!fs::is_directory(hr)) throw ConfigError("dataset hr_dir '" + hr.string() + "' does not exist");
  std::optional<fs::path> lr;
  if (auto v = get(s, "lr_dir")) lr = fs::path(*v);
  return io::DatasetLayout::scan(hr, lr).load();
}

// LR input for `sample`, with the HR/LR geometry checked against the scale.
train::Pair eval_pair(const train::Sample& sample, const model::ModelConfig& cfg, const train::DegradationSpec& spec) {
  const std::size_t scale = crop_for(cfg) ? cfg.scale : 1;
  const auto& hs = sample.hr.shape();
  if (sample.lr) {
    const auto& ls = sample.lr->shape();
    if (ls[1] * scale != hs[1] || ls[2] * scale != hs[2])
      throw DataError("scale mismatch for pair '" + sample.id + "': LR " + std::to_string(ls[1]) + "x" +
                      std::to_string(ls[2]) + " vs HR " + std::to_string(hs[1]) + "x" + std::to_string(hs[2]) +
                      " at scale " + std::to_string(scale));
  } else if (hs[1] % scale || hs[2] % scale) {
    throw DataError("HR image '" + sample.id + "' is not divisible by scale " + std::to_string(scale));
  }
  return train::validation_pair(sample, spec);
}

std::string bits_tag(const model::ModelConfig& cfg) {
  return "w" + std::to_string(cfg.w_bits) + "a" + std::to_string(cfg.a_bits);
}

}  // namespace

Settings resolve_settings(const Options& opts) {
  Settings s;
  if (opts.config) s = io::read_kv_file(*opts.config);
  if (const char* env = std::getenv("QSSM_SEED"); env && *env) s["seed"] = env;
  if (opts.task) s["task"] = *opts.task;
  if (opts.bits) {
    s["w_bits"] = std::to_string(opts.bits->first);
    s["a_bits"] = std::to_string(opts.bits->second);
  }
  if (opts.scale) s["scale"] = std::to_string(*opts.scale);
  if (opts.desk) s["desk"] = "true";
  if (opts.seed) s["seed"] = std::to_string(*opts.seed);
  if (opts.out) s["out"] = opts.out->string();
  if (opts.checkpoint) s["checkpoint"] = opts.checkpoint->string();
  if (opts.hr_dir) s["hr_dir"] = opts.hr_dir->string();
  if (opts.lr_dir) s["lr_dir"] = opts.lr_dir->string();
  if (opts.packed) s["packed"] = opts.packed->string();
  if (opts.sites) s["sites"] = *opts.sites;
  if (opts.iterations) s["iterations"] = std::to_string(*opts.iterations);
  if (opts.method) s["method"] = *opts.method;
  for (const auto& [k, v] : s) {
    if (!known_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  return s;
}

int cmd_train(const Options& opts, std::ostream& out) {
  const Settings s = resolve_settings(opts);
  model::ModelConfig cfg = model::ModelConfig::from_map(s);
  train::TrainPreset preset = train::TrainPreset::for_task(cfg.task);
  if (get_bool(s, "desk")) preset = preset.desk();
  preset.apply(s);
  if (!get(s, "blocks")) cfg.blocks = preset.blocks;
  const std::uint64_t seed = get_size(s, "seed", 0);
  const auto spec = degradation_for(cfg, s);

  auto data = load_dataset(s);
  const std::size_t val_count = get_size(s, "val_count", 2);
  if (val_count >= data.size())
    throw DataError("dataset has " + std::to_string(data.size()) + " images; need more than val_count = " +
                    std::to_string(val_count));
  const std::vector<train::Sample> val(data.end() - static_cast<std::ptrdiff_t>(val_count), data.end());
  data.resize(data.size() - val_count);

  model::RestorationNet net(cfg, seed);
  if (cfg.quantized()) {
    // Calibration: center GT crops of the first training images, degraded deterministically.
    std::vector<Tensor> calib;
    const std::size_t n = std::min(get_size(s, "calib_count", 4), data.size());
    const std::size_t gt = preset.gt_size;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& hr = data[i].hr;
      const std::size_t unit = spec.kind == train::DegradationKind::kBicubicDown ? spec.scale : 1;
      const std::size_t top = (hr.shape()[1] - gt) / 2 / unit * unit, left = (hr.shape()[2] - gt) / 2 / unit * unit;
      if (data[i].lr) {
        calib.push_back(image::crop(*data[i].lr, top / unit, left / unit, gt / unit, gt / unit));
      } else {
        calib.push_back(train::degrade(image::crop(hr, top, left, gt, gt), spec, i));
      }
    }
    const auto init = quant::parse_dls_init(get(s, "dls_init").value_or(quant::to_string(quant::DlsInit::kMu3SigmaMu)));
    model::quantize_model(net, cfg.w_bits, cfg.a_bits, calib, cfg.method, init);
  }

  train::TrainOptions topts;
  topts.preset = preset;
  topts.iterations = preset.iterations;
  topts.seed = seed;
  topts.degradation = spec;
  topts.eval_every = get_size(s, "eval_every", 500);
  topts.log_every = get_size(s, "log_every", 100);

  const fs::path dir = get(s, "out").value_or("runs/" + model::to_string(cfg.task) + "_" + bits_tag(cfg));
  const std::string started = timestamp();
  const auto result = train::qat_train(net, data, val, topts);

  const fs::path ckpt = dir / "checkpoint.qirc", csv = dir / "metrics.csv", manifest = dir / "manifest.json";
  io::save_checkpoint(net, ckpt);
  io::write_text(csv, train::log_to_csv(result.log));
  nlohmann::ordered_json m;
  m["version"] = QSSM_VERSION;
  m["seed"] = seed;
  m["settings"] = s;
  m["model"] = net.config().to_text();
  m["preset"] = preset.to_text();
  m["started"] = started;
  m["finished"] = timestamp();
  m["artifacts"] = {{"checkpoint", ckpt.string()}, {"metrics", csv.string()}};
  m["val_psnr"] = metrics::format_metric(result.val_psnr);
  m["val_ssim"] = metrics::format_metric(result.val_ssim);
  io::write_text(manifest, m.dump(2) + "\n");

  out << "trained " << topts.iterations << " iterations (" << model::to_string(cfg.task) << ", "
      << bits_tag(cfg) << ")\n"
      << "final loss: " << result.final_loss << "\n"
      << "val psnr: " << metrics::format_metric(result.val_psnr, 4) << " dB, ssim "
      << metrics::format_metric(result.val_ssim, 4) << "\n"
      << "wrote " << ckpt.string() << ", " << csv.string() << ", " << manifest.string() << "\n";
  return 0;
}

int cmd_eval(const Options& opts, std::ostream& out) {
  const Settings s = resolve_settings(opts);
  auto net = io::load_checkpoint(require_path(s, "checkpoint", "eval"));
  if (auto p = get(s, "packed")) io::import_packed_body(*net, io::decode_packed_body(io::read_file(*p)));
  const auto& cfg = net->config();
  const auto spec = degradation_for(cfg, s);
  const auto data = load_dataset(s);

  std::ostringstream csv;
  csv << "image_id,psnr_db,ssim,bits_w,bits_a,task,scale\n";
  const std::string tail = "," + std::to_string(cfg.w_bits) + "," + std::to_string(cfg.a_bits) + "," +
                           model::to_string(cfg.task) + "," + std::to_string(cfg.scale) + "\n";
  double psnr_sum = 0.0, ssim_sum = 0.0;
  NoGradScope no_grad;
  for (const auto& sample : data) {
    const auto pair = eval_pair(sample, cfg, spec);
    const Tensor restored = ops::clamp(net->forward(pair.lr), 0.0, 1.0);
    const double p = metrics::psnr_y(restored, pair.hr, crop_for(cfg));
    const double q = metrics::ssim_y(restored, pair.hr, crop_for(cfg));
    psnr_sum += p;
    ssim_sum += q;
    csv << io::csv_cell(sample.id) << ',' << metrics::format_metric(p) << ',' << metrics::format_metric(q) << tail;
  }
  const double n = static_cast<double>(data.size());
  csv << "mean," << metrics::format_metric(psnr_sum / n) << ',' << metrics::format_metric(ssim_sum / n) << tail;
  if (auto o = get(s, "out")) {
    io::write_text(*o, csv.str());
  } else {
    out << csv.str();
  }
  return 0;
}

int cmd_export(const Options& opts, std::ostream& out) {
  const Settings s = resolve_settings(opts);
  const fs::path ckpt = require_path(s, "checkpoint", "export");
  auto net = io::load_checkpoint(ckpt);
  const auto& cfg = net->config();
  if (!cfg.quantized())
    throw ConfigError("checkpoint is full precision; quantize it first (train with --bits W A)");
  const auto body = io::pack_body(*net);
  const auto bytes = io::encode_packed_body(body);
  fs::path dest = get(s, "out").value_or(fs::path(ckpt).replace_extension(".qssm").string());
  io::write_file(dest, bytes);

  std::size_t payload = 0;
  for (const auto& e : body) payload += e.packed.bitstream.size();
  const std::size_t fp32_body = net->body_weight_count() * 4;
  const std::size_t lr_side = 64;
  const auto report = metrics::count_complexity(cfg, lr_side, lr_side, cfg.w_bits, cfg.a_bits);
  out << std::fixed << std::setprecision(4) << "wrote " << dest.string() << " (" << bytes.size() << " bytes, "
      << payload << " payload, " << body.size() << " tensors)\n"
      << "fp32 body bytes: " << fp32_body << "\n"
      << "packed/fp32 body: " << static_cast<double>(bytes.size()) / static_cast<double>(fp32_body) << "\n"
      << "params full: " << report.params_full << "\n"
      << "params effective: " << report.params_effective << "\n"
      << "param reduction: " << report.param_reduction() << "\n"
      << "MACs full (" << lr_side << "x" << lr_side << " input): " << report.ops_full << "\n"
      << "MACs effective: " << report.ops_effective << "\n"
      << "MAC reduction: " << report.ops_reduction() << "\n";
  return 0;
}

std::vector<SiteStats> collect_site_stats(const model::RestorationNet& net, const std::vector<Tensor>& inputs,
                                          const std::string& selector, const quant::ActivationHook* inject) {
  auto matches = [&](const std::string& site) {
    return selector.empty() || selector == "*" || site.find(selector) != std::string::npos;
  };
  std::vector<std::string> available;
  for (const auto* site : net.activation_sites()) available.push_back(site->name);
  if (std::none_of(available.begin(), available.end(), matches)) {
    std::string list;
    for (const auto& a : available) list += "\n  " + a;
    throw ConfigError("site selector '" + selector + "' matches nothing; available sites:" + list);
  }
  std::vector<SiteStats> rows;
  std::size_t batch = 0;
  const quant::ActivationHook hook = [&](const std::string& site, Tensor& x) {
    if (inject && *inject) (*inject)(site, x);
    if (!matches(site)) return;
    SiteStats r;
    r.site = site;
    r.batch = batch;
    r.numel = x.numel();
    r.phi = quant::compute_stats(x).first;
    const double lo = r.phi.xmin, span = r.phi.xmax - r.phi.xmin;
    for (double v : x.data()) {
      std::size_t bin = 0;
      if (span > 0.0) bin = std::min<std::size_t>(255, static_cast<std::size_t>((v - lo) / span * 256.0));
      ++r.hist[bin];
    }
    rows.push_back(std::move(r));
  };
  NoGradScope no_grad;
  for (; batch < inputs.size(); ++batch) net.forward(inputs[batch], quant::ForwardContext{&hook});
  return rows;
}

std::string stats_to_csv(const std::vector<SiteStats>& rows) {
  std::ostringstream os;
  os << "site,batch,numel,mu,sigma,xmin,xmax";
  for (int b = 0; b < 256; ++b) os << ",bin_" << std::setw(3) << std::setfill('0') << b;
  os << '\n' << std::setfill(' ');
  os.precision(17);
  for (const auto& r : rows) {
    os << io::csv_cell(r.site) << ',' << r.batch << ',' << r.numel << ',' << r.phi.mu << ',' << r.phi.sigma << ','
       << r.phi.xmin << ',' << r.phi.xmax;
    for (auto c : r.hist) os << ',' << c;
    os << '\n';
  }
  return os.str();
}

int cmd_stats(const Options& opts, std::ostream& out) {
  const Settings s = resolve_settings(opts);
  auto net = io::load_checkpoint(require_path(s, "checkpoint", "stats"));
  const auto& cfg = net->config();
  const auto spec = degradation_for(cfg, s);
  std::vector<Tensor> inputs;
  for (const auto& sample : load_dataset(s)) inputs.push_back(eval_pair(sample, cfg, spec).lr);
  const auto rows = collect_site_stats(*net, inputs, get(s, "sites").value_or("*"));
  const std::string csv = stats_to_csv(rows);
  if (auto o = get(s, "out")) {
    io::write_text(*o, csv);
  } else {
    out << csv;
  }
  return 0;
}

int run(const std::string& command, const Options& opts, std::ostream& out, std::ostream& err) {
  try {
    if (command == "train") return cmd_train(opts, out);
    if (command == "eval") return cmd_eval(opts, out);
    if (command == "export") return cmd_export(opts, out);
    if (command == "stats") return cmd_stats(opts, out);
    err << "error: unknown command '" << command << "'\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace qssm::cli
