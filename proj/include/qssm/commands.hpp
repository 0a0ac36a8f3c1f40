#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qssm/model.hpp"
#include "qssm/quant.hpp"
#include "qssm/quant_layers.hpp"

// The four CLI commands. Each returns a process exit code:
// 0 success, 2 usage/config, 3 data, 4 numeric failure.
namespace qssm::cli {

namespace fs = std::filesystem;

struct Options {
  std::optional<fs::path> config;
  std::optional<std::string> task;
  std::optional<std::pair<int, int>> bits;
  std::optional<std::size_t> scale;
  bool desk = false;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> hr_dir;
  std::optional<fs::path> lr_dir;
  std::optional<fs::path> packed;       // eval: use weights from a packed container
  std::optional<std::string> sites;     // stats: substring selector, "*" for all
  std::optional<std::size_t> iterations;
  std::optional<std::string> method;    // qssm | static
};

// Config file, then QSSM_SEED, then command-line flags; later sources win.
std::map<std::string, std::string> resolve_settings(const Options& opts);

int run(const std::string& command, const Options& opts, std::ostream& out, std::ostream& err);

int cmd_train(const Options& opts, std::ostream& out);
int cmd_eval(const Options& opts, std::ostream& out);
int cmd_export(const Options& opts, std::ostream& out);
int cmd_stats(const Options& opts, std::ostream& out);

// Per-site activation census behind the outlier picture.
struct SiteStats {
  std::string site;
  std::size_t batch = 0;
  std::size_t numel = 0;
  quant::StatsVector phi;
  std::array<std::size_t, 256> hist{};  // equal bins over [xmin, xmax]
};

// `inject` runs before recording and may rewrite the activation.
std::vector<SiteStats> collect_site_stats(const model::RestorationNet& net, const std::vector<Tensor>& inputs,
                                          const std::string& selector,
                                          const quant::ActivationHook* inject = nullptr);
std::string stats_to_csv(const std::vector<SiteStats>& rows);

}  // namespace qssm::cli
