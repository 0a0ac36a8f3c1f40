#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qssm/model.hpp"
#include "qssm/quant.hpp"
#include "qssm/tensor.hpp"
#include "qssm/train.hpp"

// Files on disk: PNG images, dataset folders, key-value configs, checkpoints
// and packed weight containers.
namespace qssm::io {

namespace fs = std::filesystem;

// 8- or 16-bit gray/RGB PNG -> [3 x H x W] in [0, 1]; gray is replicated.
Tensor load_png(const fs::path& path);
// [3 x H x W] (or [1 x H x W]) in [0, 1] -> 8-bit PNG, round half away from zero.
void save_png(const Tensor& img, const fs::path& path);

// HR folder plus an optional LR folder paired by file stem.
struct DatasetLayout {
  fs::path hr_dir;
  std::optional<fs::path> lr_dir;
  std::vector<std::string> stems;  // sorted

  static DatasetLayout scan(const fs::path& hr_dir, const std::optional<fs::path>& lr_dir = std::nullopt);
  std::vector<train::Sample> load() const;
};

// "key = value" lines; blank lines and '#' comments ignored.
std::map<std::string, std::string> parse_kv(const std::string& text);
std::map<std::string, std::string> read_kv_file(const fs::path& path);

std::vector<std::uint8_t> read_file(const fs::path& path);
void write_file(const fs::path& path, std::span<const std::uint8_t> bytes);
void write_text(const fs::path& path, const std::string& text);

// Checkpoint container "QIRC": config text, named f64 tensors, then packed
// sections for weights that were imported from packed storage.
std::vector<std::uint8_t> encode_checkpoint(const model::RestorationNet& net);
std::unique_ptr<model::RestorationNet> decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const model::RestorationNet& net, const fs::path& path);
std::unique_ptr<model::RestorationNet> load_checkpoint(const fs::path& path);

// Packed body: one (u16 name length, name, QSSM record) entry per body weight.
struct NamedPacked {
  std::string name;
  quant::PackedWeights packed;
};
std::vector<NamedPacked> pack_body(const model::RestorationNet& net);
std::vector<std::uint8_t> encode_packed_body(const std::vector<NamedPacked>& body);
std::vector<NamedPacked> decode_packed_body(std::span<const std::uint8_t> bytes);
// Installs unpacked values as the deployed forward weights.
void import_packed_body(model::RestorationNet& net, const std::vector<NamedPacked>& body);

// CSV cell quoting per RFC 4180.
std::string csv_cell(const std::string& s);

}  // namespace qssm::io
