#include "qssm/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "qssm/bytes.hpp"
#include "qssm/error.hpp"
#include "qssm/image.hpp"

namespace qssm::io {

namespace {

struct MemoryReader {
  std::span<const std::uint8_t> data;
  std::size_t pos = 0;
};

void read_from_memory(png_structp png, png_bytep out, png_size_t n) {
  auto* r = static_cast<MemoryReader*>(png_get_io_ptr(png));
  if (r->pos + n > r->data.size()) png_error(png, "truncated PNG");
  std::memcpy(out, r->data.data() + r->pos, n);
  r->pos += n;
}

void write_to_vector(png_structp png, png_bytep in, png_size_t n) {
  auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  v->insert(v->end(), in, in + n);
}

void flush_noop(png_structp) {}

struct Decoded {
  png_uint_32 w = 0, h = 0;
  int depth = 0, color = 0;
  std::vector<std::uint8_t> pixels;  // rows, big-endian samples for 16-bit
  char error[200] = {};
};

void capture_error(png_structp png, png_const_charp msg) {
  auto* d = static_cast<Decoded*>(png_get_error_ptr(png));
  std::snprintf(d->error, sizeof d->error, "%s", msg);
  png_longjmp(png, 1);
}

void ignore_warning(png_structp, png_const_charp) {}

// Plain C control flow only: libpng reports errors by longjmp.
bool decode(std::span<const std::uint8_t> file, Decoded& d) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &d, capture_error, ignore_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  MemoryReader reader{file, 0};
  std::vector<png_bytep>* rows = nullptr;
  if (!info || setjmp(png_jmpbuf(png))) {
    delete rows;
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, &reader, read_from_memory);
  png_read_info(png, info);
  d.w = png_get_image_width(png, info);
  d.h = png_get_image_height(png, info);
  d.depth = png_get_bit_depth(png, info);
  d.color = png_get_color_type(png, info);
  const bool supported = (d.color == PNG_COLOR_TYPE_GRAY || d.color == PNG_COLOR_TYPE_RGB) &&
                         (d.depth == 8 || d.depth == 16);
  if (!supported) {
    std::snprintf(d.error, sizeof d.error, "unsupported PNG color type %d / bit depth %d (need 8/16-bit gray or RGB)",
                  d.color, d.depth);
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  d.pixels.assign(stride * d.h, 0);
  rows = new std::vector<png_bytep>(d.h);
  for (png_uint_32 y = 0; y < d.h; ++y) (*rows)[y] = d.pixels.data() + y * stride;
  png_read_image(png, rows->data());
  png_read_end(png, nullptr);
  delete rows;
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

bool encode(const std::vector<std::uint8_t>& pixels, png_uint_32 w, png_uint_32 h, int color, int channels,
            std::vector<std::uint8_t>& out, Decoded& err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, capture_error, ignore_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, &out, write_to_vector, flush_noop);
  png_set_IHDR(png, info, w, h, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * w * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

bool is_png(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_png(e.path())) continue;
    out[e.path().stem().string()] = e.path();
  }
  return out;
}

constexpr char kCheckpointMagic[4] = {'Q', 'I', 'R', 'C'};
constexpr std::uint16_t kCheckpointVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

void put_name(bytes::Writer& w, const std::string& name) {
  if (name.size() > 0xFFFF) throw ShapeError("name too long for container");
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.put_string(name);
}

std::string get_name(bytes::Reader& r) { return r.get_string(r.get<std::uint16_t>()); }

}  // namespace

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Tensor load_png(const fs::path& path) {
  const auto file = read_file(path);
  Decoded d;
  if (!decode(file, d)) throw DataError("'" + path.string() + "': " + (d.error[0] ? d.error : "PNG decode failed"));
  const std::size_t h = d.h, w = d.w, ch = d.color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const double scale = d.depth == 16 ? 65535.0 : 255.0;
  Tensor out = Tensor::zeros({3, h, w});
  auto o = out.mutable_data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t idx = (y * w + x) * ch + (ch == 3 ? c : 0);
        const double v = d.depth == 16 ? (d.pixels[2 * idx] << 8 | d.pixels[2 * idx + 1]) : d.pixels[idx];
        o[(c * h + y) * w + x] = v / scale;
      }
  return out;
}

void save_png(const Tensor& img, const fs::path& path) {
  const auto& s = img.shape();
  if (s.size() != 3 || (s[0] != 3 && s[0] != 1)) throw ShapeError("save_png expects [3 x H x W] or [1 x H x W]");
  image::check_unit_range(img, "save_png input");
  const std::size_t c_n = s[0], h = s[1], w = s[2];
  std::vector<std::uint8_t> px(c_n * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < c_n; ++c)
        px[(y * w + x) * c_n + c] = static_cast<std::uint8_t>(std::round(img.at((c * h + y) * w + x) * 255.0));
  std::vector<std::uint8_t> out;
  Decoded err;
  if (!encode(px, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
              c_n == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, static_cast<int>(c_n), out, err))
    throw DataError("PNG encode failed for '" + path.string() + "': " + err.error);
  write_file(path, out);
}

DatasetLayout DatasetLayout::scan(const fs::path& hr_dir, const std::optional<fs::path>& lr_dir) {
  if (!fs::is_directory(hr_dir)) throw DataError("dataset HR directory '" + hr_dir.string() + "' not found");
  DatasetLayout layout{hr_dir, lr_dir, {}};
  const auto hr = list_pngs(hr_dir);
  if (hr.empty()) throw DataError("dataset HR directory '" + hr_dir.string() + "' has no PNG files");
  for (const auto& [stem, p] : hr) layout.stems.push_back(stem);
  if (lr_dir) {
    if (!fs::is_directory(*lr_dir)) throw DataError("dataset LR directory '" + lr_dir->string() + "' not found");
    const auto lr = list_pngs(*lr_dir);
    for (const auto& [stem, p] : lr) {
      if (!hr.count(stem)) throw DataError("dataset LR file '" + p.filename().string() + "' has no HR counterpart");
    }
    for (const auto& [stem, p] : hr) {
      if (!lr.count(stem)) throw DataError("dataset HR file '" + p.filename().string() + "' has no LR counterpart");
    }
  }
  return layout;
}

std::vector<train::Sample> DatasetLayout::load() const {
  std::vector<train::Sample> out;
  const auto hr = list_pngs(hr_dir);
  const auto lr = lr_dir ? list_pngs(*lr_dir) : std::map<std::string, fs::path>{};
  for (const auto& stem : stems) {
    train::Sample s{stem, load_png(hr.at(stem)), std::nullopt};
    if (lr_dir) s.lr = load_png(lr.at(stem));
    out.push_back(std::move(s));
  }
  return out;
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

std::map<std::string, std::string> read_kv_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_kv(ss.str());
}

std::vector<NamedPacked> pack_body(const model::RestorationNet& net) {
  if (!net.config().quantized()) throw ConfigError("model is full precision; quantize it before exporting");
  std::vector<NamedPacked> out;
  for (const auto* w : net.body_weights()) {
    const Tensor values = w->effective_values();
    std::vector<double> levels;
    int bits = 0;
    if (w->method == quant::Method::kQssm) {
      levels = w->rfa.levels;
      bits = w->rfa.bits;
    } else if (w->method == quant::Method::kStatic) {
      bits = w->uniform.bits;
      for (double k = quant::grid_min(bits); k <= quant::grid_max(bits); k += 1.0)
        levels.push_back(k / w->uniform.alpha + w->uniform.beta);
    } else {
      throw ConfigError("weight '" + w->name + "' is not quantized");
    }
    if (w->deployed) {
      // Already-deployed weights carry their own grid: recover it from the values.
      std::set<double> distinct(values.data().begin(), values.data().end());
      for (double v : distinct) {
        if (!std::binary_search(levels.begin(), levels.end(), v))
          throw DataError("deployed weight '" + w->name + "' is off its level grid");
      }
    }
    out.push_back({w->name, quant::pack_weights(values, levels, bits)});
  }
  return out;
}

std::vector<std::uint8_t> encode_packed_body(const std::vector<NamedPacked>& body) {
  bytes::Writer w;
  for (const auto& e : body) {
    put_name(w, e.name);
    w.put_bytes(quant::serialize(e.packed));
  }
  return std::move(w.buffer());
}

std::vector<NamedPacked> decode_packed_body(std::span<const std::uint8_t> data) {
  std::vector<NamedPacked> out;
  bytes::Reader r(data);
  while (!r.done()) {
    NamedPacked e;
    e.name = get_name(r);
    std::size_t used = 0;
    e.packed = quant::deserialize(data.subspan(r.position()), &used);
    r.get_bytes(used);
    out.push_back(std::move(e));
  }
  return out;
}

void import_packed_body(model::RestorationNet& net, const std::vector<NamedPacked>& body) {
  std::map<std::string, const quant::PackedWeights*> by_name;
  for (const auto& e : body) by_name[e.name] = &e.packed;
  for (auto* w : net.body_weights()) {
    auto it = by_name.find(w->name);
    if (it == by_name.end()) throw DataError("packed body lacks weight '" + w->name + "'");
    Tensor v = quant::unpack_weights(*it->second);
    if (v.shape() != w->latent.shape()) throw DataError("packed weight '" + w->name + "' has the wrong shape");
    w->deployed = std::move(v);
  }
  if (by_name.size() != net.body_weights().size()) throw DataError("packed body has unexpected extra weights");
}

std::vector<std::uint8_t> encode_checkpoint(const model::RestorationNet& net) {
  bytes::Writer w;
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4));
  w.put<std::uint16_t>(kCheckpointVersion);
  const std::string cfg = net.config().to_text();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.put_string(cfg);
  const auto state = net.state();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) {
    put_name(w, name);
    w.put<std::uint8_t>(kDtypeF64);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape().size()));
    for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.put<double>(v);
  }
  const auto& ws = net.body_weights();
  const bool any_deployed = std::any_of(ws.begin(), ws.end(), [](const auto* q) { return q->deployed.has_value(); });
  const std::vector<NamedPacked> deployed = any_deployed ? pack_body(net) : std::vector<NamedPacked>{};
  w.put<std::uint32_t>(static_cast<std::uint32_t>(deployed.size()));
  for (const auto& e : deployed) {
    put_name(w, e.name);
    const auto rec = quant::serialize(e.packed);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.size()));
    w.put_bytes(rec);
  }
  return std::move(w.buffer());
}

std::unique_ptr<model::RestorationNet> decode_checkpoint(std::span<const std::uint8_t> data) {
  bytes::Reader r(data);
  if (data.size() < 4 || std::memcmp(data.data(), kCheckpointMagic, 4) != 0)
    throw DataError("not a QIRC checkpoint");
  r.get_bytes(4);
  if (const auto v = r.get<std::uint16_t>(); v != kCheckpointVersion)
    throw DataError("unsupported QIRC version " + std::to_string(v));
  const auto cfg = model::ModelConfig::from_map(parse_kv(r.get_string(r.get<std::uint32_t>())));
  std::map<std::string, Tensor> state;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_name(r);
    if (r.get<std::uint8_t>() != kDtypeF64) throw DataError("tensor '" + name + "' has an unknown dtype");
    Shape shape(r.get<std::uint8_t>());
    std::size_t n = 1;
    for (auto& d : shape) n *= d = r.get<std::uint32_t>();
    std::vector<double> values(n);
    for (double& v : values) v = r.get<double>();
    state[name] = Tensor::from(shape, std::move(values));
  }
  model::ModelConfig fp = cfg;
  fp.w_bits = fp.a_bits = 32;
  fp.method = quant::Method::kNone;
  auto net = std::make_unique<model::RestorationNet>(fp, 0);
  if (cfg.quantized()) net->set_quant_layout(cfg.method, cfg.w_bits, cfg.a_bits);
  net->load_state(state);
  const auto packed = r.get<std::uint32_t>();
  std::vector<NamedPacked> body;
  for (std::uint32_t i = 0; i < packed; ++i) {
    NamedPacked e;
    e.name = get_name(r);
    e.packed = quant::deserialize(r.get_bytes(r.get<std::uint32_t>()));
    body.push_back(std::move(e));
  }
  if (!body.empty()) import_packed_body(*net, body);
  if (!r.done()) throw DataError("trailing bytes after QIRC checkpoint");
  return net;
}

void save_checkpoint(const model::RestorationNet& net, const fs::path& path) { write_file(path, encode_checkpoint(net)); }

std::unique_ptr<model::RestorationNet> load_checkpoint(const fs::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const DataError& e) {
    throw DataError("checkpoint '" + path.string() + "': " + e.what());
  }
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace qssm::io
