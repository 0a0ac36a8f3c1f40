#include <gtest/gtest.h>
#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "qssm/error.hpp"
#include "qssm/io.hpp"
#include "qssm/ops.hpp"
#include "test_support.hpp"

using namespace qssm;
namespace fs = std::filesystem;
using qssm::testing::random_tensor;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qssm_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Raw libpng writer for formats save_png never produces.
void write_raw_png(const fs::path& path, int w, int h, int depth, int color, const std::vector<std::uint8_t>& rows) {
  FILE* f = std::fopen(path.c_str(), "wb");
  ASSERT_NE(f, nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, f);
  png_set_IHDR(png, info, w, h, depth, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = rows.size() / h;
  for (int y = 0; y < h; ++y) png_write_row(png, const_cast<png_bytep>(rows.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

Tensor random_8bit(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({3, h, w});
  for (double& v : t.mutable_data()) v = static_cast<double>(rng.index(256)) / 255.0;
  return t;
}

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({3, h, w}, rng, 0.0, 1.0);
}

model::ModelConfig small_config() {
  auto cfg = model::ModelConfig::defaults_for(model::Task::kLightSr);
  cfg.blocks = 1;
  cfg.channels = 8;
  return cfg;
}

}  // namespace

TEST(Png, EightBitRoundTripIsExact) {
  const auto dir = temp_dir("png");
  const Tensor img = random_8bit(7, 9, 1);
  io::save_png(img, dir / "a.png");
  const Tensor back = io::load_png(dir / "a.png");
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_EQ(ops::max_abs_diff(back, img), 0.0);
}

TEST(Png, WhitePixelAndGrayReplication) {
  const auto dir = temp_dir("white");
  io::save_png(Tensor::full({3, 1, 1}, 1.0), dir / "w.png");
  const Tensor white = io::load_png(dir / "w.png");
  for (double v : white.data()) EXPECT_EQ(v, 1.0);
  write_raw_png(dir / "g.png", 2, 1, 8, PNG_COLOR_TYPE_GRAY, {0, 51});
  const Tensor g = io::load_png(dir / "g.png");
  EXPECT_EQ(g.shape(), (Shape{3, 1, 2}));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(g.at(c * 2 + 1), 0.2);
}

TEST(Png, SixteenBitStripIsMonotone) {
  const auto dir = temp_dir("sixteen");
  std::vector<std::uint8_t> row;
  for (int x = 0; x < 64; ++x) {
    const int v = x * 1000 + 7;
    row.push_back(static_cast<std::uint8_t>(v >> 8));
    row.push_back(static_cast<std::uint8_t>(v & 0xFF));
  }
  write_raw_png(dir / "s.png", 64, 1, 16, PNG_COLOR_TYPE_GRAY, row);
  const Tensor s = io::load_png(dir / "s.png");
  for (std::size_t x = 1; x < 64; ++x) EXPECT_GT(s.at(x), s.at(x - 1));
  EXPECT_DOUBLE_EQ(s.at(1), 1007.0 / 65535.0);
}

TEST(Png, UnsupportedAndCorruptFilesFail) {
  const auto dir = temp_dir("bad");
  write_raw_png(dir / "rgba.png", 1, 1, 8, PNG_COLOR_TYPE_RGBA, {1, 2, 3, 4});
  EXPECT_THROW(io::load_png(dir / "rgba.png"), DataError);
  io::write_text(dir / "junk.png", "not a png at all");
  EXPECT_THROW(io::load_png(dir / "junk.png"), DataError);
  EXPECT_THROW(io::load_png(dir / "missing.png"), DataError);
  EXPECT_THROW(io::save_png(Tensor::full({3, 1, 1}, 1.5), dir / "x.png"), DataError);
}

TEST(Dataset, SortedStemsAndOrphans) {
  const auto dir = temp_dir("dataset");
  for (const char* n : {"b", "a", "c"}) io::save_png(random_8bit(4, 4, 2), dir / "hr" / (std::string(n) + ".png"));
  io::write_text(dir / "hr" / "notes.txt", "ignored");
  const auto layout = io::DatasetLayout::scan(dir / "hr");
  EXPECT_EQ(layout.stems, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(layout.load().size(), 3u);
  io::save_png(random_8bit(2, 2, 3), dir / "lr" / "a.png");
  EXPECT_THROW(io::DatasetLayout::scan(dir / "hr", dir / "lr"), DataError);  // b, c lack LR
  io::save_png(random_8bit(2, 2, 3), dir / "lr" / "b.png");
  io::save_png(random_8bit(2, 2, 3), dir / "lr" / "c.png");
  io::save_png(random_8bit(2, 2, 3), dir / "lr" / "z.png");
  EXPECT_THROW(io::DatasetLayout::scan(dir / "hr", dir / "lr"), DataError);  // z has no HR
  fs::remove(dir / "lr" / "z.png");
  const auto paired = io::DatasetLayout::scan(dir / "hr", dir / "lr").load();
  EXPECT_TRUE(paired[1].lr.has_value());
  EXPECT_THROW(io::DatasetLayout::scan(dir / "nope"), DataError);
}

TEST(Config, KeyValueParsing) {
  const auto kv = io::parse_kv("# comment\ntask = denoise  # trailing\n\n  blocks=3\nout = a b\n");
  EXPECT_EQ(kv.at("task"), "denoise");
  EXPECT_EQ(kv.at("blocks"), "3");
  EXPECT_EQ(kv.at("out"), "a b");
  EXPECT_THROW(io::parse_kv("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(io::parse_kv("novalue\n"), ConfigError);
  EXPECT_THROW(io::parse_kv(" = 3\n"), ConfigError);
}

TEST(Checkpoint, RoundTripsFullPrecisionAndQuantized) {
  const Tensor img = random_image(8, 8, 4);
  for (int bits : {32, 4}) {
    model::RestorationNet net(small_config(), 5);
    model::quantize_model(net, bits, bits, {img});
    const auto bytes = io::encode_checkpoint(net);
    EXPECT_EQ(io::encode_checkpoint(net), bytes);
    auto back = io::decode_checkpoint(bytes);
    EXPECT_EQ(back->config().to_text(), net.config().to_text());
    EXPECT_EQ(ops::max_abs_diff(back->forward(img), net.forward(img)), 0.0);
    EXPECT_EQ(io::encode_checkpoint(*back), bytes);
  }
}

TEST(Checkpoint, RejectsCorruptContainers) {
  model::RestorationNet net(small_config(), 6);
  auto bytes = io::encode_checkpoint(net);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(io::decode_checkpoint(bad), DataError);
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(io::decode_checkpoint(bytes), DataError);
}

TEST(PackedBody, SizeArithmeticAndBitExactImport) {
  const Tensor img = random_image(8, 8, 7);
  for (auto method : {quant::Method::kQssm, quant::Method::kStatic}) {
    model::RestorationNet net(small_config(), 8);
    model::quantize_model(net, 2, 2, {img}, method);
    const Tensor before = net.forward(img);
    const auto body = io::pack_body(net);
    const auto bytes = io::encode_packed_body(body);
    std::size_t expected = 0;
    for (const auto* w : net.body_weights()) {
      const std::size_t rank = w->latent.shape().size();
      expected += 2 + w->name.size();                        // name record
      expected += 4 + 2 + 1 + 1 + 4 * rank + 2 + 8 * 4;      // QSSM header, 4 levels
      expected += (2 * w->latent.numel() + 7) / 8;           // payload
    }
    EXPECT_EQ(bytes.size(), expected);

    auto fresh = model::clone(net);
    io::import_packed_body(*fresh, io::decode_packed_body(bytes));
    EXPECT_EQ(ops::max_abs_diff(fresh->forward(img), before), 0.0);
    // Deployed weights survive a checkpoint round trip.
    auto again = io::decode_checkpoint(io::encode_checkpoint(*fresh));
    EXPECT_TRUE(again->body_weights()[0]->deployed.has_value());
    EXPECT_EQ(ops::max_abs_diff(again->forward(img), before), 0.0);
  }
}

TEST(PackedBody, ErrorsNameTheProblem) {
  model::RestorationNet fp(small_config(), 9);
  EXPECT_THROW(io::pack_body(fp), ConfigError);
  auto bytes = std::vector<std::uint8_t>{3, 0, 'a', 'b', 'c', 'N', 'O', 'P', 'E', 0, 0};
  try {
    io::decode_packed_body(bytes);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("not a QSSM container"), std::string::npos);
  }
}

TEST(Csv, QuotesPerRfc4180) {
  EXPECT_EQ(io::csv_cell("plain"), "plain");
  EXPECT_EQ(io::csv_cell("a,b"), "\"a,b\"");
  EXPECT_EQ(io::csv_cell("say \"hi\""), "\"say \"\"hi\"\"\"");
}
