#pragma once

// Raster persistence.
//
// Float format: one UTF-8 header line (at most 256 bytes including the
// terminating '\n') of space-separated key=value pairs
//
//   width=<int> height=<int> channels=<1|3> pitch_um=<double> dtype=f32le
//
// followed by width*height*channels little-endian IEEE-754 binary32 samples
// in row-major, channel-interleaved order. Round trips are bit-exact.
//
// PNG: 8-bit gray or RGB. Samples are quantized as floor(v*255 + 0.5) after
// clamping to [0,1]; reading yields byte/255.

#include <png.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/raster.hpp"

namespace stiffmap {

inline constexpr std::size_t kMaxHeaderBytes = 256;

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string raster_header(const Raster& r) {
  return "width=" + std::to_string(r.width) + " height=" + std::to_string(r.height) +
         " channels=" + std::to_string(r.channels) + " pitch_um=" + format_double(r.pitch_um) +
         " dtype=f32le\n";
}

inline void write_raster(const std::filesystem::path& path, const Raster& r) {
  require(r.data.size() == r.pixel_count() * r.channels, Errc::invalid_argument,
          "raster payload does not match its dimensions");
  const std::string header = raster_header(r);
  require(header.size() <= kMaxHeaderBytes, Errc::invalid_argument, "raster header too long");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot open " + path.string() + " for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<std::uint32_t> words(r.data.size());
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    std::uint32_t w = std::bit_cast<std::uint32_t>(r.data[i]);
    if constexpr (std::endian::native == std::endian::big) w = __builtin_bswap32(w);
    words[i] = w;
  }
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  require(static_cast<bool>(out), Errc::io, "write failed for " + path.string());
}

namespace detail {

inline std::map<std::string, std::string> parse_header(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream ss(line);
  std::string token;
  while (ss >> token) {
    const auto eq = token.find('=');
    require(eq != std::string::npos && eq > 0, Errc::malformed, "bad header token '" + token + "'");
    const auto key = token.substr(0, eq);
    require(!kv.contains(key), Errc::malformed, "duplicate header key '" + key + "'");
    kv[key] = token.substr(eq + 1);
  }
  return kv;
}

template <typename T>
T parse_number(const std::string& s, const char* key) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc{} && res.ptr == s.data() + s.size(), Errc::malformed,
          std::string("bad value for header key ") + key);
  return v;
}

}  // namespace detail

// Reads the float format without modifying samples (non-finite rejected).
inline Raster read_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  std::string line;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '\n') break;
    line.push_back(ch);
    require(line.size() < kMaxHeaderBytes, Errc::malformed, "raster header exceeds 256 bytes");
  }
  require(ch == '\n', Errc::malformed, "raster header not terminated");
  const auto kv = detail::parse_header(line);
  for (const char* key : {"width", "height", "channels", "pitch_um", "dtype"})
    require(kv.contains(key), Errc::malformed, std::string("header missing ") + key);
  require(kv.size() == 5, Errc::malformed, "unexpected header keys");
  require(kv.at("dtype") == "f32le", Errc::malformed, "unsupported dtype " + kv.at("dtype"));
  const int w = detail::parse_number<int>(kv.at("width"), "width");
  const int h = detail::parse_number<int>(kv.at("height"), "height");
  const int c = detail::parse_number<int>(kv.at("channels"), "channels");
  const double pitch = detail::parse_number<double>(kv.at("pitch_um"), "pitch_um");
  require(w > 0 && h > 0 && (c == 1 || c == 3) && pitch > 0.0, Errc::malformed,
          "invalid raster dimensions in header");

  Raster r(w, h, c, pitch);
  std::vector<std::uint32_t> words(r.data.size());
  const auto bytes = static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t));
  in.read(reinterpret_cast<char*>(words.data()), bytes);
  require(in.gcount() == bytes, Errc::malformed, "truncated raster payload in " + path.string());
  in.peek();
  require(in.eof(), Errc::malformed, "trailing bytes after raster payload (dimension mismatch)");
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint32_t w32 = words[i];
    if constexpr (std::endian::native == std::endian::big) w32 = __builtin_bswap32(w32);
    const float v = std::bit_cast<float>(w32);
    require(std::isfinite(v), Errc::non_finite, "non-finite sample in " + path.string());
    r.data[i] = v;
  }
  return r;
}

// Image ingest: float format, samples clamped to [0,1].
inline Raster read_image(const std::filesystem::path& path) {
  Raster r = read_raster(path);
  for (auto& v : r.data) v = std::clamp(v, 0.0f, 1.0f);
  return r;
}

// ---------------------------------------------------------------------------
// PNG

inline std::uint8_t quantize_u8(float v) {
  const double q = std::floor(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(q);
}

inline void write_png(const std::filesystem::path& path, const Raster& r) {
  require(r.channels == 1 || r.channels == 3, Errc::invalid_argument, "png needs 1 or 3 channels");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  require(fp != nullptr, Errc::io, "cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, Errc::io, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(Errc::io, "libpng write error for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, r.width, r.height, 8,
               r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(r.width) * r.channels);
  for (int y = 0; y < r.height; ++y) {
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = quantize_u8(r.data[r.index(0, y) + i]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Raster read_png(const std::filesystem::path& path, double pitch_um = 1.0) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  require(fp != nullptr, Errc::io, "cannot open " + path.string());
  png_byte sig[8];
  require(std::fread(sig, 1, 8, fp.get()) == 8 && png_sig_cmp(sig, 0, 8) == 0, Errc::malformed,
          path.string() + " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, Errc::io, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(Errc::malformed, "libpng read error for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth == 16) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(Errc::malformed, "16-bit PNG is not supported");
  }
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = png_get_channels(png, info);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * c);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = bytes.data() + static_cast<std::size_t>(y) * w * c;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  require(c == 1 || c == 3, Errc::malformed, "unsupported PNG channel layout");
  std::vector<float> samples(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) samples[i] = bytes[i] / 255.0f;
  return Raster::ingest(w, h, c, pitch_um, samples);
}

// ---------------------------------------------------------------------------
// Label maps are stored as 1-channel float rasters holding 0, 1, 2.

inline Raster label_raster(const LabelMap& labels, double pitch_um) {
  Raster r(labels.width, labels.height, 1, pitch_um);
  for (std::size_t i = 0; i < labels.size(); ++i) r.data[i] = labels.values[i];
  return r;
}

inline LabelMap labels_from_raster(const Raster& r) {
  require_channels(r, 1, "label map");
  LabelMap m(r.width, r.height);
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const float v = r.data[i];
    require(v == 0.0f || v == 1.0f || v == 2.0f, Errc::malformed, "label raster holds non-label value");
    m.values[i] = static_cast<std::uint8_t>(v);
  }
  return m;
}

inline void write_labels(const std::filesystem::path& path, const LabelMap& labels, double pitch_um) {
  write_raster(path, label_raster(labels, pitch_um));
}

inline LabelMap read_labels(const std::filesystem::path& path) {
  return labels_from_raster(read_raster(path));
}

}  // namespace stiffmap
