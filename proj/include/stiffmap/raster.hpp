#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/parallel.hpp"

namespace stiffmap {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
  friend Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
  friend Point operator*(double s, Point p) { return {s * p.x, s * p.y}; }
  friend bool operator==(Point, Point) = default;
};

inline double norm(Point p) { return std::hypot(p.x, p.y); }

// Rotation by `deg` in image coordinates (x right, y down).
inline Point rotate_point(Point p, double deg) {
  const double a = deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  return {c * p.x - s * p.y, s * p.x + c * p.y};
}

inline Point rotate_about(Point p, double deg, Point center) {
  return rotate_point(p - center, deg) + center;
}

// Multi-channel image. Pixel (x, y) has its center at integer coordinates;
// samples are row-major with channels interleaved.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  double pitch_um = 1.0;
  std::vector<float> data;

  Raster() = default;
  Raster(int w, int h, int c, double pitch, float fill = 0.0f)
      : width(w), height(h), channels(c), pitch_um(pitch) {
    require(w > 0 && h > 0, Errc::invalid_argument, "raster dimensions must be positive");
    require(c == 1 || c == 3, Errc::invalid_argument, "raster channels must be 1 or 3");
    require(pitch > 0.0 && std::isfinite(pitch), Errc::invalid_argument,
            "pixel pitch must be positive");
    data.assign(static_cast<std::size_t>(w) * h * c, fill);
  }

  // Builds a raster from external samples: non-finite values are rejected,
  // the rest clamped to [0, 1].
  static Raster ingest(int w, int h, int c, double pitch, std::span<const float> samples) {
    Raster r(w, h, c, pitch);
    require(samples.size() == r.data.size(), Errc::invalid_argument,
            "sample count does not match dimensions");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      require(std::isfinite(samples[i]), Errc::non_finite, "raster sample is not finite");
      r.data[i] = std::clamp(samples[i], 0.0f, 1.0f);
    }
    return r;
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool empty() const { return data.empty(); }

  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  float at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }

  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  bool same_shape(const Raster& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

inline void require_channels(const Raster& r, int channels, const char* what) {
  require(r.channels == channels, Errc::invalid_argument,
          std::string(what) + ": expected " + std::to_string(channels) + "-channel raster, got " +
              std::to_string(r.channels));
}

// Row-major 2-D array of small values.
template <typename T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int w, int h, T fill = T{}) : width(w), height(h) {
    require(w >= 0 && h >= 0, Errc::invalid_argument, "grid dimensions must be non-negative");
    values.assign(static_cast<std::size_t>(w) * h, fill);
  }

  std::size_t size() const { return values.size(); }
  T& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

struct BitMask : Grid<std::uint8_t> {
  using Grid::Grid;

  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(),
                                                  [](std::uint8_t b) { return b != 0; }));
  }
};

enum class Structure : std::uint8_t { lumen = 0, cell = 1, stroma = 2 };
inline constexpr int kStructureClasses = 3;

inline const char* structure_name(int label) {
  switch (label) {
    case 0: return "lumen";
    case 1: return "cell";
    case 2: return "stroma";
  }
  return "?";
}

struct LabelMap : Grid<std::uint8_t> {
  using Grid::Grid;

  void validate() const {
    for (auto v : values) {
      require(v < kStructureClasses, Errc::malformed, "label outside {0,1,2}");
    }
  }
};

// ---------------------------------------------------------------------------
// Basic raster operations.

inline Raster extract_channel(const Raster& r, int c) {
  Raster out(r.width, r.height, 1, r.pitch_um);
  for (std::size_t i = 0; i < r.pixel_count(); ++i) out.data[i] = r.data[i * r.channels + c];
  return out;
}

// Channel mean.
inline Raster to_gray(const Raster& r) {
  if (r.channels == 1) return r;
  Raster out(r.width, r.height, 1, r.pitch_um);
  for (std::size_t i = 0; i < r.pixel_count(); ++i) {
    double s = 0.0;
    for (int c = 0; c < r.channels; ++c) s += r.data[i * r.channels + c];
    out.data[i] = static_cast<float>(s / r.channels);
  }
  return out;
}

inline Raster crop(const Raster& r, int x0, int y0, int w, int h) {
  require(x0 >= 0 && y0 >= 0 && x0 + w <= r.width && y0 + h <= r.height && w > 0 && h > 0,
          Errc::invalid_argument, "crop window outside raster");
  Raster out(w, h, r.channels, r.pitch_um);
  for (int y = 0; y < h; ++y) {
    const float* src = &r.data[r.index(x0, y0 + y)];
    std::copy(src, src + static_cast<std::size_t>(w) * r.channels, &out.data[out.index(0, y)]);
  }
  return out;
}

template <typename T>
Grid<T> crop(const Grid<T>& g, int x0, int y0, int w, int h) {
  require(x0 >= 0 && y0 >= 0 && x0 + w <= g.width && y0 + h <= g.height,
          Errc::invalid_argument, "crop window outside grid");
  Grid<T> out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = g.at(x0 + x, y0 + y);
  return out;
}

// Bilinear sample with `fill` outside the raster.
inline float sample_bilinear(const Raster& r, double x, double y, int c, float fill) {
  if (!(x > -1.0 && y > -1.0 && x < r.width && y < r.height)) return fill;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto px = [&](int xi, int yi) -> double {
    return r.contains(xi, yi) ? r.at(xi, yi, c) : fill;
  };
  const double top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
  const double bot = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

// out(q) = src(map(q)), bilinear.
template <typename MapFn>
Raster warp(const Raster& src, int out_w, int out_h, MapFn&& map, float fill) {
  Raster out(out_w, out_h, src.channels, src.pitch_um);
  parallel_for(0, out_h, [&](std::ptrdiff_t y) {
    for (int x = 0; x < out_w; ++x) {
      const Point p = map(Point{static_cast<double>(x), static_cast<double>(y)});
      for (int c = 0; c < src.channels; ++c)
        out.at(x, static_cast<int>(y), c) = sample_bilinear(src, p.x, p.y, c, fill);
    }
  });
  return out;
}

// Rotates content by `deg` about `center`: a feature at p moves to
// rotate_about(p, deg, center).
inline Raster rotate(const Raster& src, double deg, Point center, float fill = 0.0f) {
  return warp(src, src.width, src.height,
              [&](Point q) { return rotate_about(q, -deg, center); }, fill);
}

inline Point image_center(int w, int h) { return {(w - 1) / 2.0, (h - 1) / 2.0}; }

// Area-weighted downscale by a real factor >= 1. Output pixel i covers the
// input interval [i*f, (i+1)*f); its center maps to input (i+0.5)f - 0.5.
inline Raster downscale(const Raster& src, double factor) {
  require(factor >= 1.0 && std::isfinite(factor), Errc::invalid_argument,
          "downscale factor must be >= 1");
  const double snapped = std::round(factor);
  if (std::abs(factor - snapped) < 1e-9) factor = snapped;
  const int out_w = std::max(1, static_cast<int>(std::floor(src.width / factor + 1e-9)));
  const int out_h = std::max(1, static_cast<int>(std::floor(src.height / factor + 1e-9)));

  struct Tap {
    int index;
    double weight;
  };
  auto taps_for = [&](int n_out, int n_in) {
    std::vector<std::vector<Tap>> taps(n_out);
    for (int i = 0; i < n_out; ++i) {
      const double lo = i * factor, hi = std::min<double>((i + 1) * factor, n_in);
      for (int j = static_cast<int>(std::floor(lo)); j < hi && j < n_in; ++j) {
        const double overlap = std::min<double>(j + 1, hi) - std::max<double>(j, lo);
        if (overlap > 1e-12) taps[i].push_back({j, overlap});
      }
      double total = 0.0;
      for (auto& t : taps[i]) total += t.weight;
      for (auto& t : taps[i]) t.weight /= total;
    }
    return taps;
  };
  const auto tx = taps_for(out_w, src.width);
  const auto ty = taps_for(out_h, src.height);

  // Horizontal pass then vertical pass.
  std::vector<double> tmp(static_cast<std::size_t>(out_w) * src.height * src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double s = 0.0;
        for (const auto& t : tx[x]) s += t.weight * src.at(t.index, y, c);
        tmp[(static_cast<std::size_t>(y) * out_w + x) * src.channels + c] = s;
      }
  Raster out(out_w, out_h, src.channels, src.pitch_um * factor);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double s = 0.0;
        for (const auto& t : ty[y])
          s += t.weight * tmp[(static_cast<std::size_t>(t.index) * out_w + x) * src.channels + c];
        out.at(x, y, c) = static_cast<float>(s);
      }
  return out;
}

// Separable filter with clamp-to-edge borders.
inline Raster convolve_separable(const Raster& src, std::span<const double> kernel) {
  const int r = static_cast<int>(kernel.size() / 2);
  Raster tmp = src, out = src;
  parallel_for(0, src.height, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double s = 0.0;
        for (int k = -r; k <= r; ++k)
          s += kernel[k + r] * src.at(std::clamp(x + k, 0, src.width - 1), y, c);
        tmp.at(x, y, c) = static_cast<float>(s);
      }
  });
  parallel_for(0, src.height, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double s = 0.0;
        for (int k = -r; k <= r; ++k)
          s += kernel[k + r] * tmp.at(x, std::clamp(y + k, 0, src.height - 1), c);
        out.at(x, y, c) = static_cast<float>(s);
      }
  });
  return out;
}

inline Raster gaussian_blur(const Raster& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double total = 0.0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  return convolve_separable(src, k);
}

inline Raster box_blur(const Raster& src, int radius) {
  std::vector<double> k(2 * radius + 1, 1.0 / (2 * radius + 1));
  return convolve_separable(src, k);
}

// ---------------------------------------------------------------------------
// Masks.

enum class ThresholdMode { below, above };

// Bit set iff sample < t (below) or sample >= t (above).
inline BitMask threshold_mask(const Raster& img, double t, ThresholdMode mode) {
  require_channels(img, 1, "threshold_mask");
  require(t >= 0.0 && t <= 1.0, Errc::invalid_argument, "threshold must lie in [0,1]");
  BitMask m(img.width, img.height);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const bool below = img.data[i] < t;
    m.values[i] = (mode == ThresholdMode::below) == below ? 1 : 0;
  }
  return m;
}

// Otsu threshold over a 256-bin histogram of [0,1] samples; returns the
// upper edge of the last bin assigned to the dark class.
inline double otsu_threshold(const Raster& img) {
  require_channels(img, 1, "otsu_threshold");
  std::array<double, 256> hist{};
  for (float v : img.data) hist[std::clamp(static_cast<int>(v * 256.0f), 0, 255)] += 1.0;
  const double total = static_cast<double>(img.data.size());
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 127;
  for (int i = 0; i < 256; ++i) {
    w0 += hist[i];
    if (w0 == 0.0) continue;
    const double w1 = total - w0;
    if (w1 == 0.0) break;
    sum0 += i * hist[i];
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = i;
    }
  }
  return (best_bin + 1) / 256.0;
}

inline Raster mask_to_raster(const BitMask& m, double pitch_um) {
  Raster r(m.width, m.height, 1, pitch_um);
  for (std::size_t i = 0; i < m.values.size(); ++i) r.data[i] = m.values[i] ? 1.0f : 0.0f;
  return r;
}

inline Point centroid(const BitMask& m) {
  double sx = 0.0, sy = 0.0, n = 0.0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y)) {
        sx += x;
        sy += y;
        n += 1.0;
      }
  require(n > 0.0, Errc::degenerate, "empty mask has no centroid");
  return {sx / n, sy / n};
}

inline BitMask dilate(const BitMask& m, int radius) {
  BitMask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
          if (out.contains(x + dx, y + dy)) out.at(x + dx, y + dy) = 1;
    }
  return out;
}

}  // namespace stiffmap
