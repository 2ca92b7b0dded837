#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "stiffmap/raster.hpp"

namespace stiffmap {

using Color3 = std::array<double, 3>;

// Hue is returned as a fraction of a full turn; achromatic pixels get hue 0.
inline Color3 rgb_to_hsv(const Color3& rgb) {
  const double r = rgb[0], g = rgb[1], b = rgb[2];
  const double maxc = std::max({r, g, b});
  const double minc = std::min({r, g, b});
  const double delta = maxc - minc;
  const double v = maxc;
  if (delta <= 0.0) return {0.0, 0.0, v};
  const double s = maxc > 0.0 ? delta / maxc : 0.0;
  double h;
  if (maxc == r) {
    h = (g - b) / delta;
    if (h < 0.0) h += 6.0;
  } else if (maxc == g) {
    h = (b - r) / delta + 2.0;
  } else {
    h = (r - g) / delta + 4.0;
  }
  h /= 6.0;
  if (h >= 1.0) h -= 1.0;
  return {h, s, v};
}

inline Color3 hsv_to_rgb(const Color3& hsv) {
  const double s = hsv[1], v = hsv[2];
  if (s <= 0.0) return {v, v, v};
  double h = hsv[0] * 6.0;
  if (h >= 6.0) h -= 6.0;
  const int sector = static_cast<int>(std::floor(h));
  const double f = h - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline Color3 pixel(const Raster& r, std::size_t i) {
  return {r.data[i * 3], r.data[i * 3 + 1], r.data[i * 3 + 2]};
}

inline Raster rgb_to_hsv(const Raster& rgb) {
  require_channels(rgb, 3, "rgb_to_hsv");
  Raster out(rgb.width, rgb.height, 3, rgb.pitch_um);
  parallel_for(0, static_cast<std::ptrdiff_t>(rgb.pixel_count()), [&](std::ptrdiff_t i) {
    const auto hsv = rgb_to_hsv(pixel(rgb, static_cast<std::size_t>(i)));
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = static_cast<float>(hsv[c]);
  });
  return out;
}

inline Raster hsv_to_rgb(const Raster& hsv) {
  require_channels(hsv, 3, "hsv_to_rgb");
  Raster out(hsv.width, hsv.height, 3, hsv.pitch_um);
  parallel_for(0, static_cast<std::ptrdiff_t>(hsv.pixel_count()), [&](std::ptrdiff_t i) {
    const auto rgb = hsv_to_rgb(pixel(hsv, static_cast<std::size_t>(i)));
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = static_cast<float>(rgb[c]);
  });
  return out;
}

}  // namespace stiffmap
