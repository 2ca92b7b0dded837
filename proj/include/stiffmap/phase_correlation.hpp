#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/fft.hpp"
#include "stiffmap/raster.hpp"

namespace stiffmap {

// Shift (dx, dy) such that b(x, y) ~ a(x - dx, y - dy).
struct PhaseShift {
  double dx = 0.0;
  double dy = 0.0;
  double confidence = 0.0;
};

namespace detail {

inline std::vector<double> hann(int n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  return w;
}

// Vertex offset of the parabola through (-1, l), (0, c), (1, r).
inline double parabolic_offset(double l, double c, double r) {
  const double denom = l - 2.0 * c + r;
  if (!(std::abs(denom) > 1e-12)) return 0.0;
  const double off = 0.5 * (l - r) / denom;
  return std::clamp(off, -0.5, 0.5);
}

}  // namespace detail

inline PhaseShift phase_correlate(const Raster& a, const Raster& b) {
  require_channels(a, 1, "phase_correlate");
  require_channels(b, 1, "phase_correlate");
  require(a.same_shape(b), Errc::invalid_argument, "phase_correlate: images differ in size");
  const int w = a.width, h = a.height;
  const std::size_t n = a.pixel_count();

  const auto wx = detail::hann(w), wy = detail::hann(h);
  auto prepare = [&](const Raster& r) {
    double mean = 0.0;
    for (float v : r.data) mean += v;
    mean /= static_cast<double>(n);
    double energy = 0.0;
    std::vector<double> out(n);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = r.at(x, y) - mean;
        energy += v * v;
        out[static_cast<std::size_t>(y) * w + x] = v * wx[x] * wy[y];
      }
    require(energy > 1e-12 * static_cast<double>(n), Errc::degenerate, "degenerate spectrum");
    return out;
  };

  RealFft2d fft(w, h);
  const auto fa = fft.forward(prepare(a));
  auto fb = fft.forward(prepare(b));
  double peak_mag = 0.0;
  for (std::size_t i = 0; i < fb.size(); ++i) {
    fb[i] *= std::conj(fa[i]);
    peak_mag = std::max(peak_mag, std::abs(fb[i]));
  }
  require(peak_mag > 0.0, Errc::degenerate, "degenerate spectrum");
  // Bins at round-off level carry no phase information and are dropped; the
  // peak is normalized by the retained fraction so a == b scores 1.
  const double floor = peak_mag * 1e-15;
  std::vector<Complex> kept(fb.size());
  for (std::size_t i = 0; i < fb.size(); ++i) {
    const double m = std::abs(fb[i]);
    fb[i] = m > floor ? fb[i] / m : Complex{};
    kept[i] = m > floor ? 1.0 : 0.0;
  }
  const auto corr = fft.inverse(fb);
  const double retained = fft.inverse(kept)[0];

  std::size_t best = 0;
  for (std::size_t i = 1; i < corr.size(); ++i)
    if (corr[i] > corr[best]) best = i;
  const int px = static_cast<int>(best % w), py = static_cast<int>(best / w);
  auto at = [&](int x, int y) {
    x = ((x % w) + w) % w;
    y = ((y % h) + h) % h;
    return corr[static_cast<std::size_t>(y) * w + x];
  };
  const double c0 = corr[best];
  const double ox = w > 2 ? detail::parabolic_offset(at(px - 1, py), c0, at(px + 1, py)) : 0.0;
  const double oy = h > 2 ? detail::parabolic_offset(at(px, py - 1), c0, at(px, py + 1)) : 0.0;

  PhaseShift s;
  s.dx = (px >= (w + 1) / 2 ? px - w : px) + ox;
  s.dy = (py >= (h + 1) / 2 ? py - h : py) + oy;
  s.confidence = std::clamp(c0 / retained, 0.0, 1.0);
  return s;
}

}  // namespace stiffmap
