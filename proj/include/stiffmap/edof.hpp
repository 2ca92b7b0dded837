#pragma once

// Extended depth of field: 3-level Haar fusion of a z-stack. Detail
// coefficients come from the plane with the largest magnitude, with the
// per-subband selection map smoothed by a 3x3 median; the approximation band
// is averaged over planes.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/parallel.hpp"
#include "stiffmap/raster.hpp"

namespace stiffmap {

inline constexpr int kHaarLevels = 3;

struct ZStack {
  std::vector<Raster> planes;
  double spacing_um = 3.0;

  void validate() const {
    require(!planes.empty(), Errc::invalid_argument, "z-stack has no planes");
    require(spacing_um > 0.0, Errc::invalid_argument, "z-stack spacing must be positive");
    for (const auto& p : planes)
      require(p.same_shape(planes.front()), Errc::invalid_argument,
              "z-stack planes have mismatched shapes");
  }
};

namespace detail {

struct Rect {
  int x0, y0, w, h;
};

// Orthonormal Haar analysis/synthesis in the usual pyramid layout.
inline void haar_step(std::vector<double>& buf, int stride, int w, int h, bool forward) {
  const double s = std::numbers::sqrt2 / 2.0;
  std::vector<double> tmp(std::max(w, h));
  for (int y = 0; y < h; ++y) {
    double* row = buf.data() + static_cast<std::size_t>(y) * stride;
    for (int i = 0; i < w / 2; ++i) {
      if (forward) {
        tmp[i] = (row[2 * i] + row[2 * i + 1]) * s;
        tmp[w / 2 + i] = (row[2 * i] - row[2 * i + 1]) * s;
      } else {
        tmp[2 * i] = (row[i] + row[w / 2 + i]) * s;
        tmp[2 * i + 1] = (row[i] - row[w / 2 + i]) * s;
      }
    }
    std::copy(tmp.begin(), tmp.begin() + w, row);
  }
  for (int x = 0; x < w; ++x) {
    auto at = [&](int y) -> double& { return buf[static_cast<std::size_t>(y) * stride + x]; };
    for (int i = 0; i < h / 2; ++i) {
      if (forward) {
        tmp[i] = (at(2 * i) + at(2 * i + 1)) * s;
        tmp[h / 2 + i] = (at(2 * i) - at(2 * i + 1)) * s;
      } else {
        tmp[2 * i] = (at(i) + at(h / 2 + i)) * s;
        tmp[2 * i + 1] = (at(i) - at(h / 2 + i)) * s;
      }
    }
    for (int y = 0; y < h; ++y) at(y) = tmp[y];
  }
}

inline void haar_forward(std::vector<double>& buf, int w, int h) {
  for (int l = 0; l < kHaarLevels; ++l) haar_step(buf, w, w >> l, h >> l, true);
}

inline void haar_inverse(std::vector<double>& buf, int w, int h) {
  for (int l = kHaarLevels - 1; l >= 0; --l) haar_step(buf, w, w >> l, h >> l, false);
}

inline std::vector<Rect> detail_subbands(int w, int h) {
  std::vector<Rect> bands;
  for (int l = 1; l <= kHaarLevels; ++l) {
    const int bw = w >> l, bh = h >> l;
    bands.push_back({bw, 0, bw, bh});
    bands.push_back({0, bh, bw, bh});
    bands.push_back({bw, bh, bw, bh});
  }
  return bands;
}

}  // namespace detail

inline Raster edof_fuse(const ZStack& stack) {
  stack.validate();
  const Raster& ref = stack.planes.front();
  const int w = ref.width, h = ref.height, ch = ref.channels;
  constexpr int block = 1 << kHaarLevels;
  const int pw = (w + block - 1) / block * block, ph = (h + block - 1) / block * block;
  const std::size_t n = static_cast<std::size_t>(pw) * ph;
  const auto np = static_cast<std::ptrdiff_t>(stack.planes.size());

  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (const auto& p : stack.planes)
    for (float v : p.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }

  Raster out(w, h, ch, ref.pitch_um);
  const auto bands = detail::detail_subbands(pw, ph);
  for (int c = 0; c < ch; ++c) {
    std::vector<std::vector<double>> coeffs(stack.planes.size());
    parallel_for(0, np, [&](std::ptrdiff_t k) {
      auto& buf = coeffs[k];
      buf.resize(n);
      const Raster& src = stack.planes[k];
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x)
          buf[static_cast<std::size_t>(y) * pw + x] =
              src.at(std::min(x, w - 1), std::min(y, h - 1), c);
      detail::haar_forward(buf, pw, ph);
    });

    std::vector<double> fused(n, 0.0);
    const int aw = pw >> kHaarLevels, ah = ph >> kHaarLevels;
    for (int y = 0; y < ah; ++y)
      for (int x = 0; x < aw; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * pw + x;
        double sum = 0.0;
        for (const auto& b : coeffs) sum += b[i];
        fused[i] = sum / static_cast<double>(np);
      }

    parallel_for(0, static_cast<std::ptrdiff_t>(bands.size()), [&](std::ptrdiff_t bi) {
      const auto r = bands[bi];
      std::vector<int> sel(static_cast<std::size_t>(r.w) * r.h);
      for (int y = 0; y < r.h; ++y)
        for (int x = 0; x < r.w; ++x) {
          const std::size_t i = static_cast<std::size_t>(r.y0 + y) * pw + r.x0 + x;
          int best = 0;
          for (int k = 1; k < np; ++k)
            if (std::abs(coeffs[k][i]) > std::abs(coeffs[best][i])) best = k;
          sel[static_cast<std::size_t>(y) * r.w + x] = best;
        }
      std::array<int, 9> win{};
      for (int y = 0; y < r.h; ++y)
        for (int x = 0; x < r.w; ++x) {
          int m = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int sx = std::clamp(x + dx, 0, r.w - 1), sy = std::clamp(y + dy, 0, r.h - 1);
              win[m++] = sel[static_cast<std::size_t>(sy) * r.w + sx];
            }
          std::nth_element(win.begin(), win.begin() + 4, win.end());
          const std::size_t i = static_cast<std::size_t>(r.y0 + y) * pw + r.x0 + x;
          fused[i] = coeffs[win[4]][i];
        }
    });

    detail::haar_inverse(fused, pw, ph);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(x, y, c) = std::clamp(static_cast<float>(fused[static_cast<std::size_t>(y) * pw + x]), lo, hi);
  }
  return out;
}

}  // namespace stiffmap
