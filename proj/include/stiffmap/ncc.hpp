#pragma once

// Zero-mean normalized cross correlation over full-overlap placements.
//
// Placement (u, v) puts the template's top-left pixel on image pixel (u, v);
// scores form a (W - w + 1) x (H - h + 1) grid. An optional valid mask on the
// template domain restricts every statistic to the selected template pixels.
// An image window with (near) zero variance scores 0.

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/fft.hpp"
#include "stiffmap/parallel.hpp"
#include "stiffmap/raster.hpp"

namespace stiffmap {

enum class NccMethod { automatic, direct, fft };

// Per-sample variance below which a window or template counts as constant.
inline constexpr double kNccVarianceFloor = 1e-10;
// Scores within this distance of the maximum are ties.
inline constexpr double kNccTieEpsilon = 1e-9;

// Dense single-channel plane in double precision.
struct Plane {
  int width = 0;
  int height = 0;
  std::vector<double> v;

  Plane() = default;
  Plane(int w, int h, double fill = 0.0)
      : width(w), height(h), v(static_cast<std::size_t>(w) * h, fill) {}
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * width + x]; }
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * width + x]; }
};

inline Plane to_plane(const Raster& r) {
  require_channels(r, 1, "ncc");
  Plane p(r.width, r.height);
  for (std::size_t i = 0; i < p.v.size(); ++i) p.v[i] = r.data[i];
  return p;
}

struct NccPeak {
  int x = 0;
  int y = 0;
  double value = 0.0;
  Point subpixel;  // parabolic refinement around (x, y)
};

namespace detail {

struct PreparedTemplate {
  Plane centered;  // mask * (t - mean)
  Plane mask;      // 0/1
  double count = 0.0;
  double sum_sq = 0.0;
  bool masked = false;
};

inline PreparedTemplate prepare_template(const Plane& t, const BitMask* valid) {
  PreparedTemplate p;
  p.masked = valid != nullptr;
  p.mask = Plane(t.width, t.height, 1.0);
  if (valid) {
    require(valid->width == t.width && valid->height == t.height, Errc::invalid_argument,
            "valid mask must match the template size");
    for (std::size_t i = 0; i < p.mask.v.size(); ++i) p.mask.v[i] = valid->values[i] ? 1.0 : 0.0;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < t.v.size(); ++i) {
    p.count += p.mask.v[i];
    sum += p.mask.v[i] * t.v[i];
  }
  require(p.count >= 2.0, Errc::zero_variance, "template has fewer than two valid pixels");
  const double mean = sum / p.count;
  p.centered = Plane(t.width, t.height);
  for (std::size_t i = 0; i < t.v.size(); ++i) {
    p.centered.v[i] = p.mask.v[i] * (t.v[i] - mean);
    p.sum_sq += p.centered.v[i] * p.centered.v[i];
  }
  require(p.sum_sq > kNccVarianceFloor * p.count, Errc::zero_variance, "template is constant");
  return p;
}

inline double ncc_score(double num, double s1, double s2, const PreparedTemplate& t) {
  const double var = s2 - s1 * s1 / t.count;
  if (!(var > kNccVarianceFloor * t.count)) return 0.0;
  return std::clamp(num / std::sqrt(t.sum_sq * var), -1.0, 1.0);
}

}  // namespace detail

// Score grid for one template.
struct NccScores {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Image side of the correlation with cached spectra and integral images, so
// many templates can be scored against one image.
class NccImage {
 public:
  explicit NccImage(Plane image, bool prepare_fft = true) : image_(std::move(image)) {
    require(image_.width > 0 && image_.height > 0, Errc::invalid_argument, "empty ncc image");
    const int w = image_.width, h = image_.height;
    sum_ = Plane(w + 1, h + 1);
    sum_sq_ = Plane(w + 1, h + 1);
    for (int y = 0; y < h; ++y) {
      double row = 0.0, row_sq = 0.0;
      for (int x = 0; x < w; ++x) {
        const double v = image_.at(x, y);
        row += v;
        row_sq += v * v;
        sum_.at(x + 1, y + 1) = sum_.at(x + 1, y) + row;
        sum_sq_.at(x + 1, y + 1) = sum_sq_.at(x + 1, y) + row_sq;
      }
    }
    if (prepare_fft) {
      fft_ = std::make_shared<RealFft2d>(next_fast_size(w), next_fast_size(h));
      std::vector<double> pad(fft_->real_size(), 0.0), pad_sq(fft_->real_size(), 0.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double v = image_.at(x, y);
          pad[static_cast<std::size_t>(y) * fft_->width() + x] = v;
          pad_sq[static_cast<std::size_t>(y) * fft_->width() + x] = v * v;
        }
      spec_ = fft_->forward(pad);
      spec_sq_ = fft_->forward(pad_sq);
    }
  }

  explicit NccImage(const Raster& image, bool prepare_fft = true)
      : NccImage(to_plane(image), prepare_fft) {}

  int width() const { return image_.width; }
  int height() const { return image_.height; }
  const Plane& image() const { return image_; }

  NccScores scores(const Plane& tmpl, const BitMask* valid = nullptr,
                   NccMethod method = NccMethod::automatic) const {
    require(tmpl.width <= image_.width && tmpl.height <= image_.height, Errc::invalid_argument,
            "template larger than image");
    const auto t = detail::prepare_template(tmpl, valid);
    if (method == NccMethod::automatic) {
      const double placements = double(image_.width - tmpl.width + 1) * (image_.height - tmpl.height + 1);
      const double direct_cost = placements * tmpl.width * tmpl.height;
      method = (fft_ && direct_cost > 64.0 * double(image_.width) * image_.height) ? NccMethod::fft
                                                                                   : NccMethod::direct;
    }
    if (method == NccMethod::fft) {
      require(fft_ != nullptr, Errc::invalid_argument, "ncc image was built without spectra");
      return fft_scores(t);
    }
    return direct_scores(t);
  }

 private:
  double window_sum(const Plane& s, int x, int y, int w, int h) const {
    return s.at(x + w, y + h) - s.at(x, y + h) - s.at(x + w, y) + s.at(x, y);
  }

  NccScores direct_scores(const detail::PreparedTemplate& t) const {
    const int tw = t.centered.width, th = t.centered.height;
    NccScores out{image_.width - tw + 1, image_.height - th + 1, {}};
    out.values.resize(static_cast<std::size_t>(out.width) * out.height);
    parallel_for(0, out.height, [&](std::ptrdiff_t vv) {
      const int v = static_cast<int>(vv);
      for (int u = 0; u < out.width; ++u) {
        double num = 0.0, s1 = 0.0, s2 = 0.0;
        for (int y = 0; y < th; ++y)
          for (int x = 0; x < tw; ++x) {
            const double m = t.mask.at(x, y);
            if (m == 0.0) continue;
            const double iv = image_.at(u + x, v + y);
            num += t.centered.at(x, y) * iv;
            s1 += iv;
            s2 += iv * iv;
          }
        out.values[static_cast<std::size_t>(v) * out.width + u] = detail::ncc_score(num, s1, s2, t);
      }
    });
    return out;
  }

  // Circular cross-correlation of the cached image spectrum with a template.
  std::vector<double> correlate(const std::vector<Complex>& image_spec, const Plane& tmpl) const {
    std::vector<double> pad(fft_->real_size(), 0.0);
    for (int y = 0; y < tmpl.height; ++y)
      for (int x = 0; x < tmpl.width; ++x)
        pad[static_cast<std::size_t>(y) * fft_->width() + x] = tmpl.at(x, y);
    auto ts = fft_->forward(pad);
    for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = image_spec[i] * std::conj(ts[i]);
    return fft_->inverse(ts);
  }

  NccScores fft_scores(const detail::PreparedTemplate& t) const {
    const int tw = t.centered.width, th = t.centered.height;
    NccScores out{image_.width - tw + 1, image_.height - th + 1, {}};
    out.values.resize(static_cast<std::size_t>(out.width) * out.height);
    const auto num = correlate(spec_, t.centered);
    std::vector<double> s1, s2;
    if (t.masked) {
      s1 = correlate(spec_, t.mask);
      s2 = correlate(spec_sq_, t.mask);
    }
    const int pw = fft_->width();
    for (int v = 0; v < out.height; ++v)
      for (int u = 0; u < out.width; ++u) {
        const std::size_t k = static_cast<std::size_t>(v) * pw + u;
        const double a = t.masked ? s1[k] : window_sum(sum_, u, v, tw, th);
        const double b = t.masked ? s2[k] : window_sum(sum_sq_, u, v, tw, th);
        out.values[static_cast<std::size_t>(v) * out.width + u] = detail::ncc_score(num[k], a, b, t);
      }
    return out;
  }

  Plane image_;
  Plane sum_, sum_sq_;
  std::shared_ptr<RealFft2d> fft_;
  std::vector<Complex> spec_, spec_sq_;
};

namespace detail {
inline double parabola_vertex(double l, double c, double r) {
  const double denom = l - 2.0 * c + r;
  if (!(denom < -1e-15)) return 0.0;
  return std::clamp(0.5 * (l - r) / denom, -0.5, 0.5);
}
}  // namespace detail

// Maximum with ties (within kNccTieEpsilon of the maximum) resolved to the
// lexicographically smallest (x, y).
inline NccPeak ncc_argmax(const NccScores& s) {
  require(!s.values.empty(), Errc::invalid_argument, "empty score grid");
  const double best = *std::max_element(s.values.begin(), s.values.end());
  NccPeak p;
  bool found = false;
  for (int x = 0; x < s.width && !found; ++x)
    for (int y = 0; y < s.height; ++y)
      if (s.at(x, y) >= best - kNccTieEpsilon) {
        p.x = x;
        p.y = y;
        p.value = s.at(x, y);
        found = true;
        break;
      }
  p.subpixel = {static_cast<double>(p.x), static_cast<double>(p.y)};
  if (p.x > 0 && p.x + 1 < s.width)
    p.subpixel.x += detail::parabola_vertex(s.at(p.x - 1, p.y), p.value, s.at(p.x + 1, p.y));
  if (p.y > 0 && p.y + 1 < s.height)
    p.subpixel.y += detail::parabola_vertex(s.at(p.x, p.y - 1), p.value, s.at(p.x, p.y + 1));
  return p;
}

inline NccScores ncc_scores(const Raster& tmpl, const Raster& image, const BitMask* valid = nullptr,
                            NccMethod method = NccMethod::automatic) {
  require_channels(tmpl, 1, "ncc_match template");
  require_channels(image, 1, "ncc_match image");
  require(tmpl.width <= image.width && tmpl.height <= image.height, Errc::invalid_argument,
          "template larger than image");
  return NccImage(image, method != NccMethod::direct).scores(to_plane(tmpl), valid, method);
}

inline NccPeak ncc_match(const Raster& tmpl, const Raster& image, const BitMask* valid = nullptr,
                         NccMethod method = NccMethod::automatic) {
  return ncc_argmax(ncc_scores(tmpl, image, valid, method));
}

}  // namespace stiffmap
