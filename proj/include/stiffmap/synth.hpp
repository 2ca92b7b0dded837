#pragma once

// Synthetic scenes with known ground truth.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "stiffmap/color.hpp"
#include "stiffmap/edof.hpp"
#include "stiffmap/forcecurve.hpp"
#include "stiffmap/random.hpp"
#include "stiffmap/raster.hpp"
#include "stiffmap/register.hpp"
#include "stiffmap/segment.hpp"

namespace stiffmap::synth {

// Multi-scale smooth noise rescaled to [lo, hi].
inline Raster random_texture(int w, int h, Rng& rng, double lo = 0.2, double hi = 0.9,
                             double pitch_um = 1.0) {
  Raster acc(w, h, 1, pitch_um);
  for (double sigma : {1.0, 2.5, 6.0}) {
    Raster n(w, h, 1, pitch_um);
    for (auto& v : n.data) v = static_cast<float>(rng.uniform());
    n = gaussian_blur(n, sigma);
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += n.data[i] * static_cast<float>(sigma);
  }
  const auto [mn, mx] = std::minmax_element(acc.data.begin(), acc.data.end());
  const float a = *mn, b = *mx;
  for (auto& v : acc.data) v = static_cast<float>(lo + (hi - lo) * (v - a) / (b - a));
  return acc;
}

// ---------------------------------------------------------------------------
// Cantilever scenes.
//
// The cantilever is a dark triangle ending in a bead; the bead has a bright
// focal spot at its center, the contact point. Geometry is in low-magnification
// pixels of the template frame.

struct CantileverModel {
  Point apex{48.0, 60.0};
  double half_base = 15.0;
  double length = 38.0;
  double bead_radius = 3.0;
  double spot_sigma = 0.6;
  float body = 0.02f;
  float background = 0.85f;

  // Returns opacity in {0, 1} and the cantilever intensity at template point p.
  bool sample(Point p, float& value) const {
    const double dy = apex.y - p.y;  // distance back along the beam
    const double r = norm(p - apex);
    if (r <= bead_radius) {
      value = static_cast<float>(body + 0.93 * std::exp(-0.5 * r * r / (spot_sigma * spot_sigma)));
      return true;
    }
    if (dy >= 0.0 && dy <= length && std::abs(p.x - apex.x) <= half_base * dy / length) {
      value = body;
      return true;
    }
    return false;
  }
};

struct CantileverSceneParams {
  int fov_size = 96;
  int mag_ratio = 10;
  double lo_pitch_um = 1.625;
  double rotation_deg = 0.0;  // FOV camera rotation relative to the whole-sample frame
  Point fov_offset{0.0, 0.0};  // whole-sample position of the upright FOV's origin
  Point cantilever_shift{0.0, 0.0};
  int bead_crop = 16;  // low-magnification pixels covered by bead_hi
};

struct CantileverScene {
  Raster bead_hi;
  Raster cantilever_lo;
  Raster afm_fov;
  Point contact_template_px;  // in cantilever_lo
  Point contact_fov_px;
  Point contact_ws_px;        // whole-sample frame
};

// The apex moved onto the nearest high-magnification pixel center.
inline Point snapped_apex(const CantileverModel& model, int f) {
  const double hx = static_cast<double>(std::lround((model.apex.x + 0.5) * f - 0.5));
  const double hy = static_cast<double>(std::lround((model.apex.y + 0.5) * f - 0.5));
  return {(hx + 0.5) / f - 0.5, (hy + 0.5) / f - 0.5};
}

// `wholesample` provides the tissue seen through the FOV.
inline CantileverScene make_cantilever_scene(const Raster& wholesample, const CantileverSceneParams& p,
                                             const CantileverModel& model = {}) {
  require_channels(wholesample, 1, "cantilever scene whole-sample image");
  CantileverScene s;
  const int n = p.fov_size, f = p.mag_ratio;
  const double hi_pitch = p.lo_pitch_um / f;

  // Contact point sits on a high-magnification pixel center.
  const int bead_hx = static_cast<int>(std::lround((model.apex.x + 0.5) * f - 0.5));
  const int bead_hy = static_cast<int>(std::lround((model.apex.y + 0.5) * f - 0.5));
  CantileverModel m = model;
  m.apex = snapped_apex(model, f);
  s.contact_template_px = m.apex;

  Raster hi(n * f, n * f, 1, hi_pitch);
  parallel_for(0, hi.height, [&](std::ptrdiff_t y) {
    for (int x = 0; x < hi.width; ++x) {
      const Point lo{(x + 0.5) / f - 0.5, (static_cast<double>(y) + 0.5) / f - 0.5};
      float v = m.background;
      m.sample(lo, v);
      hi.at(x, static_cast<int>(y)) = v;
    }
  });
  s.cantilever_lo = downscale(hi, f);
  const int cx = (bead_hx / f - p.bead_crop / 2) * f, cy = (bead_hy / f - p.bead_crop / 2) * f;
  s.bead_hi = crop(hi, cx, cy, p.bead_crop * f, p.bead_crop * f);

  // FOV: tissue seen through a rotated camera with the cantilever overlaid.
  const Point c = image_center(n, n);
  const Point ct = image_center(n, n);
  s.afm_fov = Raster(n, n, 1, p.lo_pitch_um);
  constexpr int ss = 4;
  parallel_for(0, n, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < n; ++x) {
      const Point q{double(x), double(y)};
      const Point ws = rotate_about(q, -p.rotation_deg, c) + p.fov_offset;
      const double tissue = sample_bilinear(wholesample, ws.x, ws.y, 0, 0.5f);
      double acc = 0.0;
      for (int j = 0; j < ss; ++j)
        for (int i = 0; i < ss; ++i) {
          const Point sub{x + (i + 0.5) / ss - 0.5, y + (j + 0.5) / ss - 0.5};
          const Point tp = rotate_about(sub - p.cantilever_shift, -p.rotation_deg, ct);
          float v = 0.0f;
          acc += m.sample(tp, v) ? v : tissue;
        }
      s.afm_fov.at(x, y) = static_cast<float>(acc / (ss * ss));
    }
  });
  s.contact_fov_px = rotate_about(s.contact_template_px, p.rotation_deg, ct) + p.cantilever_shift;
  s.contact_ws_px = rotate_about(s.contact_fov_px, -p.rotation_deg, c) + p.fov_offset;
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic tissue sample.
//
// The world is the H&E mosaic frame (pixel centers at integers). Two
// structure textures split the tissue: texture 0 ("healthy-like") is fibrous
// stroma with glands, texture 1 ("cancer-like") is densely granular. Each
// texture has its own stiffness distribution.

// Zero-mean, unit-variance smooth noise with correlation length ~scale_px.
inline std::vector<double> smooth_field(int w, int h, double scale_px, Rng& rng) {
  const int gw = static_cast<int>(std::ceil(w / scale_px)) + 4, gh = static_cast<int>(std::ceil(h / scale_px)) + 4;
  Raster g(gw, gh, 1, 1.0);
  for (auto& v : g.data) v = static_cast<float>(rng.normal());
  g = gaussian_blur(g, 1.0);
  std::vector<double> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out[static_cast<std::size_t>(y) * w + x] = sample_bilinear(g, x / scale_px + 1.5, y / scale_px + 1.5, 0, 0.0f);
  double mean = 0.0, sq = 0.0;
  for (double v : out) mean += v;
  mean /= static_cast<double>(out.size());
  for (double v : out) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(out.size()));
  for (double& v : out) v = (v - mean) / (sd > 0.0 ? sd : 1.0);
  return out;
}

// Zero-mean, unit-variance white noise blurred with a Gaussian of sigma_px.
inline std::vector<double> grain_field(int w, int h, double sigma_px, Rng& rng) {
  Raster g(w, h, 1, 1.0);
  for (auto& v : g.data) v = static_cast<float>(rng.normal());
  g = gaussian_blur(g, sigma_px);
  std::vector<double> out(g.data.begin(), g.data.end());
  double mean = 0.0, sq = 0.0;
  for (double v : out) mean += v;
  mean /= static_cast<double>(out.size());
  for (double v : out) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(out.size()));
  for (double& v : out) v = (v - mean) / (sd > 0.0 ? sd : 1.0);
  return out;
}

struct Palette {
  Color3 hsv;
  Color3 jitter;  // per-pixel sd in h, s, v
};

inline std::array<Palette, kStructureClasses> default_palettes() {
  return {{
      {{0.08, 0.03, 0.96}, {0.02, 0.015, 0.015}},  // lumen: near white
      {{0.74, 0.55, 0.48}, {0.012, 0.05, 0.05}},   // cell: haematoxylin purple
      {{0.93, 0.35, 0.84}, {0.012, 0.04, 0.04}},   // stroma: eosin pink
  }};
}

struct SampleParams {
  std::uint64_t seed = 7;
  double he_pitch_um = 0.325;
  double un_pitch_um = 1.625;
  int he_tile_px = 480;
  int he_grid = 3;
  double he_overlap = 0.25;
  int un_tile_px = 144;
  int un_grid = 2;
  double un_overlap = 1.0 / 3.0;
  int he_jitter_px = 3;
  int un_jitter_px = 1;
  int z_planes = 3;
  double z_spacing_um = 3.0;
  std::array<double, 2> texture_mean_pa{369.0, 659.0};
  std::array<double, 2> texture_sd_pa{18.0, 171.0};
  double stiffness_grain_px = 1.5;  // blur sigma of the cell-scale stiffness perturbation
  int sites_per_texture = 8;
  int curve_rows = 8;
  int curve_cols = 8;
  double scan_um = 10.0;
  std::optional<double> curve_snr_db = 40.0;
  double he_rotation_deg = 3.5;
  Point he_offset_un_px{2.5, -1.5};  // unstained position of the H&E center minus the unstained center
  double fov_rotation_max_deg = 8.0;
  double cantilever_shift_max_px = 8.0;
  int fov_px = 96;
  int mag_ratio = 10;
  IndenterSpec indenter;
  CurveShape curve;

  int he_step() const { return static_cast<int>(std::lround(he_tile_px * (1.0 - he_overlap))); }
  int un_step() const { return static_cast<int>(std::lround(un_tile_px * (1.0 - un_overlap))); }
  int he_size() const { return he_tile_px + (he_grid - 1) * he_step() + he_jitter_px + 1; }
  int un_size() const { return un_tile_px + (un_grid - 1) * un_step() + un_jitter_px + 1; }

  void validate() const {
    require(he_pitch_um > 0.0 && un_pitch_um > he_pitch_um, Errc::invalid_argument,
            "unstained pitch must be coarser than the H&E pitch");
    require(he_grid >= 1 && un_grid >= 1 && he_tile_px >= 64 && un_tile_px >= 64, Errc::invalid_argument,
            "tile grids need at least one tile of >= 64 px");
    require(he_overlap > 0.0 && he_overlap <= 0.5 && un_overlap > 0.0 && un_overlap <= 0.5,
            Errc::invalid_argument, "tile overlap must lie in (0, 0.5]");
    require(he_jitter_px >= 0 && un_jitter_px >= 0, Errc::invalid_argument, "jitter must be non-negative");
    require(z_planes >= 1 && z_spacing_um > 0.0, Errc::invalid_argument, "z-stack needs planes and spacing");
    for (int t = 0; t < 2; ++t)
      require(texture_mean_pa[t] > 0.0 && texture_sd_pa[t] >= 0.0, Errc::invalid_argument,
              "texture stiffness must be positive");
    require(sites_per_texture >= 1 && curve_rows >= 1 && curve_cols >= 1 && scan_um > 0.0, Errc::invalid_argument,
            "need at least one site and a non-empty force grid");
    require(!curve_snr_db || *curve_snr_db > 0.0, Errc::invalid_argument, "curve SNR must be positive");
    require(fov_px >= 96 && mag_ratio >= 2, Errc::invalid_argument,
            "FOV must be >= 96 px to hold the cantilever and magnification ratio >= 2");
    require(fov_px < un_size(), Errc::invalid_argument, "FOV does not fit in the unstained image");
    indenter.validate();
  }
};

// Ground-truth structure in the world frame.
struct World {
  int size = 0;
  LabelMap labels;
  Grid<std::uint8_t> texture;  // 0 / 1 inside tissue
  BitMask tissue;
  Grid<double> stiffness_pa;   // 0 outside tissue
};

namespace detail {

inline void paint_disc(LabelMap& m, const World& w, int texture, double cx, double cy, double r,
                       std::uint8_t label) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r))), x1 = std::min(m.width - 1, static_cast<int>(std::ceil(cx + r)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r))), y1 = std::min(m.height - 1, static_cast<int>(std::ceil(cy + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r && w.tissue.at(x, y) && w.texture.at(x, y) == texture)
        m.at(x, y) = label;
}

}  // namespace detail

// Tissue outline, texture partition, labels and stiffness on a size x size canvas.
inline World make_world(int size, const SampleParams& p, Rng& rng) {
  require(size >= 128, Errc::invalid_argument, "world must be at least 128 px");
  World w;
  w.size = size;
  w.labels = LabelMap(size, size, 0);
  w.texture = Grid<std::uint8_t>(size, size, 0);
  w.tissue = BitMask(size, size, 0);
  w.stiffness_pa = Grid<double>(size, size, 0.0);
  const double c = 0.5 * (size - 1), r0 = 0.40 * size;
  std::array<double, 5> ph{};
  for (auto& v : ph) v = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const auto part = smooth_field(size, size, size / 6.0, rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double a = std::atan2(y - c, x - c), r = std::hypot(x - c, y - c);
      const double edge = r0 * (1.0 + 0.12 * std::sin(2 * a + ph[0]) + 0.07 * std::sin(3 * a + ph[1]) +
                                0.04 * std::sin(5 * a + ph[2]) + 0.03 * std::sin(9 * a + ph[3]) +
                                0.02 * std::sin(14 * a + ph[4]));
      w.tissue.at(x, y) = r < edge;
      const double t = 4.0 * (x - c) / size + 0.8 * part[static_cast<std::size_t>(y) * size + x];
      w.texture.at(x, y) = t > 0.0;
    }

  // Texture 0: wavy horizontal fibers (stroma bands with narrow gaps and
  // elongated nuclei), a few round nuclei, glands.
  const double fphase = rng.uniform(0.0, 12.0);
  const auto wave = smooth_field(size, size, 40.0, rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (!w.tissue.at(x, y)) continue;
      if (w.texture.at(x, y) == 0) {
        const double yy = y + fphase + 1.5 * std::sin(2 * std::numbers::pi * x / 240.0) +
                          0.5 * wave[static_cast<std::size_t>(y) * size + x];
        const double m = yy - 12.0 * std::floor(yy / 12.0);
        w.labels.at(x, y) = m < 3.0 ? 0 : (m >= 6.5 && m < 8.5 ? 1 : 2);
      } else {
        w.labels.at(x, y) = 2;
      }
    }
  for (double gy = 0; gy < size; gy += 26)
    for (double gx = 0; gx < size; gx += 26) {
      const double cx = gx + rng.uniform(0, 26), cy = gy + rng.uniform(0, 26), rr = rng.uniform(3.5, 5.0);
      if (rng.uniform() < 0.1) detail::paint_disc(w.labels, w, 0, cx, cy, rr, 1);
    }
  for (double gy = 0; gy < size; gy += 150)
    for (double gx = 0; gx < size; gx += 150) {
      const double cx = gx + 75 + rng.uniform(-40, 40), cy = gy + 75 + rng.uniform(-40, 40);
      const double rr = rng.uniform(22.0, 38.0);
      if (rng.uniform() < 0.7) {
        detail::paint_disc(w.labels, w, 0, cx, cy, rr + 6.0, 1);
        detail::paint_disc(w.labels, w, 0, cx, cy, rr, 0);
      }
    }

  // Texture 1: dense nuclei on a jittered 9 px lattice, small lumens.
  for (int gy = 0; gy < size; gy += 9)
    for (int gx = 0; gx < size; gx += 9) {
      const double cx = gx + 4 + rng.uniform(-0.5, 0.5), cy = gy + 4 + rng.uniform(-0.5, 0.5);
      detail::paint_disc(w.labels, w, 1, cx, cy, 3.2, 1);
    }
  for (double gy = 0; gy < size; gy += 110)
    for (double gx = 0; gx < size; gx += 110) {
      const double cx = gx + 55 + rng.uniform(-30, 30), cy = gy + 55 + rng.uniform(-30, 30);
      if (rng.uniform() < 0.5) detail::paint_disc(w.labels, w, 1, cx, cy, rng.uniform(6.0, 10.0), 0);
    }

  // Stiffness: per-texture mean plus cell-scale heterogeneity of the texture's sd.
  const auto pert = grain_field(size, size, p.stiffness_grain_px, rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (!w.tissue.at(x, y)) continue;
      const int t = w.texture.at(x, y);
      const double v = p.texture_mean_pa[t] + p.texture_sd_pa[t] * pert[static_cast<std::size_t>(y) * size + x];
      w.stiffness_pa.at(x, y) = std::max(0.2 * p.texture_mean_pa[t], v);
    }
  return w;
}

// True when the square of half-side `r` around (x, y) is tissue of a single texture.
inline bool uniform_patch(const World& w, int x, int y, int r) {
  if (x - r < 0 || y - r < 0 || x + r >= w.size || y + r >= w.size) return false;
  const int t = w.texture.at(x, y);
  for (int yy = y - r; yy <= y + r; ++yy)
    for (int xx = x - r; xx <= x + r; ++xx)
      if (!w.tissue.at(xx, yy) || w.texture.at(xx, yy) != t) return false;
  return true;
}

inline double stiffness_at(const World& w, Point p) {
  const int x = std::clamp(static_cast<int>(std::lround(p.x)), 0, w.size - 1);
  const int y = std::clamp(static_cast<int>(std::lround(p.y)), 0, w.size - 1);
  return w.stiffness_pa.at(x, y);
}

// H&E world rendering with per-pixel palette jitter.
inline Raster render_he(const World& w, double pitch_um, Rng& rng) {
  const auto pal = default_palettes();
  Raster out(w.size, w.size, 3, pitch_um);
  const auto stain = smooth_field(w.size, w.size, 150.0, rng);
  for (int y = 0; y < w.size; ++y)
    for (int x = 0; x < w.size; ++x) {
      const auto& pc = pal[w.labels.at(x, y)];
      Color3 hsv;
      hsv[0] = pc.hsv[0] + pc.jitter[0] * rng.normal();
      hsv[0] -= std::floor(hsv[0]);
      hsv[1] = std::clamp(pc.hsv[1] + pc.jitter[1] * rng.normal(), 0.0, 1.0);
      hsv[2] = std::clamp(pc.hsv[2] + pc.jitter[2] * rng.normal() + 0.02 * stain[out.index(x, y) / 3], 0.0, 1.0);
      const auto rgb = hsv_to_rgb(hsv);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = static_cast<float>(rgb[c]);
    }
  return out;
}

// Focal planes: plane z is blurred by 1.2 px per plane of distance from a
// smooth focus surface spanning the stack.
inline std::vector<Raster> render_focal_planes(const Raster& sharp, int planes, Rng& rng) {
  const int w = sharp.width, h = sharp.height;
  std::vector<double> focus = smooth_field(w, h, 200.0, rng);
  for (double& f : focus) f = std::clamp(0.5 * (planes - 1) * (1.0 + 0.8 * f), 0.0, planes - 1.0);
  const std::vector<double> sigmas{0.0, 0.8, 1.6, 2.4};
  std::vector<Raster> levels{sharp};
  for (std::size_t i = 1; i < sigmas.size(); ++i) levels.push_back(gaussian_blur(sharp, sigmas[i]));
  std::vector<Raster> out;
  for (int z = 0; z < planes; ++z) {
    Raster pl(w, h, sharp.channels, sharp.pitch_um);
    for (std::size_t i = 0; i < sharp.pixel_count(); ++i) {
      const double sigma = std::min(sigmas.back(), 1.2 * std::abs(z - focus[i]));
      const double pos = sigma / 0.8;
      const auto lo = static_cast<std::size_t>(std::min<double>(std::floor(pos), sigmas.size() - 2));
      const double t = pos - static_cast<double>(lo);
      for (int c = 0; c < sharp.channels; ++c) {
        const std::size_t k = i * sharp.channels + c;
        const double v = (1.0 - t) * levels[lo].data[k] + t * levels[lo + 1].data[k] + 0.006 * rng.normal();
        pl.data[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    out.push_back(std::move(pl));
  }
  return out;
}

inline std::array<double, kStructureClasses> unstained_gray_levels() {
  std::array<double, kStructureClasses> g{};
  const auto pal = default_palettes();
  for (int k = 0; k < kStructureClasses; ++k) {
    const auto rgb = hsv_to_rgb(pal[k].hsv);
    g[k] = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
  }
  return g;
}

// Unstained whole-sample image: class gray levels area-sampled through
// he_to_un, times a smooth multiplicative texture.
inline Raster render_unstained(const World& w, const RigidTransform2D& he_to_un, int size, double pitch_um,
                               Rng& rng) {
  const auto gray = unstained_gray_levels();
  const auto inv = he_to_un.inverse();
  Raster tex = random_texture(size, size, rng, -1.0, 1.0, pitch_um);
  Raster out(size, size, 1, pitch_um);
  const int ss = static_cast<int>(std::lround(1.0 / he_to_un.scale));
  parallel_for(0, size, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int j = 0; j < ss; ++j)
        for (int i = 0; i < ss; ++i) {
          const Point q{x + (i + 0.5) / ss - 0.5, y + (j + 0.5) / ss - 0.5};
          const Point p = inv.apply(q);
          const int px = static_cast<int>(std::lround(p.x)), py = static_cast<int>(std::lround(p.y));
          acc += w.labels.contains(px, py) ? gray[w.labels.at(px, py)] : gray[0];
        }
      const double base = acc / (ss * ss);
      out.at(x, y) = static_cast<float>(std::clamp(base * (1.0 + 0.12 * tex.at(x, y)), 0.0, 1.0));
    }
  });
  return out;
}

struct SiteTruth {
  int site_id = 0;
  int texture = 0;
  Point he_px;          // contact point, world frame
  Point un_px;          // contact point, unstained frame
  double fov_rotation_deg = 0.0;
  Point cantilever_shift;
  Point fov_offset;
  Point contact_fov_px;
  double scan_rotation_he_deg = 0.0;  // force-grid axes relative to the world frame
  std::vector<double> cell_moduli_pa;  // row-major
  double mean_pa = 0.0;
  double std_pa = 0.0;
};

struct SiteData {
  CantileverScene scene;
  std::vector<ForceCurve> curves;
};

struct TilePlacement {
  int row = 0;
  int col = 0;
  int x = 0;
  int y = 0;
};

struct SyntheticSample {
  SampleParams params;
  World world;
  RigidTransform2D he_to_un;
  Raster unstained;                        // ground-truth unstained canvas
  std::vector<TilePlacement> he_tiles;
  std::vector<ZStack> he_stacks;           // one per H&E tile
  std::vector<TilePlacement> un_tiles;
  std::vector<Raster> un_tile_images;
  std::vector<SiteTruth> sites;
  std::vector<SiteData> site_data;
};

namespace detail {

inline std::vector<TilePlacement> place_tiles(int grid, int step, int jitter, Rng& rng) {
  std::vector<TilePlacement> t;
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      TilePlacement p{r, c, c * step, r * step};
      if (r + c > 0) {
        p.x += static_cast<int>(rng.below(static_cast<std::uint64_t>(jitter) + 1));
        p.y += static_cast<int>(rng.below(static_cast<std::uint64_t>(jitter) + 1));
      }
      t.push_back(p);
    }
  return t;
}

// Scan cell center in the FOV frame.
inline Point scan_cell_fov(const SiteTruth& s, int r, int c, int rows, int cols, double side_fov) {
  return s.contact_fov_px + Point{((c + 0.5) / cols - 0.5) * side_fov, ((r + 0.5) / rows - 0.5) * side_fov};
}

}  // namespace detail

// FOV pixel -> unstained pixel for a site's camera pose.
inline Point fov_to_unstained(const SiteTruth& s, Point q, int fov_px) {
  const Point c = image_center(fov_px, fov_px);
  return rotate_about(q, -s.fov_rotation_deg, c) + s.fov_offset;
}

inline SyntheticSample make_synthetic_sample(const SampleParams& p) {
  p.validate();
  SyntheticSample out;
  out.params = p;
  Rng root(p.seed);
  Rng rng_world = root.fork(1), rng_he = root.fork(2), rng_un = root.fork(3), rng_sites = root.fork(4),
      rng_curves = root.fork(5), rng_tiles = root.fork(6);

  const int he_size = p.he_size(), un_size = p.un_size();
  out.world = make_world(he_size, p, rng_world);
  const World& w = out.world;

  // H&E world -> unstained frame.
  const double s = p.he_pitch_um / p.un_pitch_um;
  out.he_to_un.scale = s;
  out.he_to_un.rotation_deg = p.he_rotation_deg;
  const Point he_c = image_center(he_size, he_size), un_c = image_center(un_size, un_size);
  out.he_to_un.translation = un_c + p.he_offset_un_px - s * rotate_point(he_c, p.he_rotation_deg);
  out.unstained = render_unstained(w, out.he_to_un, un_size, p.un_pitch_um, rng_un);

  // Tiles.
  out.he_tiles = detail::place_tiles(p.he_grid, p.he_step(), p.he_jitter_px, rng_tiles);
  out.un_tiles = detail::place_tiles(p.un_grid, p.un_step(), p.un_jitter_px, rng_tiles);
  {
    const Raster sharp = render_he(w, p.he_pitch_um, rng_he);
    const auto planes = render_focal_planes(sharp, p.z_planes, rng_he);
    for (const auto& t : out.he_tiles) {
      ZStack z;
      z.spacing_um = p.z_spacing_um;
      for (const auto& pl : planes) z.planes.push_back(crop(pl, t.x, t.y, p.he_tile_px, p.he_tile_px));
      out.he_stacks.push_back(std::move(z));
    }
  }
  for (const auto& t : out.un_tiles) out.un_tile_images.push_back(crop(out.unstained, t.x, t.y, p.un_tile_px, p.un_tile_px));

  // Sites: inside a single texture with room for the ROI, apart from each other,
  // and with a FOV that stays inside the unstained image.
  const CantileverModel model;
  const Point apex = snapped_apex(model, p.mag_ratio);
  const Point fc = image_center(p.fov_px, p.fov_px);
  const double side_fov = p.scan_um / p.un_pitch_um;
  const int margin = 32;
  std::array<int, 2> count{};
  int attempts = 0;
  while (count[0] + count[1] < 2 * p.sites_per_texture) {
    require(++attempts < 200000, Errc::invalid_argument, "cannot place the requested sites in the sample");
    const int x = static_cast<int>(rng_sites.below(static_cast<std::uint64_t>(he_size)));
    const int y = static_cast<int>(rng_sites.below(static_cast<std::uint64_t>(he_size)));
    if (!w.tissue.at(x, y)) continue;
    const int t = w.texture.at(x, y);
    if (count[t] >= p.sites_per_texture || !uniform_patch(w, x, y, margin)) continue;
    bool apart = true;
    for (const auto& o : out.sites) apart = apart && norm(o.he_px - Point{double(x), double(y)}) >= 2.0 * margin + 8;
    if (!apart) continue;

    SiteTruth st;
    st.texture = t;
    st.he_px = {double(x), double(y)};
    st.un_px = out.he_to_un.apply(st.he_px);
    st.fov_rotation_deg = rng_sites.uniform(-p.fov_rotation_max_deg, p.fov_rotation_max_deg);
    st.cantilever_shift = {rng_sites.uniform(-p.cantilever_shift_max_px, p.cantilever_shift_max_px),
                           rng_sites.uniform(-p.cantilever_shift_max_px, p.cantilever_shift_max_px)};
    st.contact_fov_px = rotate_about(apex, st.fov_rotation_deg, fc) + st.cantilever_shift;
    st.fov_offset = st.un_px - rotate_about(st.contact_fov_px, -st.fov_rotation_deg, fc);
    bool inside = true;
    for (double qy : {0.0, p.fov_px - 1.0})
      for (double qx : {0.0, p.fov_px - 1.0}) {
        const Point ws = fov_to_unstained(st, {qx, qy}, p.fov_px);
        inside = inside && ws.x >= 1.0 && ws.y >= 1.0 && ws.x <= un_size - 2.0 && ws.y <= un_size - 2.0;
      }
    if (!inside) continue;
    st.site_id = static_cast<int>(out.sites.size());
    st.scan_rotation_he_deg = -(p.he_rotation_deg + st.fov_rotation_deg);
    out.sites.push_back(st);
    ++count[t];
  }
  std::sort(out.sites.begin(), out.sites.end(), [](const SiteTruth& a, const SiteTruth& b) {
    return a.site_id < b.site_id;
  });

  const auto un_to_he = out.he_to_un.inverse();
  for (auto& st : out.sites) {
    CantileverSceneParams cp;
    cp.fov_size = p.fov_px;
    cp.mag_ratio = p.mag_ratio;
    cp.lo_pitch_um = p.un_pitch_um;
    cp.rotation_deg = st.fov_rotation_deg;
    cp.fov_offset = st.fov_offset;
    cp.cantilever_shift = st.cantilever_shift;
    SiteData d;
    d.scene = make_cantilever_scene(out.unstained, cp, model);

    Rng rc = rng_curves.fork(static_cast<std::uint64_t>(st.site_id));
    double sum = 0.0;
    for (int r = 0; r < p.curve_rows; ++r)
      for (int c = 0; c < p.curve_cols; ++c) {
        const Point q = detail::scan_cell_fov(st, r, c, p.curve_rows, p.curve_cols, side_fov);
        const double e = stiffness_at(w, un_to_he.apply(fov_to_unstained(st, q, p.fov_px)));
        st.cell_moduli_pa.push_back(e);
        sum += e;
        d.curves.push_back(synthesize_curve(e, p.indenter, p.curve, p.curve_snr_db, &rc));
      }
    const double n = static_cast<double>(st.cell_moduli_pa.size());
    st.mean_pa = sum / n;
    double ss = 0.0;
    for (double e : st.cell_moduli_pa) ss += (e - st.mean_pa) * (e - st.mean_pa);
    st.std_pa = std::sqrt(ss / n);
    out.site_data.push_back(std::move(d));
  }
  return out;
}

// Cluster -> class by the nearest palette color in RGB.
inline ClusterAssignment default_assignment(const ClusterModel& model) {
  const auto pal = default_palettes();
  ClusterAssignment a;
  for (const auto& hsv : model.centroids) {
    const auto rgb = hsv_to_rgb(hsv);
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int k = 0; k < kStructureClasses; ++k) {
      const double d = squared_distance(rgb, hsv_to_rgb(pal[k].hsv));
      if (d < bd) {
        bd = d;
        best = k;
      }
    }
    a.class_of.push_back(best);
  }
  return a;
}

// Ground-truth record of a sample.
inline nlohmann::json manifest(const SyntheticSample& s) {
  using nlohmann::json;
  const auto& p = s.params;
  auto pt = [](Point q) { return json::array({q.x, q.y}); };
  auto tiles = [](const std::vector<TilePlacement>& v) {
    json a = json::array();
    for (const auto& t : v) a.push_back({{"row", t.row}, {"col", t.col}, {"x", t.x}, {"y", t.y}});
    return a;
  };
  json sites = json::array();
  for (const auto& st : s.sites)
    sites.push_back({{"site_id", st.site_id},
                     {"texture", st.texture},
                     {"he_px", pt(st.he_px)},
                     {"unstained_px", pt(st.un_px)},
                     {"fov_rotation_deg", st.fov_rotation_deg},
                     {"cantilever_shift_px", pt(st.cantilever_shift)},
                     {"fov_offset_px", pt(st.fov_offset)},
                     {"contact_fov_px", pt(st.contact_fov_px)},
                     {"scan_rotation_he_deg", st.scan_rotation_he_deg},
                     {"cell_moduli_pa", st.cell_moduli_pa},
                     {"mean_pa", st.mean_pa},
                     {"std_pa", st.std_pa}});
  json pal = json::array();
  for (const auto& c : default_palettes()) pal.push_back({{"hsv", c.hsv}, {"jitter", c.jitter}});
  return {{"format", "stiffmap-synthetic"},
          {"seed", p.seed},
          {"he_pitch_um", p.he_pitch_um},
          {"unstained_pitch_um", p.un_pitch_um},
          {"he_size_px", s.world.size},
          {"unstained_size_px", s.unstained.width},
          {"he_tile_px", p.he_tile_px},
          {"he_overlap", p.he_overlap},
          {"unstained_tile_px", p.un_tile_px},
          {"unstained_overlap", p.un_overlap},
          {"z_planes", p.z_planes},
          {"z_spacing_um", p.z_spacing_um},
          {"mag_ratio", p.mag_ratio},
          {"fov_px", p.fov_px},
          {"scan_um", p.scan_um},
          {"curve_grid", {p.curve_rows, p.curve_cols}},
          {"curve_snr_db", p.curve_snr_db ? json(*p.curve_snr_db) : json(nullptr)},
          {"indenter", {{"bead_radius_um", p.indenter.bead_radius_um}, {"poisson_ratio", p.indenter.poisson_ratio}}},
          {"texture_mean_pa", p.texture_mean_pa},
          {"texture_sd_pa", p.texture_sd_pa},
          {"he_to_unstained",
           {{"rotation_deg", s.he_to_un.rotation_deg},
            {"translation", pt(s.he_to_un.translation)},
            {"scale", s.he_to_un.scale}}},
          {"he_tiles", tiles(s.he_tiles)},
          {"unstained_tiles", tiles(s.un_tiles)},
          {"palettes", pal},
          {"sites", sites}};
}

}  // namespace stiffmap::synth
