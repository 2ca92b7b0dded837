#pragma once

// Cross-magnification localization of the AFM contact point and H&E to
// unstained mosaic registration.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/ncc.hpp"
#include "stiffmap/parallel.hpp"
#include "stiffmap/raster.hpp"

namespace stiffmap {

// p -> scale * R(rotation_deg) * p + translation.
struct RigidTransform2D {
  double rotation_deg = 0.0;
  Point translation;
  double scale = 1.0;

  void validate() const {
    require(scale > 0.0 && std::isfinite(scale), Errc::invalid_argument,
            "transform scale must be positive");
  }
  Point apply(Point p) const { return scale * rotate_point(p, rotation_deg) + translation; }
  RigidTransform2D inverse() const {
    validate();
    RigidTransform2D inv;
    inv.scale = 1.0 / scale;
    inv.rotation_deg = -rotation_deg;
    inv.translation = -1.0 / scale * rotate_point(translation, -rotation_deg);
    return inv;
  }
  // (this o other)(p) == this->apply(other.apply(p))
  RigidTransform2D compose(const RigidTransform2D& other) const {
    RigidTransform2D c;
    c.scale = scale * other.scale;
    c.rotation_deg = rotation_deg + other.rotation_deg;
    c.translation = apply(other.translation);
    return c;
  }
};

struct RotationSearch {
  double range_deg = 15.0;
  double step_deg = 0.25;

  void validate() const {
    require(range_deg >= 0.0 && step_deg > 0.0, Errc::invalid_argument,
            "rotation search needs range >= 0 and step > 0");
  }
};

struct RotationEstimate {
  double angle_deg = 0.0;
  double score = 0.0;  // mask NCC at the chosen angle
};

namespace detail {

// Zero-mean NCC between two equally sized planes; 0 if either is constant.
inline double global_ncc(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
  }
  const double ma = sa / n, mb = sb / n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  if (!(da > kNccVarianceFloor * n) || !(db > kNccVarianceFloor * n)) return 0.0;
  return std::clamp(num / std::sqrt(da * db), -1.0, 1.0);
}

}  // namespace detail

// Angle theta such that mask_a rotated by theta about its centroid (and moved
// onto mask_b's centroid) best matches mask_b. Candidates are k * step within
// the range; ties go to the smallest |angle|, positive before negative.
inline RotationEstimate estimate_rotation_scored(const BitMask& mask_a, const BitMask& mask_b,
                                                 RotationSearch search = {}) {
  search.validate();
  require(mask_a.count() > 0 && mask_b.count() > 0, Errc::degenerate,
          "estimate_rotation: empty mask");
  const Point ca = centroid(mask_a), cb = centroid(mask_b);
  const Raster ra = mask_to_raster(mask_a, 1.0);
  std::vector<double> target(mask_b.values.begin(), mask_b.values.end());

  const int steps = static_cast<int>(std::floor(search.range_deg / search.step_deg + 1e-9));
  std::vector<double> angles{0.0};
  for (int k = 1; k <= steps; ++k) {
    angles.push_back(k * search.step_deg);
    angles.push_back(-k * search.step_deg);
  }
  std::vector<double> scores(angles.size());
  parallel_for(0, static_cast<std::ptrdiff_t>(angles.size()), [&](std::ptrdiff_t i) {
    std::vector<double> moved(target.size());
    for (int y = 0; y < mask_b.height; ++y)
      for (int x = 0; x < mask_b.width; ++x) {
        const Point src = rotate_point(Point{double(x), double(y)} - cb, -angles[i]) + ca;
        moved[static_cast<std::size_t>(y) * mask_b.width + x] = sample_bilinear(ra, src.x, src.y, 0, 0.0f);
      }
    scores[i] = detail::global_ncc(moved, target);
  });
  RotationEstimate best{angles[0], scores[0]};
  for (std::size_t i = 1; i < angles.size(); ++i)
    if (scores[i] > best.score) best = {angles[i], scores[i]};
  return best;
}

inline double estimate_rotation(const BitMask& mask_a, const BitMask& mask_b,
                                RotationSearch search = {}) {
  return estimate_rotation_scored(mask_a, mask_b, search).angle_deg;
}

// ---------------------------------------------------------------------------
// Contact point localization.

struct LocalizeOptions {
  double occlusion_threshold = 0.05;
  double ncc_floor = 0.5;
  double min_occlusion_fraction = 0.01;
  RotationSearch rotation;
};

struct ContactPointResult {
  int site_id = 0;
  Point position_um;       // whole-sample frame
  Point position_px;       // whole-sample pixels
  double peak_ncc = 0.0;   // lowest accepted stage peak
  double bead_ncc = 0.0;
  double rotation_ncc = 0.0;
  double wholesample_ncc = 0.0;
  double rotation_deg = 0.0;
  Point bead_px;           // brightest point in bead_hi
  Point cantilever_px;     // contact point in cantilever_lo
  Point fov_px;            // contact point in afm_fov
};

// Brightest pixel after 3x3 mean smoothing; ties go to the first in row-major order.
inline Point brightest_point(const Raster& img) {
  const Raster g = box_blur(to_gray(img), 1);
  std::size_t best = 0;
  for (std::size_t i = 1; i < g.data.size(); ++i)
    if (g.data[i] > g.data[best]) best = i;
  return {static_cast<double>(best % g.width), static_cast<double>(best / g.width)};
}

inline ContactPointResult localize_contact_point(const Raster& bead_hi, const Raster& cantilever_lo,
                                                 const Raster& afm_fov, const Raster& wholesample,
                                                 double mag_ratio, const LocalizeOptions& opt = {},
                                                 int site_id = 0) {
  require(mag_ratio >= 1.0, Errc::invalid_argument, "magnification ratio must be >= 1");
  ContactPointResult res;
  res.site_id = site_id;
  const Raster cant = to_gray(cantilever_lo), fov = to_gray(afm_fov), ws = to_gray(wholesample);
  auto fail = [&](const std::string& stage, const std::string& why) {
    throw Error(Errc::localization_failed, "site " + std::to_string(site_id) + ": " + why, stage);
  };

  // (1)-(2) bead: brightest point, then place the downscaled bead image in
  // the low-magnification cantilever frame.
  res.bead_px = brightest_point(bead_hi);
  const Raster bead_lo = downscale(to_gray(bead_hi), mag_ratio);
  if (bead_lo.width > cant.width || bead_lo.height > cant.height)
    fail("bead", "downscaled bead image larger than cantilever image");
  NccPeak bead;
  try {
    bead = ncc_match(bead_lo, cant);
  } catch (const Error& e) {
    fail("bead", e.what());
  }
  res.bead_ncc = bead.value;
  if (bead.value < opt.ncc_floor) fail("bead", "bead NCC peak below floor");
  res.cantilever_px = bead.subpixel + Point{(res.bead_px.x + 0.5) / mag_ratio - 0.5,
                                            (res.bead_px.y + 0.5) / mag_ratio - 0.5};

  // (3) masks: dark cantilever silhouette in both frames.
  const BitMask cant_mask = threshold_mask(cant, opt.occlusion_threshold, ThresholdMode::below);
  const BitMask occlusion = threshold_mask(fov, opt.occlusion_threshold, ThresholdMode::below);
  const double fov_fraction = static_cast<double>(occlusion.count()) / occlusion.size();
  if (fov_fraction < opt.min_occlusion_fraction)
    fail("mask", "occlusion mask covers less than the minimum FOV fraction");
  if (cant_mask.count() == 0) fail("mask", "cantilever template mask is empty");

  // (4) rotation of the FOV relative to the cantilever template.
  const auto rot = estimate_rotation_scored(cant_mask, occlusion, opt.rotation);
  res.rotation_deg = rot.angle_deg;
  res.rotation_ncc = rot.score;
  if (rot.score < opt.ncc_floor) fail("rotation", "mask NCC below floor");
  res.fov_px = rotate_point(res.cantilever_px - centroid(cant_mask), rot.angle_deg) + centroid(occlusion);

  // (5) undo the FOV rotation and match the unoccluded tissue into the
  // whole-sample image.
  const Point c = image_center(fov.width, fov.height);
  const Raster fov_upright = rotate(fov, -rot.angle_deg, c, 0.0f);
  const Raster inside = rotate(Raster(fov.width, fov.height, 1, fov.pitch_um, 1.0f), -rot.angle_deg, c, 0.0f);
  const Raster occl_upright = rotate(mask_to_raster(dilate(occlusion, 1), fov.pitch_um), -rot.angle_deg, c, 1.0f);
  BitMask valid(fov.width, fov.height);
  for (std::size_t i = 0; i < valid.values.size(); ++i)
    valid.values[i] = inside.data[i] >= 0.999f && occl_upright.data[i] <= 0.001f;
  if (fov.width > ws.width || fov.height > ws.height) fail("wholesample", "FOV larger than whole-sample image");
  NccPeak place;
  try {
    place = ncc_match(fov_upright, ws, &valid);
  } catch (const Error& e) {
    fail("wholesample", e.what());
  }
  res.wholesample_ncc = place.value;
  if (place.value < opt.ncc_floor) fail("wholesample", "whole-sample NCC peak below floor");

  res.position_px = rotate_about(res.fov_px, -rot.angle_deg, c) + place.subpixel;
  res.position_um = ws.pitch_um * res.position_px;
  res.peak_ncc = std::min({res.bead_ncc, res.rotation_ncc, res.wholesample_ncc});
  return res;
}

// ---------------------------------------------------------------------------
// H&E to unstained registration.

struct HeRegistrationOptions {
  double ncc_floor = 0.5;
  double mask_smoothing_px = 1.5;  // blur before thresholding, in unstained pixels
  RotationSearch rotation;
};

struct HeRegistration {
  RigidTransform2D transform;  // H&E pixels -> unstained pixels
  double rotation_ncc = 0.0;
  double translation_ncc = 0.0;
};

// Tissue is darker than the slide background in both modalities. Smoothing
// first keeps fine internal structure (which aliases differently in the two
// modalities) out of the mask so it traces the tissue extent.
inline BitMask tissue_mask(const Raster& gray, double smoothing_px = 0.0) {
  const Raster g = smoothing_px > 0.0 ? gaussian_blur(gray, smoothing_px) : gray;
  return threshold_mask(g, otsu_threshold(g), ThresholdMode::below);
}

inline HeRegistration register_he_to_unstained(const Raster& he_ws, const Raster& unstained_ws,
                                               const HeRegistrationOptions& opt = {}) {
  const double factor = unstained_ws.pitch_um / he_ws.pitch_um;
  require(factor >= 1.0, Errc::invalid_argument,
          "H&E mosaic must have a finer pitch than the unstained mosaic");
  auto fail = [&](const std::string& why) {
    throw Error(Errc::registration_failed, why, "register-he");
  };
  const Raster he_small = downscale(to_gray(he_ws), factor);
  const Raster un = to_gray(unstained_ws);
  const BitMask he_mask = tissue_mask(he_small, opt.mask_smoothing_px),
                un_mask = tissue_mask(un, opt.mask_smoothing_px);
  if (he_mask.count() == 0 || un_mask.count() == 0) fail("empty tissue mask");

  HeRegistration out;
  const auto rot = estimate_rotation_scored(he_mask, un_mask, opt.rotation);
  out.rotation_ncc = rot.score;
  if (rot.score < opt.ncc_floor) fail("rotation mask NCC below floor");

  // Rotate the H&E mask about its centroid onto a canvas large enough to hold it.
  const Point ch = centroid(he_mask);
  const int side = static_cast<int>(std::ceil(std::hypot(he_small.width, he_small.height))) + 4;
  const Point cd = image_center(side, side);
  const Raster he_m = mask_to_raster(he_mask, un.pitch_um);
  const Raster canvas = warp(he_m, side, side,
                             [&](Point q) { return rotate_point(q - cd, -rot.angle_deg) + ch; }, 0.0f);
  int x0 = side, y0 = side, x1 = -1, y1 = -1;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      if (canvas.at(x, y) > 0.5f) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) fail("rotated tissue mask is empty");
  const int margin = 2;
  x0 = std::max(0, x0 - margin);
  y0 = std::max(0, y0 - margin);
  x1 = std::min(side - 1, x1 + margin);
  y1 = std::min(side - 1, y1 + margin);
  const Raster tmpl = crop(canvas, x0, y0, x1 - x0 + 1, y1 - y0 + 1);

  // Zero padding lets the tissue extend past the unstained frame.
  const int pad_x = tmpl.width, pad_y = tmpl.height;
  Raster padded(un.width + 2 * pad_x, un.height + 2 * pad_y, 1, un.pitch_um, 0.0f);
  for (int y = 0; y < un.height; ++y)
    for (int x = 0; x < un.width; ++x) padded.at(x + pad_x, y + pad_y) = un_mask.at(x, y) ? 1.0f : 0.0f;
  NccPeak place;
  try {
    place = ncc_match(tmpl, padded);
  } catch (const Error& e) {
    fail(e.what());
  }
  out.translation_ncc = place.value;
  if (place.value < opt.ncc_floor) fail("translation mask NCC below floor");

  // H&E pixel p -> downscaled s = (p + 0.5)/f - 0.5 -> canvas R(s - ch) + cd
  // -> unstained canvas - (x0, y0) + place - pad.
  const double a = 0.5 / factor - 0.5;
  const Point shift = cd - Point{double(x0), double(y0)} + place.subpixel - Point{double(pad_x), double(pad_y)};
  out.transform.scale = 1.0 / factor;
  out.transform.rotation_deg = rot.angle_deg;
  out.transform.translation = rotate_point(Point{a, a} - ch, rot.angle_deg) + shift;
  return out;
}

}  // namespace stiffmap
