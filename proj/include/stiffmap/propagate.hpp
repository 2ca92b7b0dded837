#pragma once

// Stiffness propagation by structural similarity: every pixel takes the mean
// modulus of the site whose structure ROI correlates best with the pixel's
// neighborhood. Also moving-window interpolation and comparison statistics.

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/forcecurve.hpp"
#include "stiffmap/ncc.hpp"
#include "stiffmap/parallel.hpp"
#include "stiffmap/random.hpp"
#include "stiffmap/raster.hpp"

namespace stiffmap {

inline constexpr double kDefaultCorrelationThreshold = 0.8;
inline constexpr int kDefaultRoiSide = 40;  // 13 um at 0.325 um/px

struct StructureROI {
  int site_id = 0;
  LabelMap labels;
  double mean_modulus_pa = 0.0;

  int side() const { return labels.width; }

  void validate() const {
    require(labels.width > 0 && labels.width == labels.height, Errc::invalid_argument,
            "structure ROI must be a non-empty square");
    require(std::isfinite(mean_modulus_pa), Errc::non_finite, "ROI mean modulus is not finite");
    labels.validate();
  }
};

// Square ROI of `side` pixels whose center pixel is `center` (top-left at
// center - side/2).
inline StructureROI extract_roi(const LabelMap& structure, int center_x, int center_y, int side, int site_id,
                                double mean_modulus_pa) {
  require(side > 0, Errc::invalid_argument, "ROI side must be positive");
  const int x0 = center_x - side / 2, y0 = center_y - side / 2;
  require(x0 >= 0 && y0 >= 0 && x0 + side <= structure.width && y0 + side <= structure.height,
          Errc::invalid_argument, "ROI for site " + std::to_string(site_id) + " extends past the structure map");
  StructureROI roi;
  roi.site_id = site_id;
  roi.mean_modulus_pa = mean_modulus_pa;
  const auto g = crop(static_cast<const Grid<std::uint8_t>&>(structure), x0, y0, side, side);
  roi.labels = LabelMap(side, side);
  roi.labels.values = g.values;
  return roi;
}

// Channel encoding of a label patch: one plane per class.
using ChannelStack = std::vector<Plane>;

inline ChannelStack one_hot(const LabelMap& labels) {
  ChannelStack out(kStructureClasses, Plane(labels.width, labels.height));
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    require(labels.values[i] < kStructureClasses, Errc::malformed, "label outside {0,1,2}");
    out[labels.values[i]].v[i] = 1.0;
  }
  return out;
}

struct EncodedROI {
  int site_id = 0;
  ChannelStack channels;
  double mean_modulus_pa = 0.0;
};

// Per-pixel best site. Maps are indexed by the ROI center, so pixel (x, y)
// holds the score of the placement whose top-left is (x - side/2, y - side/2);
// pixels no ROI fits around have best_site = -1.
struct CorrelationMap {
  int width = 0;
  int height = 0;
  Grid<int> best_site;      // index into the ROI list
  Grid<double> best_value;  // defined where best_site >= 0
  std::vector<int> skipped;  // ROI indices left out for zero label variance
  std::vector<std::string> warnings;
};

// Averaged channel NCC of every ROI at every full-overlap placement.
struct CorrelationStack {
  int width = 0;
  int height = 0;
  struct Entry {
    bool skipped = false;
    int side = 0;
    NccScores scores;  // (width - side + 1) x (height - side + 1)
  };
  std::vector<Entry> entries;
  std::vector<std::string> warnings;
};

inline CorrelationStack correlation_scores(std::span<const EncodedROI> rois, const ChannelStack& structure,
                                           NccMethod method = NccMethod::automatic) {
  require(!rois.empty(), Errc::invalid_argument, "correlation needs at least one ROI");
  require(!structure.empty(), Errc::invalid_argument, "structure map has no channels");
  const int w = structure[0].width, h = structure[0].height;
  for (const auto& p : structure)
    require(p.width == w && p.height == h, Errc::invalid_argument, "structure channels differ in size");
  CorrelationStack st;
  st.width = w;
  st.height = h;

  // Image-side caches, one per channel, built on first use.
  std::vector<std::unique_ptr<NccImage>> images(structure.size());
  auto image = [&](std::size_t c) -> const NccImage& {
    if (!images[c]) images[c] = std::make_unique<NccImage>(structure[c], method != NccMethod::direct);
    return *images[c];
  };

  for (std::size_t k = 0; k < rois.size(); ++k) {
    const auto& roi = rois[k];
    require(roi.channels.size() == structure.size(), Errc::invalid_argument,
            "ROI channel count does not match the structure map");
    const int side = roi.channels[0].width;
    require(side > 0 && roi.channels[0].height == side, Errc::invalid_argument, "ROI must be square");
    require(side <= w && side <= h, Errc::invalid_argument,
            "ROI for site " + std::to_string(roi.site_id) + " is larger than the structure map");
    CorrelationStack::Entry e;
    e.side = side;
    std::size_t used = 0;
    for (std::size_t c = 0; c < structure.size(); ++c) {
      const Plane& t = roi.channels[c];
      double mean = 0.0;
      for (double v : t.v) mean += v;
      mean /= static_cast<double>(t.v.size());
      double ss = 0.0;
      for (double v : t.v) ss += (v - mean) * (v - mean);
      if (!(ss > kNccVarianceFloor * static_cast<double>(t.v.size()))) continue;
      auto s = image(c).scores(t, nullptr, method);
      if (used == 0) e.scores = std::move(s);
      else
        for (std::size_t i = 0; i < s.values.size(); ++i) e.scores.values[i] += s.values[i];
      ++used;
    }
    if (used == 0) {
      e.skipped = true;
      st.warnings.push_back("site " + std::to_string(roi.site_id) + ": ROI has a single structure class; skipped");
    } else {
      for (auto& v : e.scores.values) v /= static_cast<double>(used);
    }
    st.entries.push_back(std::move(e));
  }
  return st;
}

// Argmax over the ROIs with include[k] set (all when empty). Ties within
// kNccTieEpsilon of the maximum go to the lowest index.
inline CorrelationMap reduce_correlation(const CorrelationStack& st, const std::vector<bool>& include = {}) {
  CorrelationMap m;
  m.width = st.width;
  m.height = st.height;
  m.best_site = Grid<int>(st.width, st.height, -1);
  m.best_value = Grid<double>(st.width, st.height, 0.0);
  m.warnings = st.warnings;
  std::vector<std::size_t> active;
  for (std::size_t k = 0; k < st.entries.size(); ++k) {
    if (st.entries[k].skipped) m.skipped.push_back(static_cast<int>(k));
    else if (include.empty() || include[k]) active.push_back(k);
  }
  require(!active.empty(), Errc::propagation_failed, "every ROI was skipped");
  parallel_for(0, st.height, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < st.width; ++x) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t k : active) {
        const auto& e = st.entries[k];
        const int u = x - e.side / 2, v = y - e.side / 2;
        if (u < 0 || v < 0 || u >= e.scores.width || v >= e.scores.height) continue;
        best = std::max(best, e.scores.at(u, v));
      }
      if (best == -std::numeric_limits<double>::infinity()) continue;
      for (std::size_t k : active) {
        const auto& e = st.entries[k];
        const int u = x - e.side / 2, v = y - e.side / 2;
        if (u < 0 || v < 0 || u >= e.scores.width || v >= e.scores.height) continue;
        if (e.scores.at(u, v) >= best - kNccTieEpsilon) {
          m.best_site.at(x, y) = static_cast<int>(k);
          m.best_value.at(x, y) = e.scores.at(u, v);
          break;
        }
      }
    }
  });
  return m;
}

inline CorrelationMap correlation_argmax(std::span<const EncodedROI> rois, const ChannelStack& structure,
                                         NccMethod method = NccMethod::automatic) {
  return reduce_correlation(correlation_scores(rois, structure, method));
}

inline std::vector<EncodedROI> encode_rois(std::span<const StructureROI> rois) {
  std::vector<EncodedROI> out;
  out.reserve(rois.size());
  for (const auto& r : rois) {
    r.validate();
    out.push_back({r.site_id, one_hot(r.labels), r.mean_modulus_pa});
  }
  return out;
}

inline CorrelationStack correlation_scores(std::span<const StructureROI> rois, const LabelMap& structure,
                                           NccMethod method = NccMethod::automatic) {
  const auto enc = encode_rois(rois);
  return correlation_scores(std::span<const EncodedROI>(enc), one_hot(structure), method);
}

inline CorrelationMap correlation_argmax(std::span<const StructureROI> rois, const LabelMap& structure,
                                         NccMethod method = NccMethod::automatic) {
  return reduce_correlation(correlation_scores(rois, structure, method));
}

// ---------------------------------------------------------------------------
// Stiffness maps

enum class Provenance : std::uint8_t { unassigned = 0, measured = 1, propagated = 2, interpolated = 3 };

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::unassigned: return "unassigned";
    case Provenance::measured: return "measured";
    case Provenance::propagated: return "propagated";
    case Provenance::interpolated: return "interpolated";
  }
  return "?";
}

// Bit set over Provenance values.
struct ProvenanceSet {
  std::uint8_t bits = 0;

  static ProvenanceSet of(std::initializer_list<Provenance> ps) {
    ProvenanceSet s;
    for (auto p : ps) s.bits |= static_cast<std::uint8_t>(1u << static_cast<int>(p));
    return s;
  }
  bool has(Provenance p) const { return (bits >> static_cast<int>(p)) & 1u; }
};

inline ProvenanceSet statistics_default() {
  return ProvenanceSet::of({Provenance::measured, Provenance::propagated});
}

struct StiffnessMap {
  int width = 0;
  int height = 0;
  std::vector<double> values_pa;          // 0 where unassigned
  std::vector<Provenance> provenance;

  StiffnessMap() = default;
  StiffnessMap(int w, int h)
      : width(w), height(h), values_pa(static_cast<std::size_t>(w) * h, 0.0),
        provenance(static_cast<std::size_t>(w) * h, Provenance::unassigned) {}

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  std::size_t count(Provenance p) const {
    return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), p));
  }
};

// A registered force-map footprint in structure-map pixels. The grid is
// rows x cols cells over a square of side_px, centered at center_px and
// rotated by rotation_deg.
struct ScanArea {
  int site_id = 0;
  Point center_px;
  double side_px = 0.0;
  double rotation_deg = 0.0;
  int rows = 0;
  int cols = 0;
  std::vector<double> moduli_pa;
  std::vector<std::uint8_t> valid;

  // Cell index covering pixel (x, y), or -1.
  int cell_at(int x, int y) const {
    const Point local = rotate_point(Point{double(x), double(y)} - center_px, -rotation_deg);
    const double u = local.x / side_px + 0.5, v = local.y / side_px + 0.5;
    if (!(u >= 0.0 && u < 1.0 && v >= 0.0 && v < 1.0)) return -1;
    const int c = std::min(cols - 1, static_cast<int>(u * cols));
    const int r = std::min(rows - 1, static_cast<int>(v * rows));
    return r * cols + c;
  }
};

inline ScanArea scan_area(const MeasurementSite& site, Point center_px, double pitch_um,
                          double rotation_deg = 0.0) {
  require(pitch_um > 0.0, Errc::invalid_argument, "pixel pitch must be positive");
  return {site.site_id, center_px, site.area_um / pitch_um, rotation_deg,
          site.rows,    site.cols,  site.moduli_pa,          site.valid};
}

// Pixels at or above `threshold` take their best site's mean; valid cells of
// the scan areas then override with measured values.
inline StiffnessMap propagate_stiffness(const CorrelationMap& cmap, std::span<const StructureROI> rois,
                                        double threshold, std::span<const ScanArea> scans = {}) {
  require(std::isfinite(threshold), Errc::invalid_argument, "threshold must be finite");
  StiffnessMap out(cmap.width, cmap.height);
  std::size_t propagated = 0;
  for (int y = 0; y < cmap.height; ++y)
    for (int x = 0; x < cmap.width; ++x) {
      const int k = cmap.best_site.at(x, y);
      if (k < 0 || cmap.best_value.at(x, y) < threshold) continue;
      require(static_cast<std::size_t>(k) < rois.size(), Errc::invalid_argument,
              "correlation map refers to a missing ROI");
      const auto i = out.index(x, y);
      out.values_pa[i] = rois[k].mean_modulus_pa;
      out.provenance[i] = Provenance::propagated;
      ++propagated;
    }
  if (propagated == 0)
    throw Error(Errc::no_coverage, "no pixel reaches correlation threshold " + std::to_string(threshold));
  for (const auto& s : scans) {
    require(s.rows > 0 && s.cols > 0 && s.side_px > 0.0 &&
                s.moduli_pa.size() == static_cast<std::size_t>(s.rows) * s.cols && s.valid.size() == s.moduli_pa.size(),
            Errc::invalid_argument, "malformed scan area");
    const double reach = s.side_px * std::numbers::sqrt2 / 2.0 + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(s.center_px.x - reach)));
    const int x1 = std::min(out.width - 1, static_cast<int>(std::ceil(s.center_px.x + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(s.center_px.y - reach)));
    const int y1 = std::min(out.height - 1, static_cast<int>(std::ceil(s.center_px.y + reach)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const int c = s.cell_at(x, y);
        if (c < 0 || !s.valid[c]) continue;
        const auto i = out.index(x, y);
        out.values_pa[i] = s.moduli_pa[c];
        out.provenance[i] = Provenance::measured;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Moving-window least squares

// Each unassigned pixel gets the least-squares plane through the measured and
// propagated pixels of the window_px square centered on it (top-left at
// p - window_px/2). Fewer than min_points sources leave it unassigned;
// collinear sources fall back to their mean.
inline StiffnessMap interpolate_mwls(const StiffnessMap& in, int window_px = 64, int min_points = 8) {
  require(window_px >= 1 && min_points >= 1, Errc::invalid_argument, "window and min_points must be positive");
  const int w = in.width, h = in.height;
  // Integral images of the source moments; coordinates relative to the map center.
  const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
  constexpr int kMoments = 9;  // n, x, y, v, xx, xy, yy, xv, yv
  std::vector<double> I(static_cast<std::size_t>(w + 1) * (h + 1) * kMoments, 0.0);
  auto at = [&](int x, int y) { return &I[(static_cast<std::size_t>(y) * (w + 1) + x) * kMoments]; };
  for (int y = 0; y < h; ++y) {
    double row[kMoments] = {};
    for (int x = 0; x < w; ++x) {
      const auto i = in.index(x, y);
      const auto p = in.provenance[i];
      if (p == Provenance::measured || p == Provenance::propagated) {
        const double dx = x - cx, dy = y - cy, v = in.values_pa[i];
        const double m[kMoments] = {1, dx, dy, v, dx * dx, dx * dy, dy * dy, dx * v, dy * v};
        for (int q = 0; q < kMoments; ++q) row[q] += m[q];
      }
      double* dst = at(x + 1, y + 1);
      const double* up = at(x + 1, y);
      for (int q = 0; q < kMoments; ++q) dst[q] = up[q] + row[q];
    }
  }
  StiffnessMap out = in;
  parallel_for(0, h, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < w; ++x) {
      const auto i = in.index(x, y);
      if (in.provenance[i] != Provenance::unassigned) continue;
      const int x0 = std::max(0, x - window_px / 2), y0 = std::max(0, y - window_px / 2);
      const int x1 = std::min(w, x - window_px / 2 + window_px), y1 = std::min(h, y - window_px / 2 + window_px);
      double s[kMoments];
      const double *a = at(x1, y1), *b = at(x0, y1), *c = at(x1, y0), *d = at(x0, y0);
      for (int q = 0; q < kMoments; ++q) s[q] = a[q] - b[q] - c[q] + d[q];
      const double n = s[0];
      if (n < min_points - 0.5) continue;
      const double mx = s[1] / n, my = s[2] / n, mv = s[3] / n;
      const double sxx = s[4] - n * mx * mx, sxy = s[5] - n * mx * my, syy = s[6] - n * my * my;
      const double sxv = s[7] - n * mx * mv, syv = s[8] - n * my * mv;
      const double det = sxx * syy - sxy * sxy;
      double value = mv;
      if (det > 1e-9 * (sxx + syy) * (sxx + syy) && det > 0.0) {
        const double gx = (syy * sxv - sxy * syv) / det;
        const double gy = (sxx * syv - sxy * sxv) / det;
        value = mv + gx * ((x - cx) - mx) + gy * ((y - cy) - my);
      }
      out.values_pa[i] = value;
      out.provenance[i] = Provenance::interpolated;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct Summary {
  double mean_pa = 0.0;
  double std_pa = 0.0;  // population
  std::size_t n = 0;
};

inline std::vector<double> select_values(const StiffnessMap& m, ProvenanceSet include) {
  std::vector<double> v;
  for (std::size_t i = 0; i < m.values_pa.size(); ++i)
    if (m.provenance[i] != Provenance::unassigned && include.has(m.provenance[i])) v.push_back(m.values_pa[i]);
  return v;
}

inline Summary summarize(const StiffnessMap& m, ProvenanceSet include = statistics_default()) {
  const auto v = select_values(m, include);
  require(!v.empty(), Errc::empty_selection, "no pixels with the requested provenance");
  Summary s;
  s.n = v.size();
  s.mean_pa = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(s.n);
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean_pa) * (x - s.mean_pa);
  s.std_pa = std::sqrt(ss / static_cast<double>(s.n));
  return s;
}

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

// Two-sided Welch t-test. Two constant samples: p = 1 when equal, error otherwise.
inline WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  require(a.size() >= 2 && b.size() >= 2, Errc::insufficient_samples, "t-test needs two values per sample");
  auto moments = [](std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / (n - 1.0)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double qa = va / na, qb = vb / nb;
  WelchResult r;
  if (qa + qb == 0.0) {
    require(ma == mb, Errc::degenerate, "both samples are constant with different values");
    r.t = 0.0;
    r.df = na + nb - 2.0;
    r.p = 1.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(qa + qb);
  r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

struct Comparison {
  std::vector<double> p_values;
  std::vector<double> t_values;
  double mean_p = 0.0;
};

// Repeated Welch tests on n_points pixels drawn without replacement from each
// map's measured and propagated pixels.
inline Comparison compare_samples(const StiffnessMap& a, const StiffnessMap& b, int n_points = 50, int trials = 100,
                                  std::uint64_t seed = 0, ProvenanceSet include = statistics_default()) {
  require(n_points >= 2 && trials >= 1, Errc::invalid_argument, "need n_points >= 2 and trials >= 1");
  require(!include.has(Provenance::interpolated), Errc::invalid_argument,
          "interpolated pixels cannot enter statistics");
  auto va = select_values(a, include), vb = select_values(b, include);
  require(va.size() >= static_cast<std::size_t>(n_points) && vb.size() >= static_cast<std::size_t>(n_points),
          Errc::insufficient_samples,
          "need " + std::to_string(n_points) + " pixels per map, have " + std::to_string(va.size()) + " and " +
              std::to_string(vb.size()));
  Rng rng(seed);
  std::vector<std::size_t> ia(va.size()), ib(vb.size());
  Comparison out;
  std::vector<double> da(n_points), db(n_points);
  auto draw = [&](const std::vector<double>& src, std::vector<std::size_t>& idx, std::vector<double>& dst) {
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < n_points; ++i) {
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      dst[i] = src[idx[i]];
    }
  };
  for (int t = 0; t < trials; ++t) {
    draw(va, ia, da);
    draw(vb, ib, db);
    const auto r = welch_t_test(da, db);
    out.p_values.push_back(r.p);
    out.t_values.push_back(r.t);
  }
  out.mean_p = std::accumulate(out.p_values.begin(), out.p_values.end(), 0.0) / trials;
  return out;
}

// ---------------------------------------------------------------------------
// Leave-one-out

struct LoocvFold {
  int site_id = 0;
  double mean_pa = 0.0;
  double delta_percent = 0.0;
  double share = 0.0;  // fraction of propagated pixels this site holds in the full run
  bool dominant = false;
  bool failed = false;
  std::string error;
};

struct LoocvReport {
  double full_mean_pa = 0.0;
  std::size_t full_pixels = 0;
  std::vector<LoocvFold> folds;
};

// A site is dominant when its share of the full-run propagated pixels exceeds
// twice the even share.
inline LoocvReport loocv(std::span<const StructureROI> rois, const CorrelationStack& stack, double threshold) {
  require(rois.size() >= 2 && rois.size() == stack.entries.size(), Errc::invalid_argument,
          "leave-one-out needs at least two sites");
  auto propagated_mean = [&](const CorrelationMap& cm, std::vector<std::size_t>* per_site) {
    const auto sm = propagate_stiffness(cm, rois, threshold);
    if (per_site) {
      per_site->assign(rois.size(), 0);
      for (int y = 0; y < cm.height; ++y)
        for (int x = 0; x < cm.width; ++x)
          if (sm.provenance[sm.index(x, y)] == Provenance::propagated) ++(*per_site)[cm.best_site.at(x, y)];
    }
    return summarize(sm, ProvenanceSet::of({Provenance::propagated}));
  };
  LoocvReport rep;
  std::vector<std::size_t> per_site;
  const auto full = propagated_mean(reduce_correlation(stack), &per_site);
  rep.full_mean_pa = full.mean_pa;
  rep.full_pixels = full.n;
  const double even = 1.0 / static_cast<double>(rois.size());
  rep.folds.resize(rois.size());
  for (std::size_t k = 0; k < rois.size(); ++k) {
    auto& f = rep.folds[k];
    f.site_id = rois[k].site_id;
    f.share = static_cast<double>(per_site[k]) / static_cast<double>(full.n);
    f.dominant = f.share > 2.0 * even;
    std::vector<bool> include(rois.size(), true);
    include[k] = false;
    try {
      const auto s = propagated_mean(reduce_correlation(stack, include), nullptr);
      f.mean_pa = s.mean_pa;
      f.delta_percent = 100.0 * (s.mean_pa - full.mean_pa) / full.mean_pa;
    } catch (const Error& e) {
      f.failed = true;
      f.error = e.what();
      f.mean_pa = f.delta_percent = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return rep;
}

inline LoocvReport loocv(std::span<const StructureROI> rois, const LabelMap& structure, double threshold) {
  return loocv(rois, correlation_scores(rois, structure), threshold);
}

}  // namespace stiffmap
