// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "stiffmap/forcecurve.hpp"
#include "stiffmap/mlp.hpp"
#include "stiffmap/ncc.hpp"
#include "stiffmap/propagate.hpp"
#include "stiffmap/register.hpp"
#include "stiffmap/segment.hpp"
#include "stiffmap/stitch.hpp"
#include "stiffmap/synth.hpp"
#include "test_util.hpp"

namespace sm = stiffmap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. NCC oracle equivalence

sm::Raster noise(int w, int h, sm::Rng& rng) {
  sm::Raster r(w, h, 1, 1.0);
  for (auto& v : r.data) v = static_cast<float>(rng.uniform());
  return r;
}

// Direct two-pass zero-mean NCC; a constant image window scores 0.
double oracle_ncc(const sm::Raster& t, const sm::Raster& img, int u, int v) {
  const double n = double(t.width) * t.height;
  double st = 0, si = 0;
  for (int y = 0; y < t.height; ++y)
    for (int x = 0; x < t.width; ++x) {
      st += t.at(x, y);
      si += img.at(u + x, v + y);
    }
  double num = 0, dt = 0, di = 0;
  for (int y = 0; y < t.height; ++y)
    for (int x = 0; x < t.width; ++x) {
      const double a = t.at(x, y) - st / n, b = img.at(u + x, v + y) - si / n;
      num += a * b;
      dt += a * a;
      di += b * b;
    }
  return di <= 1e-10 * n ? 0.0 : num / std::sqrt(dt * di);
}

sm::LabelMap random_labels(int w, int h, sm::Rng& rng, bool blobs) {
  sm::LabelMap m(w, h);
  if (blobs) {
    const auto tex = sm::synth::random_texture(w, h, rng, 0.0, 1.0);
    for (std::size_t i = 0; i < m.values.size(); ++i)
      m.values[i] = static_cast<std::uint8_t>(tex.data[i] < 0.4f ? 0 : tex.data[i] < 0.6f ? 1 : 2);
  } else {
    for (auto& v : m.values) v = static_cast<std::uint8_t>(rng.below(3));
  }
  return m;
}

// Channel-averaged NCC of every ROI at every full-overlap placement, stored at
// the ROI center; argmax over ROIs with ties to the lowest index.
void oracle_argmax(const std::vector<sm::StructureROI>& rois, const sm::LabelMap& s, std::vector<int>& site,
                   std::vector<double>& value) {
  const int w = s.width, h = s.height;
  site.assign(static_cast<std::size_t>(w) * h, -1);
  value.assign(site.size(), 0.0);
  std::vector<double> best(site.size(), -std::numeric_limits<double>::infinity());
  std::vector<std::vector<double>> score(rois.size(), std::vector<double>(site.size(), std::nan("")));
  for (std::size_t k = 0; k < rois.size(); ++k) {
    const int n = rois[k].side();
    const double nn = double(n) * n;
    for (int v = 0; v + n <= h; ++v)
      for (int u = 0; u + n <= w; ++u) {
        double acc = 0;
        int used = 0;
        for (int c = 0; c < sm::kStructureClasses; ++c) {
          double mt = 0, mw = 0;
          for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
              mt += rois[k].labels.at(x, y) == c;
              mw += s.at(u + x, v + y) == c;
            }
          mt /= nn;
          mw /= nn;
          double num = 0, a2 = 0, b2 = 0;
          for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
              const double a = (rois[k].labels.at(x, y) == c) - mt, b = (s.at(u + x, v + y) == c) - mw;
              num += a * b;
              a2 += a * a;
              b2 += b * b;
            }
          if (a2 <= 1e-10 * nn) continue;  // channel absent from the ROI
          ++used;
          if (b2 > 1e-10 * nn) acc += num / std::sqrt(a2 * b2);
        }
        if (used) score[k][static_cast<std::size_t>(v + n / 2) * w + u + n / 2] = acc / used;
      }
  }
  for (std::size_t i = 0; i < site.size(); ++i) {
    for (const auto& sk : score)
      if (!std::isnan(sk[i])) best[i] = std::max(best[i], sk[i]);
    for (std::size_t k = 0; k < rois.size() && std::isfinite(best[i]); ++k)
      if (!std::isnan(score[k][i]) && score[k][i] >= best[i] - 1e-9) {
        site[i] = static_cast<int>(k);
        value[i] = score[k][i];
        break;
      }
  }
}

Outcome ncc_oracle() {
  sm::Rng rng(2024);
  double max_delta = 0.0;
  int argmax_mismatch = 0, corr_checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    // Template matching.
    const int w = 10 + static_cast<int>(rng.below(55)), h = 10 + static_cast<int>(rng.below(55));
    const int tw = 2 + static_cast<int>(rng.below(8)), th = 2 + static_cast<int>(rng.below(8));
    const auto img = noise(w, h, rng);
    const auto t = trial % 3 == 0 ? sm::crop(img, static_cast<int>(rng.below(w - tw + 1)),
                                             static_cast<int>(rng.below(h - th + 1)), tw, th)
                                  : noise(tw, th, rng);
    const int sw = w - tw + 1, sh = h - th + 1;
    std::vector<double> o(static_cast<std::size_t>(sw) * sh);
    for (int v = 0; v < sh; ++v)
      for (int u = 0; u < sw; ++u) o[static_cast<std::size_t>(v) * sw + u] = oracle_ncc(t, img, u, v);
    // Oracle argmax, ties to the lexicographically smallest (x, y).
    const double top = *std::max_element(o.begin(), o.end());
    int ox = -1, oy = -1;
    for (int u = 0; u < sw && ox < 0; ++u)
      for (int v = 0; v < sh; ++v)
        if (o[static_cast<std::size_t>(v) * sw + u] >= top - 1e-9) {
          ox = u;
          oy = v;
          break;
        }
    for (auto method : {sm::NccMethod::direct, sm::NccMethod::fft}) {
      const auto s = sm::ncc_scores(t, img, nullptr, method);
      for (int v = 0; v < sh; ++v)
        for (int u = 0; u < sw; ++u)
          max_delta = std::max(max_delta, std::abs(s.at(u, v) - o[static_cast<std::size_t>(v) * sw + u]));
      const auto p = sm::ncc_match(t, img, nullptr, method);
      argmax_mismatch += p.x != ox || p.y != oy;
    }

    // Structure correlation.
    const int lw = 10 + static_cast<int>(rng.below(31)), lh = 10 + static_cast<int>(rng.below(31));
    const auto labels = random_labels(lw, lh, rng, trial % 2 == 0);
    std::vector<sm::StructureROI> rois;
    const int n_rois = 1 + static_cast<int>(rng.below(4));
    for (int k = 0; k < n_rois; ++k) {
      const int side = 3 + static_cast<int>(rng.below(7));
      if (k > 0 && rng.below(4) == 0) {
        rois.push_back(rois.front());  // duplicate: exercises the tie rule
        rois.back().site_id = k;
        continue;
      }
      const int cx = side / 2 + static_cast<int>(rng.below(lw - side + 1));
      const int cy = side / 2 + static_cast<int>(rng.below(lh - side + 1));
      rois.push_back(sm::extract_roi(labels, cx, cy, side, k, 100.0 * (k + 1)));
    }
    std::vector<int> osite;
    std::vector<double> oval;
    oracle_argmax(rois, labels, osite, oval);
    if (std::all_of(osite.begin(), osite.end(), [](int k) { return k < 0; })) continue;  // all ROIs one class
    ++corr_checked;
    for (auto method : {sm::NccMethod::direct, sm::NccMethod::fft}) {
      const auto cm = sm::correlation_argmax(rois, labels, method);
      for (int y = 0; y < lh; ++y)
        for (int x = 0; x < lw; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * lw + x;
          argmax_mismatch += cm.best_site.at(x, y) != osite[i];
          if (osite[i] >= 0 && cm.best_site.at(x, y) == osite[i])
            max_delta = std::max(max_delta, std::abs(cm.best_value.at(x, y) - oval[i]));
        }
    }
  }
  return {max_delta <= 1e-6 && argmax_mismatch == 0 && corr_checked >= 150,
          fmt("200 instances (%d with correlation), max |delta| %.2e, argmax mismatches %d", corr_checked, max_delta,
              argmax_mismatch)};
}

// ---------------------------------------------------------------------------
// 2. Registration accuracy

Outcome registration() {
  const double pitch = 1.625;
  int within = 0;
  std::vector<double> errors;
  int failures = 0;
  for (int seed = 1; seed <= 50; ++seed) {
    sm::Rng rng(static_cast<std::uint64_t>(7000 + seed));
    const auto ws = sm::synth::random_texture(600, 600, rng, 0.2, 0.9, pitch);
    sm::synth::CantileverSceneParams p;
    p.rotation_deg = rng.uniform(-10.0, 10.0);
    const double r = 200.0 * std::sqrt(rng.uniform()), a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    p.fov_offset = sm::Point{252.0, 252.0} + sm::Point{r * std::cos(a), r * std::sin(a)};
    p.cantilever_shift = {rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0)};
    const auto scene = sm::synth::make_cantilever_scene(ws, p);
    try {
      const auto res = sm::localize_contact_point(scene.bead_hi, scene.cantilever_lo, scene.afm_fov, ws, p.mag_ratio);
      const double err = pitch * sm::norm(res.position_px - scene.contact_ws_px);
      errors.push_back(err);
      within += err <= 1.5;
    } catch (const sm::Error&) {
      ++failures;
    }
  }
  std::sort(errors.begin(), errors.end());
  const double median = errors.empty() ? NAN : errors[errors.size() / 2];
  const double worst = errors.empty() ? NAN : errors.back();
  return {within >= 48, fmt("%d/50 within 1.5 um (median %.2f um, max %.2f um, %d failed)", within, median, worst,
                            failures)};
}

// ---------------------------------------------------------------------------
// 3. Stitching

sm::Raster smooth_noise(int w, int h, sm::Rng& rng) {
  auto r = sm::gaussian_blur(noise(w, h, rng), 2.0);
  const auto [lo, hi] = std::minmax_element(r.data.begin(), r.data.end());
  const float l = *lo, s = *hi - *lo;
  for (auto& v : r.data) v = (v - l) / s;
  return r;
}

Outcome stitching() {
  const int rows = 2, cols = 3, tw = 256, th = 200, jitter = 5;  // 20% overlap keeps >= 32 px
  const double overlap = 0.2;
  double worst_pos = 0.0, worst_rms = 0.0;
  for (int seed = 1; seed <= 20; ++seed) {
    sm::Rng rng(static_cast<std::uint64_t>(300 + seed));
    const int sx = static_cast<int>(std::lround(tw * (1 - overlap))), sy = static_cast<int>(std::lround(th * (1 - overlap)));
    const int margin = jitter + 1;
    const auto source = smooth_noise(sx * (cols - 1) + tw + 2 * margin, sy * (rows - 1) + th + 2 * margin, rng);
    sm::TileLayout layout;
    layout.overlap = overlap;
    std::vector<std::pair<int, int>> pos;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const int jx = static_cast<int>(rng.below(2 * jitter + 1)) - jitter;
        const int jy = static_cast<int>(rng.below(2 * jitter + 1)) - jitter;
        pos.emplace_back(margin + c * sx + jx, margin + r * sy + jy);
        layout.tiles.push_back({sm::crop(source, pos.back().first, pos.back().second, tw, th), r, c});
      }
    const auto res = sm::stitch_tiles(layout);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      worst_pos = std::max(worst_pos, std::abs(res.positions[i].x - (pos[i].first - pos[0].first)));
      worst_pos = std::max(worst_pos, std::abs(res.positions[i].y - (pos[i].second - pos[0].second)));
    }
    // Mosaic pixel (X, Y) is source pixel (X - origin + tile 0 position).
    double sse = 0;
    std::size_t n = 0;
    for (int y = 0; y < res.image.height; ++y)
      for (int x = 0; x < res.image.width; ++x) {
        const int qx = x - res.origin_x + pos[0].first, qy = y - res.origin_y + pos[0].second;
        int cover = 0;
        for (auto [px, py] : pos) cover += qx >= px && qx < px + tw && qy >= py && qy < py + th;
        if (cover != 1) continue;
        sse += std::pow(double(res.image.at(x, y)) - source.at(qx, qy), 2);
        ++n;
      }
    worst_rms = std::max(worst_rms, std::sqrt(sse / std::max<std::size_t>(n, 1)));
  }
  return {worst_pos <= 0.5 && worst_rms <= 1e-3,
          fmt("20 seeds, worst position error %.3f px, worst RMS outside blends %.2e", worst_pos, worst_rms)};
}

// ---------------------------------------------------------------------------
// 4. Hertz fitting

// F = 4/3 E/(1 - nu^2) sqrt(R) d^1.5 in SI units, returned in nN.
double oracle_force_nN(double e_pa, double delta_um, double radius_um, double nu) {
  if (delta_um <= 0) return 0;
  return 1e9 * 4.0 / 3.0 * e_pa / (1 - nu * nu) * std::sqrt(radius_um * 1e-6) * std::pow(delta_um * 1e-6, 1.5);
}

sm::ForceCurve oracle_curve(double e_pa, double contact_um, int n = 256) {
  sm::ForceCurve c;
  for (int i = 0; i < n; ++i) {
    const double s = 2.0 - 4.0 * i / (n - 1);
    c.separation_um.push_back(s);
    c.force_nN.push_back(oracle_force_nN(e_pa, contact_um - s, 5.0, 0.5));
  }
  return c;
}

Outcome hertz() {
  const sm::IndenterSpec spec;  // 5 um bead, nu 0.5
  double worst_clean = 0.0;
  for (double e : {100.0, 369.0, 659.0, 1500.0, 5000.0})
    for (double contact : {-0.4, 0.0, 0.3}) {
      const auto fit = sm::fit_hertz(oracle_curve(e, contact), spec);
      worst_clean = std::max(worst_clean, std::abs(fit.modulus_pa - e) / e);
    }
  double worst_noisy = 0.0;
  int fit_failures = 0;
  for (double e : {369.0, 659.0}) {
    sm::Rng rng(e == 369.0 ? 41 : 42);
    double sum = 0;
    int n = 0;
    for (int rep = 0; rep < 200; ++rep) {
      auto c = oracle_curve(e, 0.0);
      double power = 0;
      int post = 0;
      for (std::size_t i = 0; i < c.size(); ++i)
        if (c.separation_um[i] < 0) {
          power += c.force_nN[i] * c.force_nN[i];
          ++post;
        }
      const double sd = std::sqrt(power / post / 100.0);  // 20 dB
      for (auto& f : c.force_nN) f += sd * rng.normal();
      try {
        sum += sm::fit_hertz(c, spec).modulus_pa;
        ++n;
      } catch (const sm::Error&) {
        ++fit_failures;
      }
    }
    worst_noisy = std::max(worst_noisy, std::abs(sum / n - e) / e);
  }
  return {worst_clean <= 1e-3 && worst_noisy <= 0.02 && fit_failures == 0,
          fmt("noiseless worst %.4f%%, 20 dB mean of 200 worst %.2f%%, %d fit failures", 100 * worst_clean,
              100 * worst_noisy, fit_failures)};
}

// ---------------------------------------------------------------------------
// 5. Classifier

sm::TrainingSet separable(std::size_t n, std::uint64_t seed) {
  sm::Rng rng(seed);
  sm::TrainingSet ts;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.below(3));
    sm::Color3 x;
    if (y == 0) x = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.1), rng.uniform(0.9, 1.0)};
    else if (y == 1) x = {rng.uniform(0.7, 0.8), rng.uniform(0.4, 0.8), rng.uniform(0.3, 0.6)};
    else x = {rng.uniform(0.88, 0.98), rng.uniform(0.2, 0.5), rng.uniform(0.7, 0.85)};
    ts.inputs.push_back(x);
    ts.labels.push_back(static_cast<std::uint8_t>(y));
  }
  return ts;
}

Outcome classifier() {
  sm::Rng rng(5);
  const auto small = separable(128, 6);
  std::vector<std::size_t> idx(small.size());
  std::iota(idx.begin(), idx.end(), 0);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    auto p = sm::mlp_init(rng);
    for (auto& b : p.b1) b = rng.uniform(-0.3, 0.3);
    for (auto& b : p.b2) b = rng.uniform(-0.3, 0.3);
    p.input_mean = {rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6)};
    p.input_scale = {rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6)};
    sm::MlpParams g, scratch;
    sm::mlp_loss_and_gradient(p, small, idx, g);
    for (std::size_t i = 0; i < sm::MlpParams::size(); ++i) {
      const double h = 1e-6, keep = p[i];
      p[i] = keep + h;
      const double up = sm::mlp_loss_and_gradient(p, small, idx, scratch);
      p[i] = keep - h;
      const double dn = sm::mlp_loss_and_gradient(p, small, idx, scratch);
      p[i] = keep;
      const double fd = (up - dn) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6}));
    }
  }
  sm::TrainOptions opt;
  opt.seed = 9;
  const auto m = sm::train_classifier(separable(400000, 10), opt);
  const bool sizes = sm::kMlpHidden == 8 && opt.batch_size == 8192 && opt.epochs == 20;
  return {worst <= 1e-4 && m.train_accuracy >= 0.99 && sizes,
          fmt("gradient worst rel. error %.1e, training accuracy %.4f (hidden %d, batch %d, %d epochs)", worst,
              m.train_accuracy, sm::kMlpHidden, opt.batch_size, opt.epochs)};
}

// ---------------------------------------------------------------------------
// 6-8. Synthetic propagation benchmark

struct Benchmark {
  sm::synth::World world;
  sm::LabelMap labels;  // predicted
  double label_accuracy = 0.0;
  std::vector<int> site_texture;
  std::vector<sm::StructureROI> rois;
  std::vector<sm::ScanArea> scans;
  sm::CorrelationStack stack;
  sm::StiffnessMap map;
  double seconds = 0.0;
};

Benchmark build_benchmark() {
  const auto t0 = std::chrono::steady_clock::now();
  Benchmark b;
  sm::synth::SampleParams p;  // 369 Pa and 659 Pa texture means
  const double pitch = p.he_pitch_um;
  sm::Rng root(2026);
  sm::Rng rw = root.fork(1), rh = root.fork(2), rs = root.fork(3), rc = root.fork(4);
  b.world = sm::synth::make_world(1024, p, rw);
  const auto& w = b.world;

  // Segmentation from the rendered H&E image.
  const sm::Raster hsv = sm::rgb_to_hsv(sm::synth::render_he(w, pitch, rh));
  sm::KMeansOptions ko;
  ko.seed = 3;
  const auto clusters = sm::kmeans_hsv(sm::sample_pixels(hsv, 200000, 4), ko);
  const auto pseudo = sm::pseudocolor(hsv, clusters);
  const auto ts = sm::make_training_set(hsv, pseudo, clusters, sm::synth::default_assignment(clusters));
  sm::TrainOptions to;
  to.batch_size = 4 * 1024;
  to.seed = 5;
  const auto model = sm::train_classifier(ts, to);
  b.labels = sm::predict_structure(sm::hsv_to_rgb(hsv), model);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < b.labels.values.size(); ++i) agree += b.labels.values[i] == w.labels.values[i];
  b.label_accuracy = double(agree) / b.labels.values.size();

  // Eight sites per texture, each inside one texture and apart from the others.
  const int margin = 32, per_texture = 8;
  std::array<int, 2> count{};
  std::vector<sm::Point> centers;
  while (count[0] + count[1] < 2 * per_texture) {
    const int x = static_cast<int>(rs.below(1024)), y = static_cast<int>(rs.below(1024));
    if (!w.tissue.at(x, y) || count[w.texture.at(x, y)] >= per_texture || !sm::synth::uniform_patch(w, x, y, margin))
      continue;
    const sm::Point c{double(x), double(y)};
    if (std::any_of(centers.begin(), centers.end(), [&](sm::Point o) { return sm::norm(o - c) < 2.0 * margin + 8; }))
      continue;
    centers.push_back(c);
    b.site_texture.push_back(w.texture.at(x, y));
    ++count[w.texture.at(x, y)];
  }

  // Force maps: 8 x 8 curves over 10 um at 40 dB, fitted back to moduli.
  const int grid = 8;
  const double side = 10.0 / pitch;
  for (std::size_t k = 0; k < centers.size(); ++k) {
    std::vector<sm::ForceCurve> curves;
    for (int r = 0; r < grid; ++r)
      for (int c = 0; c < grid; ++c) {
        const sm::Point q = centers[k] + sm::Point{((c + 0.5) / grid - 0.5) * side, ((r + 0.5) / grid - 0.5) * side};
        curves.push_back(sm::synthesize_curve(sm::synth::stiffness_at(w, q), p.indenter, p.curve, 40.0, &rc));
      }
    const auto site = sm::fit_site_grid(curves, grid, grid, p.indenter, {centers[k].x * pitch, centers[k].y * pitch},
                                        static_cast<int>(k));
    const int cx = static_cast<int>(centers[k].x), cy = static_cast<int>(centers[k].y);
    b.rois.push_back(sm::extract_roi(b.labels, cx, cy, sm::kDefaultRoiSide, site.site_id, site.mean_pa));
    b.scans.push_back(sm::scan_area(site, centers[k], pitch));
  }
  b.stack = sm::correlation_scores(b.rois, b.labels);
  b.map = sm::propagate_stiffness(sm::reduce_correlation(b.stack), b.rois, sm::kDefaultCorrelationThreshold, b.scans);
  b.seconds = seconds_since(t0);
  return b;
}

// The map restricted to pixels whose true texture is t.
sm::StiffnessMap texture_part(const Benchmark& b, int t) {
  sm::StiffnessMap m = b.map;
  for (std::size_t i = 0; i < m.values_pa.size(); ++i)
    if (!b.world.tissue.values[i] || b.world.texture.values[i] != t) {
      m.provenance[i] = sm::Provenance::unassigned;
      m.values_pa[i] = 0.0;
    }
  return m;
}

Outcome propagation(const Benchmark& b) {
  // Thresholded pixels are the propagated ones; the source class is the texture of the winning site.
  const auto cmap = sm::reduce_correlation(b.stack);
  std::size_t n = 0, correct = 0;
  for (std::size_t i = 0; i < b.map.provenance.size(); ++i) {
    if (b.map.provenance[i] != sm::Provenance::propagated) continue;
    ++n;
    correct += b.world.tissue.values[i] && b.site_texture[cmap.best_site.values[i]] == b.world.texture.values[i];
  }
  const double frac = n ? double(correct) / n : 0.0;
  const auto cmp = sm::compare_samples(texture_part(b, 0), texture_part(b, 1), 50, 100, 11);
  const auto s0 = sm::summarize(texture_part(b, 0)), s1 = sm::summarize(texture_part(b, 1));
  return {frac >= 0.95 && cmp.mean_p < 0.01 && b.seconds < 300.0,
          fmt("%zu propagated px, %.2f%% correct class; means %.0f vs %.0f Pa, mean p %.2e; labels %.4f; %.0f s", n,
              100 * frac, s0.mean_pa, s1.mean_pa, cmp.mean_p, b.label_accuracy, b.seconds)};
}

Outcome loocv_robustness(const Benchmark& b) {
  const auto rep = sm::loocv(b.rois, b.stack, sm::kDefaultCorrelationThreshold);
  double worst = 0.0;
  int dominant = 0, failed = 0;
  for (const auto& f : rep.folds) {
    if (f.failed) ++failed;
    else if (f.dominant) ++dominant;
    else worst = std::max(worst, std::abs(f.delta_percent));
  }
  return {b.rois.size() >= 6 && failed == 0 && worst < 5.0,
          fmt("%zu sites, %d dominant, worst non-dominant change %.2f%%", b.rois.size(), dominant, worst)};
}

Outcome interpolation(const Benchmark& b) {
  double worst = 0.0;
  for (int seed = 1; seed <= 5; ++seed) {
    sm::Rng rng(static_cast<std::uint64_t>(60 + seed));
    const double a = rng.uniform(-5, 5), bx = rng.uniform(-2, 2), by = rng.uniform(-2, 2);
    sm::StiffnessMap m(160, 120);
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (rng.uniform() < 0.05) {
          m.values_pa[m.index(x, y)] = 500 + a + bx * x + by * y;
          m.provenance[m.index(x, y)] = sm::Provenance::measured;
        }
    const auto out = sm::interpolate_mwls(m, 32, 8);
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (out.provenance[out.index(x, y)] == sm::Provenance::interpolated)
          worst = std::max(worst, std::abs(out.values_pa[out.index(x, y)] - (500 + a + bx * x + by * y)));
  }
  // Statistics with and without interpolation on the benchmark map.
  const auto filled = sm::interpolate_mwls(b.map);
  const auto s_off = sm::summarize(b.map), s_on = sm::summarize(filled);
  const auto c_off = sm::compare_samples(b.map, texture_part(b, 1), 50, 20, 3);
  const auto c_on = sm::compare_samples(filled, texture_part(b, 1), 50, 20, 3);
  const bool same = s_off.mean_pa == s_on.mean_pa && s_off.std_pa == s_on.std_pa && s_off.n == s_on.n &&
                    c_off.p_values == c_on.p_values;
  const auto added = filled.count(sm::Provenance::interpolated);
  return {worst <= 1e-6 && same && added > 0,
          fmt("plane fields worst error %.1e; %zu interpolated px leave stats %s", worst, added,
              same ? "identical" : "CHANGED")};
}

// ---------------------------------------------------------------------------
// 9. Determinism of the CLI pipeline

std::map<std::string, std::string> artifacts(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && !e.path().filename().string().ends_with(".run.json"))
      out[fs::relative(e.path(), root).string()] = sm_test::slurp(e.path());
  return out;
}

std::string differences(const std::map<std::string, std::string>& a, const std::map<std::string, std::string>& b) {
  std::string d;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    if (it == b.end() || it->second != v) d += (d.empty() ? "" : ",") + k;
  }
  for (const auto& [k, v] : b)
    if (!a.count(k)) d += (d.empty() ? "" : ",") + k;
  return d;
}

Outcome determinism(const fs::path& work) {
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string cli = STIFFMAP_CLI;
  auto sh = [&](const std::string& args) {
    const std::string cmd = "'" + cli + "' " + args + " >/dev/null 2>>'" + (work / "stderr.txt").string() + "'";
    return std::system(cmd.c_str()) == 0;
  };
  auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
  bool ok = sh("synth --seed 7 --out " + q(work / "sample_a")) && sh("synth --seed 7 --out " + q(work / "sample_b"));
  const auto sample = work / "sample_a" / "sample.json";
  ok = ok && sh("--threads 1 pipeline --sample " + q(sample) + " --out " + q(work / "run_1a"));
  ok = ok && sh("--threads 1 pipeline --sample " + q(sample) + " --out " + q(work / "run_1b"));
  ok = ok && sh("--threads 4 pipeline --sample " + q(sample) + " --out " + q(work / "run_4"));
  if (!ok) return {false, "a CLI run failed, see " + (work / "stderr.txt").string()};
  const auto sa = artifacts(work / "sample_a"), sb = artifacts(work / "sample_b");
  const auto r1 = artifacts(work / "run_1a"), r1b = artifacts(work / "run_1b"), r4 = artifacts(work / "run_4");
  const auto d_sample = differences(sa, sb), d_runs = differences(r1, r1b), d_threads = differences(r1, r4);
  const bool pass = d_sample.empty() && d_runs.empty() && d_threads.empty() && r1.size() > 20;
  return {pass, pass ? fmt("synth and pipeline byte-identical: %zu sample files, %zu pipeline files, threads 1 vs 4",
                           sa.size(), r1.size())
                     : "differences: sample[" + d_sample + "] runs[" + d_runs + "] threads[" + d_threads + "]"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stiffmap acceptance run"};
  std::string workdir = (fs::temp_directory_path() / "stiffmap_acceptance").string();
  app.add_option("--workdir", workdir, "scratch directory for the CLI runs");
  CLI11_PARSE(app, argc, argv);

  int failed = 0;
  auto report = [&](int id, const char* name, double limit_s, const std::function<Outcome()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = seconds_since(t0);
    if (limit_s > 0 && s > limit_s) {
      o.pass = false;
      o.detail += fmt(" [over the %.0f s limit]", limit_s);
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), s);
    std::fflush(stdout);
  };

  report(1, "NCC oracle equivalence", 60, ncc_oracle);
  report(2, "registration accuracy", 120, registration);
  report(3, "stitching", 60, stitching);
  report(4, "Hertz fitting", 0, hertz);
  report(5, "classifier", 0, classifier);
  std::optional<Benchmark> bench;
  auto with_bench = [&](auto f) {
    return [&, f] {
      if (!bench) bench = build_benchmark();
      return f(*bench);
    };
  };
  report(6, "propagation end-to-end", 300, with_bench(propagation));
  report(7, "LOOCV robustness", 0, with_bench(loocv_robustness));
  report(8, "interpolation", 0, with_bench(interpolation));
  report(9, "determinism", 0, [&] { return determinism(workdir); });
  return failed == 0 ? 0 : 1;
}
