#pragma once

// Structure segmentation: k-means pseudo-coloring in HSV and the manual
// cluster -> class assignment that turns it into training labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "stiffmap/color.hpp"
#include "stiffmap/error.hpp"
#include "stiffmap/parallel.hpp"
#include "stiffmap/random.hpp"
#include "stiffmap/raster.hpp"

namespace stiffmap {

struct KMeansOptions {
  int k = 10;
  int replicates = 10;
  int max_iterations = 300;
  double tolerance = 1e-6;  // max centroid movement
  std::uint64_t seed = 0;
};

struct ClusterModel {
  int k = 0;
  std::vector<Color3> centroids;
  double inertia = 0.0;
  int iterations = 0;
  int best_replicate = 0;
  std::vector<double> inertia_history;     // best replicate, one entry per Lloyd iteration
  std::vector<double> replicate_inertias;  // final inertia of every replicate
};

inline double squared_distance(const Color3& a, const Color3& b) {
  const double d0 = a[0] - b[0], d1 = a[1] - b[1], d2 = a[2] - b[2];
  return d0 * d0 + d1 * d1 + d2 * d2;
}

// Nearest centroid; ties go to the lowest index.
inline int nearest_centroid(const Color3& p, std::span<const Color3> centroids, double* dist = nullptr) {
  int best = 0;
  double bd = squared_distance(p, centroids[0]);
  for (std::size_t j = 1; j < centroids.size(); ++j) {
    const double d = squared_distance(p, centroids[j]);
    if (d < bd) {
      bd = d;
      best = static_cast<int>(j);
    }
  }
  if (dist) *dist = bd;
  return best;
}

namespace detail {

// Reductions run over fixed blocks so sums do not depend on the thread count.
inline constexpr std::size_t kReduceBlock = 4096;

struct LloydStats {
  std::vector<Color3> sums;
  std::vector<double> counts;
  double inertia = 0.0;
};

inline LloydStats assign_points(std::span<const Color3> pts, std::span<const Color3> centroids,
                                std::vector<int>& label, std::vector<double>& dist) {
  const std::size_t k = centroids.size();
  const std::size_t blocks = (pts.size() + kReduceBlock - 1) / kReduceBlock;
  std::vector<LloydStats> partial(blocks);
  parallel_for(0, static_cast<std::ptrdiff_t>(blocks), [&](std::ptrdiff_t b) {
    LloydStats& s = partial[b];
    s.sums.assign(k, Color3{0, 0, 0});
    s.counts.assign(k, 0.0);
    const std::size_t end = std::min(pts.size(), (b + 1) * kReduceBlock);
    for (std::size_t i = b * kReduceBlock; i < end; ++i) {
      const int j = nearest_centroid(pts[i], centroids, &dist[i]);
      label[i] = j;
      for (int c = 0; c < 3; ++c) s.sums[j][c] += pts[i][c];
      s.counts[j] += 1.0;
      s.inertia += dist[i];
    }
  });
  LloydStats total;
  total.sums.assign(k, Color3{0, 0, 0});
  total.counts.assign(k, 0.0);
  for (const auto& s : partial) {
    for (std::size_t j = 0; j < k; ++j) {
      for (int c = 0; c < 3; ++c) total.sums[j][c] += s.sums[j][c];
      total.counts[j] += s.counts[j];
    }
    total.inertia += s.inertia;
  }
  return total;
}

inline std::vector<Color3> kmeanspp_seed(std::span<const Color3> pts, int k, Rng& rng) {
  std::vector<Color3> c;
  c.push_back(pts[rng.below(pts.size())]);
  std::vector<double> d2(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) d2[i] = squared_distance(pts[i], c[0]);
  while (static_cast<int>(c.size()) < k) {
    double total = 0.0;
    for (double d : d2) total += d;
    require(total > 0.0, Errc::degenerate, "k-means: fewer distinct points than clusters");
    const double target = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = pts.size() - 1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      acc += d2[i];
      if (acc > target && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    while (d2[pick] == 0.0) --pick;  // round-off at the tail
    c.push_back(pts[pick]);
    for (std::size_t i = 0; i < pts.size(); ++i) d2[i] = std::min(d2[i], squared_distance(pts[i], c.back()));
  }
  return c;
}

}  // namespace detail

inline ClusterModel kmeans_run(std::span<const Color3> pts, const KMeansOptions& opt, Rng& rng) {
  ClusterModel m;
  m.k = opt.k;
  m.centroids = detail::kmeanspp_seed(pts, opt.k, rng);
  std::vector<int> label(pts.size());
  std::vector<double> dist(pts.size());
  for (int it = 0; it < opt.max_iterations; ++it) {
    auto stats = detail::assign_points(pts, m.centroids, label, dist);
    m.inertia_history.push_back(stats.inertia);
    m.iterations = it + 1;
    double moved = 0.0;
    for (int j = 0; j < opt.k; ++j) {
      Color3 next;
      if (stats.counts[j] > 0.0) {
        for (int c = 0; c < 3; ++c) next[c] = stats.sums[j][c] / stats.counts[j];
      } else {
        // Empty cluster: re-seed at the point farthest from its centroid.
        const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        require(dist[far] > 0.0, Errc::degenerate, "k-means: cannot re-seed an empty cluster");
        next = pts[far];
        dist[far] = 0.0;
      }
      moved = std::max(moved, std::sqrt(squared_distance(next, m.centroids[j])));
      m.centroids[j] = next;
    }
    if (moved < opt.tolerance) break;
  }
  m.inertia = detail::assign_points(pts, m.centroids, label, dist).inertia;
  return m;
}

inline ClusterModel kmeans_hsv(std::span<const Color3> pts, const KMeansOptions& opt) {
  require(opt.k >= 1 && opt.replicates >= 1 && opt.max_iterations >= 1, Errc::invalid_argument,
          "k-means needs k, replicates and iterations >= 1");
  require(pts.size() >= static_cast<std::size_t>(opt.k), Errc::insufficient_samples,
          "k-means: fewer points than clusters");
  Rng base(opt.seed);
  ClusterModel best;
  std::vector<double> finals;
  for (int r = 0; r < opt.replicates; ++r) {
    Rng rng = base.fork(static_cast<std::uint64_t>(r));
    auto m = kmeans_run(pts, opt, rng);
    finals.push_back(m.inertia);
    if (r == 0 || m.inertia < best.inertia) {
      best = std::move(m);
      best.best_replicate = r;
    }
  }
  best.replicate_inertias = finals;
  return best;
}

inline std::vector<Color3> raster_pixels(const Raster& r) {
  require_channels(r, 3, "pixel set");
  std::vector<Color3> pts(r.pixel_count());
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = pixel(r, i);
  return pts;
}

// Seeded subsample without replacement (all pixels if max_points >= count).
inline std::vector<Color3> sample_pixels(const Raster& r, std::size_t max_points, std::uint64_t seed) {
  auto pts = raster_pixels(r);
  if (max_points == 0 || pts.size() <= max_points) return pts;
  Rng rng(seed);
  for (std::size_t i = 0; i < max_points; ++i) std::swap(pts[i], pts[i + rng.below(pts.size() - i)]);
  pts.resize(max_points);
  return pts;
}

inline Raster pseudocolor(const Raster& hsv, const ClusterModel& model) {
  require_channels(hsv, 3, "pseudocolor");
  require(!model.centroids.empty(), Errc::invalid_argument, "pseudocolor: model has no centroids");
  Raster out(hsv.width, hsv.height, 3, hsv.pitch_um);
  parallel_for(0, static_cast<std::ptrdiff_t>(hsv.pixel_count()), [&](std::ptrdiff_t i) {
    const auto& c = model.centroids[nearest_centroid(pixel(hsv, i), model.centroids)];
    for (int ch = 0; ch < 3; ++ch) out.data[i * 3 + ch] = static_cast<float>(c[ch]);
  });
  return out;
}

// Manual cluster -> structure class table.
struct ClusterAssignment {
  std::vector<int> class_of;

  void validate(int k) const {
    require(static_cast<int>(class_of.size()) == k, Errc::invalid_argument,
            "assignment must list every cluster exactly once");
    for (int c : class_of)
      require(c >= 0 && c < kStructureClasses, Errc::invalid_argument, "assignment class outside {0,1,2}");
  }
};

struct TrainingSet {
  std::vector<Color3> inputs;  // HSV
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
};

namespace detail {
inline int cluster_of_color(const Raster& pseudo, std::size_t i, const ClusterModel& model) {
  for (std::size_t j = 0; j < model.centroids.size(); ++j) {
    bool eq = true;
    for (int c = 0; c < 3; ++c) eq = eq && pseudo.data[i * 3 + c] == static_cast<float>(model.centroids[j][c]);
    if (eq) return static_cast<int>(j);
  }
  throw Error(Errc::unknown_color, "pixel " + std::to_string(i) + " is not a cluster centroid color");
}
}  // namespace detail

// Labels come from the pseudo-color image; inputs are the original HSV pixels.
inline TrainingSet make_training_set(const Raster& hsv, const Raster& pseudo, const ClusterModel& model,
                                     const ClusterAssignment& assignment) {
  require_channels(hsv, 3, "training set");
  require_channels(pseudo, 3, "training set");
  require(hsv.width == pseudo.width && hsv.height == pseudo.height, Errc::invalid_argument,
          "pseudo-color image does not match the HSV image");
  assignment.validate(model.k);
  TrainingSet ts;
  ts.inputs.resize(hsv.pixel_count());
  ts.labels.resize(hsv.pixel_count());
  for (std::size_t i = 0; i < hsv.pixel_count(); ++i) {
    ts.inputs[i] = pixel(hsv, i);
    ts.labels[i] = static_cast<std::uint8_t>(assignment.class_of[detail::cluster_of_color(pseudo, i, model)]);
  }
  return ts;
}

// Pseudo-color values themselves as inputs.
inline TrainingSet make_training_set(const Raster& pseudo, const ClusterModel& model,
                                     const ClusterAssignment& assignment) {
  return make_training_set(pseudo, pseudo, model, assignment);
}

}  // namespace stiffmap
