#pragma once

// Tile stitching: pairwise phase correlation on nominal overlap strips,
// a confidence-weighted least-squares solve for global translations, and
// distance-weighted linear blending.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/parallel.hpp"
#include "stiffmap/phase_correlation.hpp"
#include "stiffmap/raster.hpp"

namespace stiffmap {

inline constexpr double kStitchConfidenceFloor = 0.1;
inline constexpr int kMinOverlapPx = 32;

struct Tile {
  Raster image;
  int row = 0;
  int col = 0;
};

struct TileLayout {
  std::vector<Tile> tiles;
  double overlap = 0.2;

  int tile_width() const { return tiles.front().image.width; }
  int tile_height() const { return tiles.front().image.height; }
  int step_x() const { return static_cast<int>(std::lround(tile_width() * (1.0 - overlap))); }
  int step_y() const { return static_cast<int>(std::lround(tile_height() * (1.0 - overlap))); }

  void validate() const {
    require(!tiles.empty(), Errc::invalid_argument, "tile layout is empty");
    require(overlap > 0.0 && overlap <= 0.5, Errc::invalid_argument,
            "overlap fraction must lie in (0, 0.5]");
    const Raster& first = tiles.front().image;
    std::map<std::pair<int, int>, int> seen;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
      const Raster& r = tiles[i].image;
      require(r.same_shape(first) && r.pitch_um == first.pitch_um, Errc::invalid_argument,
              "tiles must share dimensions, channels and pitch");
      require(tiles[i].row >= 0 && tiles[i].col >= 0, Errc::invalid_argument,
              "tile grid positions must be non-negative");
      require(seen.emplace(std::pair{tiles[i].row, tiles[i].col}, static_cast<int>(i)).second,
              Errc::invalid_argument, "two tiles share a grid position");
    }
    if (tiles.size() > 1) {
      require(tile_width() - step_x() >= kMinOverlapPx && tile_height() - step_y() >= kMinOverlapPx,
              Errc::invalid_argument, "nominal overlap is narrower than 32 px");
    }
  }
};

struct PairShift {
  int from = 0;
  int to = 0;
  Point offset;  // position(to) - position(from)
  double confidence = 0.0;
};

struct StitchResult {
  Raster image;
  std::vector<Point> positions;  // subpixel, tile 0 at the origin
  int origin_x = 0;              // canvas pixel of position (0, 0)
  int origin_y = 0;
  std::vector<PairShift> pairs;
};

namespace detail {

inline Raster registration_channel(const Raster& r) { return r.channels == 1 ? r : to_gray(r); }

inline std::vector<PairShift> estimate_pair_shifts(const TileLayout& layout) {
  std::map<std::pair<int, int>, int> index;
  for (std::size_t i = 0; i < layout.tiles.size(); ++i)
    index[{layout.tiles[i].row, layout.tiles[i].col}] = static_cast<int>(i);
  std::vector<PairShift> pairs;
  for (std::size_t i = 0; i < layout.tiles.size(); ++i) {
    const auto& t = layout.tiles[i];
    if (auto it = index.find({t.row, t.col + 1}); it != index.end())
      pairs.push_back({static_cast<int>(i), it->second, {}, 0.0});
    if (auto it = index.find({t.row + 1, t.col}); it != index.end())
      pairs.push_back({static_cast<int>(i), it->second, {}, 0.0});
  }
  const int w = layout.tile_width(), h = layout.tile_height();
  const int sx = layout.step_x(), sy = layout.step_y();
  parallel_for(0, static_cast<std::ptrdiff_t>(pairs.size()), [&](std::ptrdiff_t k) {
    PairShift& p = pairs[k];
    const Raster a = registration_channel(layout.tiles[p.from].image);
    const Raster b = registration_channel(layout.tiles[p.to].image);
    const bool horizontal = layout.tiles[p.to].col != layout.tiles[p.from].col;
    try {
      if (horizontal) {
        const auto s = phase_correlate(crop(a, sx, 0, w - sx, h), crop(b, 0, 0, w - sx, h));
        p.offset = {sx - s.dx, -s.dy};
        p.confidence = s.confidence;
      } else {
        const auto s = phase_correlate(crop(a, 0, sy, w, h - sy), crop(b, 0, 0, w, h - sy));
        p.offset = {-s.dx, sy - s.dy};
        p.confidence = s.confidence;
      }
    } catch (const Error& e) {
      // A featureless overlap carries no shift information.
      if (e.code() != Errc::degenerate) throw;
      p.confidence = 0.0;
    }
  });
  return pairs;
}

// Weighted least squares for positions with tile 0 pinned at the origin.
inline std::vector<Point> solve_positions(std::size_t n, const std::vector<PairShift>& pairs) {
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::vector<int> usable_edges(n, 0);
  for (const auto& p : pairs) {
    if (p.confidence < kStitchConfidenceFloor) continue;
    parent[find(p.from)] = find(p.to);
    ++usable_edges[p.from];
    ++usable_edges[p.to];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (n > 1 && usable_edges[i] == 0)
      throw Error(Errc::disconnected,
                  "tile " + std::to_string(i) + " has no pair above the confidence floor");
    require(find(i) == find(0), Errc::disconnected, "tile graph is disconnected");
  }
  std::vector<Point> pos(n);
  if (n == 1) return pos;
  const auto m = static_cast<Eigen::Index>(n - 1);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(m, 2);
  for (const auto& p : pairs) {
    if (p.confidence < kStitchConfidenceFloor) continue;
    const double wgt = p.confidence;
    const Eigen::Index i = p.from - 1, j = p.to - 1;  // -1 means pinned
    if (i >= 0) {
      A(i, i) += wgt;
      rhs(i, 0) -= wgt * p.offset.x;
      rhs(i, 1) -= wgt * p.offset.y;
    }
    if (j >= 0) {
      A(j, j) += wgt;
      rhs(j, 0) += wgt * p.offset.x;
      rhs(j, 1) += wgt * p.offset.y;
    }
    if (i >= 0 && j >= 0) {
      A(i, j) -= wgt;
      A(j, i) -= wgt;
    }
  }
  const Eigen::MatrixXd sol = A.ldlt().solve(rhs);
  for (Eigen::Index k = 0; k < m; ++k) pos[k + 1] = {sol(k, 0), sol(k, 1)};
  return pos;
}

}  // namespace detail

// Composites tiles at integer-rounded positions. Each tile pixel is weighted
// by its distance to the nearest tile edge (1 at the border).
inline Raster blend_tiles(const std::vector<Tile>& tiles, const std::vector<Point>& positions,
                          int* origin_x = nullptr, int* origin_y = nullptr) {
  require(!tiles.empty() && tiles.size() == positions.size(), Errc::invalid_argument,
          "blend_tiles needs one position per tile");
  const int w = tiles.front().image.width, h = tiles.front().image.height;
  const int ch = tiles.front().image.channels;
  std::vector<int> ix(tiles.size()), iy(tiles.size());
  int min_x = 0, min_y = 0, max_x = 0, max_y = 0;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    ix[i] = static_cast<int>(std::lround(positions[i].x));
    iy[i] = static_cast<int>(std::lround(positions[i].y));
    if (i == 0 || ix[i] < min_x) min_x = ix[i];
    if (i == 0 || iy[i] < min_y) min_y = iy[i];
    if (i == 0 || ix[i] + w > max_x) max_x = ix[i] + w;
    if (i == 0 || iy[i] + h > max_y) max_y = iy[i] + h;
  }
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    ix[i] -= min_x;
    iy[i] -= min_y;
  }
  if (origin_x) *origin_x = -min_x;
  if (origin_y) *origin_y = -min_y;

  Raster out(max_x - min_x, max_y - min_y, ch, tiles.front().image.pitch_um);
  parallel_for(0, out.height, [&](std::ptrdiff_t yy) {
    const int y = static_cast<int>(yy);
    std::vector<double> acc(static_cast<std::size_t>(out.width) * ch);
    std::vector<double> wsum(out.width);
    std::vector<int> count(out.width), last(out.width, -1);
    for (std::size_t t = 0; t < tiles.size(); ++t) {
      const int ty = y - iy[t];
      if (ty < 0 || ty >= h) continue;
      const int wy = std::min(ty + 1, h - ty);
      for (int tx = 0; tx < w; ++tx) {
        const int x = ix[t] + tx;
        const double wgt = std::min(wy, std::min(tx + 1, w - tx));
        for (int c = 0; c < ch; ++c)
          acc[static_cast<std::size_t>(x) * ch + c] += wgt * tiles[t].image.at(tx, ty, c);
        wsum[x] += wgt;
        ++count[x];
        last[x] = static_cast<int>(t);
      }
    }
    for (int x = 0; x < out.width; ++x) {
      if (count[x] == 0) continue;
      for (int c = 0; c < ch; ++c) {
        // Single coverage copies the sample so it is reproduced exactly.
        out.at(x, y, c) =
            count[x] == 1
                ? tiles[last[x]].image.at(x - ix[last[x]], y - iy[last[x]], c)
                : static_cast<float>(acc[static_cast<std::size_t>(x) * ch + c] / wsum[x]);
      }
    }
  });
  return out;
}

inline StitchResult stitch_tiles(const TileLayout& layout) {
  layout.validate();
  StitchResult res;
  if (layout.tiles.size() > 1) res.pairs = detail::estimate_pair_shifts(layout);
  res.positions = detail::solve_positions(layout.tiles.size(), res.pairs);
  res.image = blend_tiles(layout.tiles, res.positions, &res.origin_x, &res.origin_y);
  return res;
}

inline Raster stitch(const TileLayout& layout) { return stitch_tiles(layout).image; }

}  // namespace stiffmap
