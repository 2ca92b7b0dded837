#pragma once

// Pipeline stages. Each stage reads its inputs from files, writes its
// artifacts into an output directory and records a run log there.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cli_support.hpp"
#include "stiffmap/color.hpp"
#include "stiffmap/edof.hpp"
#include "stiffmap/forcecurve.hpp"
#include "stiffmap/mlp.hpp"
#include "stiffmap/propagate.hpp"
#include "stiffmap/raster_io.hpp"
#include "stiffmap/register.hpp"
#include "stiffmap/segment.hpp"
#include "stiffmap/stitch.hpp"
#include "stiffmap/synth.hpp"

namespace stiffmap::cli {

// ---------------------------------------------------------------------------
// Manifest readers

inline void check_format(const json& j, const char* format, const fs::path& path) {
  require(j.is_object() && j.value("format", "") == format, Errc::malformed,
          path.string() + ": expected format '" + format + "'");
}

inline ZStack load_zstack(const fs::path& manifest, RunLog& log) {
  const json j = read_json(log.input(manifest));
  check_format(j, "stiffmap-zstack", manifest);
  ZStack z;
  try {
    z.spacing_um = j.at("spacing_um");
    for (const auto& p : j.at("planes")) z.planes.push_back(read_image(log.input(resolve(manifest, p))));
  } catch (const json::exception& e) {
    throw Error(Errc::malformed, manifest.string() + ": " + e.what());
  }
  z.validate();
  return z;
}

// Tiles are either images ("path") or z-stacks ("zstack") fused on load.
inline TileLayout load_layout(const fs::path& manifest, RunLog& log) {
  const json j = read_json(log.input(manifest));
  check_format(j, "stiffmap-layout", manifest);
  TileLayout layout;
  try {
    layout.overlap = j.at("overlap");
    for (const auto& t : j.at("tiles")) {
      Tile tile;
      tile.row = t.at("row");
      tile.col = t.at("col");
      require(t.contains("path") != t.contains("zstack"), Errc::malformed,
              manifest.string() + ": each tile needs exactly one of 'path' or 'zstack'");
      if (t.contains("path")) {
        tile.image = read_image(log.input(resolve(manifest, t.at("path"))));
      } else {
        const auto z = load_zstack(resolve(manifest, t.at("zstack")), log);
        tile.image = log.timed("edof", [&] { return edof_fuse(z); });
      }
      layout.tiles.push_back(std::move(tile));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed, manifest.string() + ": " + e.what());
  }
  layout.validate();
  return layout;
}

struct CurveGrid {
  int site_id = 0;
  int rows = 0;
  int cols = 0;
  double area_um = 10.0;
  std::optional<Point> center_um;
  std::vector<ForceCurve> curves;
};

struct CurveManifest {
  IndenterSpec indenter;
  std::vector<CurveGrid> sites;
};

inline CurveManifest load_curves(const fs::path& manifest, RunLog& log) {
  const json j = read_json(log.input(manifest));
  check_format(j, "stiffmap-curves", manifest);
  CurveManifest m;
  try {
    m.indenter.bead_radius_um = j.at("indenter").at("bead_radius_um");
    m.indenter.poisson_ratio = j.at("indenter").at("poisson_ratio");
    for (const auto& s : j.at("sites")) {
      CurveGrid g;
      g.site_id = s.at("site_id");
      g.rows = s.at("rows");
      g.cols = s.at("cols");
      g.area_um = s.value("area_um", 10.0);
      if (s.contains("center_um") && !s.at("center_um").is_null()) g.center_um = point_of(s.at("center_um"));
      for (const auto& p : s.at("curves")) g.curves.push_back(read_force_curve_csv(log.input(resolve(manifest, p))));
      m.sites.push_back(std::move(g));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed, manifest.string() + ": " + e.what());
  }
  m.indenter.validate();
  return m;
}

inline json site_to_json(const MeasurementSite& s, bool has_center) {
  json valid = json::array();
  for (auto v : s.valid) valid.push_back(static_cast<bool>(v));
  return {{"site_id", s.site_id},
          {"rows", s.rows},
          {"cols", s.cols},
          {"area_um", s.area_um},
          {"center_um", has_center ? json_of(s.center_um) : json(nullptr)},
          {"moduli_pa", s.moduli_pa},
          {"valid", valid},
          {"valid_count", s.valid_count()},
          {"mean_pa", s.mean_pa},
          {"std_pa", s.std_pa}};
}

inline std::map<int, MeasurementSite> load_measurements(const fs::path& path, RunLog& log) {
  const json j = read_json(log.input(path));
  check_format(j, "stiffmap-measurements", path);
  std::map<int, MeasurementSite> out;
  try {
    for (const auto& s : j.at("sites")) {
      MeasurementSite m;
      m.site_id = s.at("site_id");
      m.rows = s.at("rows");
      m.cols = s.at("cols");
      m.area_um = s.at("area_um");
      s.at("moduli_pa").get_to(m.moduli_pa);
      for (const auto& v : s.at("valid")) m.valid.push_back(v.get<bool>());
      m.mean_pa = s.at("mean_pa");
      m.std_pa = s.at("std_pa");
      require(m.moduli_pa.size() == static_cast<std::size_t>(m.rows) * m.cols && m.valid.size() == m.moduli_pa.size(),
              Errc::malformed, path.string() + ": site grid does not match rows x cols");
      out[m.site_id] = std::move(m);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed, path.string() + ": " + e.what());
  }
  return out;
}

struct LocalizedSite {
  int site_id = 0;
  Point position_px;  // whole-sample (unstained) pixels
  double rotation_deg = 0.0;
};

inline std::map<int, LocalizedSite> load_sites(const fs::path& path, RunLog& log) {
  const json j = read_json(log.input(path));
  check_format(j, "stiffmap-sites", path);
  std::map<int, LocalizedSite> out;
  try {
    for (const auto& s : j.at("sites")) {
      LocalizedSite l;
      l.site_id = s.at("site_id");
      l.position_px = point_of(s.at("position_px"));
      l.rotation_deg = s.at("rotation_deg");
      out[l.site_id] = l;
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed, path.string() + ": " + e.what());
  }
  return out;
}

inline json transform_to_json(const RigidTransform2D& t) {
  return {{"rotation_deg", t.rotation_deg}, {"translation", json_of(t.translation)}, {"scale", t.scale}};
}

inline RigidTransform2D load_transform(const fs::path& path, RunLog& log) {
  const json j = read_json(log.input(path));
  check_format(j, "stiffmap-he-registration", path);
  RigidTransform2D t;
  try {
    const auto& tj = j.at("he_to_unstained");
    t.rotation_deg = tj.at("rotation_deg");
    t.translation = point_of(tj.at("translation"));
    t.scale = tj.at("scale");
  } catch (const json::exception& e) {
    throw Error(Errc::malformed, path.string() + ": " + e.what());
  }
  t.validate();
  return t;
}

inline StiffnessMap load_stiffness(const fs::path& values, const fs::path& provenance, RunLog& log) {
  const Raster v = read_raster(log.input(values));
  const Raster p = read_raster(log.input(provenance));
  require_channels(v, 1, "stiffness map");
  require_channels(p, 1, "provenance map");
  require(v.width == p.width && v.height == p.height, Errc::malformed,
          "stiffness and provenance rasters differ in size");
  StiffnessMap m(v.width, v.height);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    const float k = p.data[i];
    require(k == 0.0f || k == 1.0f || k == 2.0f || k == 3.0f, Errc::malformed,
            "provenance raster holds an unknown code");
    m.provenance[i] = static_cast<Provenance>(static_cast<int>(k));
    m.values_pa[i] = v.data[i];
  }
  return m;
}

inline void save_stiffness(const StiffnessMap& m, double pitch_um, const fs::path& values, const fs::path& provenance) {
  Raster v(m.width, m.height, 1, pitch_um), p(m.width, m.height, 1, pitch_um);
  for (std::size_t i = 0; i < m.values_pa.size(); ++i) {
    v.data[i] = static_cast<float>(m.values_pa[i]);
    p.data[i] = static_cast<float>(static_cast<int>(m.provenance[i]));
  }
  write_raster(values, v);
  write_raster(provenance, p);
}

inline json counts_json(const StiffnessMap& m) {
  json j;
  for (auto p : {Provenance::unassigned, Provenance::measured, Provenance::propagated, Provenance::interpolated})
    j[provenance_name(p)] = m.count(p);
  return j;
}

inline json summary_json(const Summary& s) { return {{"mean_pa", s.mean_pa}, {"std_pa", s.std_pa}, {"n", s.n}}; }

// ---------------------------------------------------------------------------
// Stages

struct Paths {
  std::map<std::string, fs::path> in;
  fs::path out;

  const fs::path& at(const std::string& key) const {
    auto it = in.find(key);
    require(it != in.end() && !it->second.empty(), Errc::config, "missing required input --" + key);
    return it->second;
  }
  bool has(const std::string& key) const { return in.count(key) && !in.at(key).empty(); }
};

inline void stage_synth(const Config& cfg, const Paths& io, RunLog& log) {
  const auto s = log.timed("generate", [&] { return synth::make_synthetic_sample(cfg.synth); });
  const auto& p = s.params;
  const fs::path out = io.out;
  auto tile_name = [](const synth::TilePlacement& t) {
    return "tile_r" + std::to_string(t.row) + "_c" + std::to_string(t.col);
  };

  json he_tiles = json::array();
  for (std::size_t i = 0; i < s.he_tiles.size(); ++i) {
    const auto name = tile_name(s.he_tiles[i]);
    json planes = json::array();
    for (std::size_t z = 0; z < s.he_stacks[i].planes.size(); ++z) {
      const auto file = "z" + std::to_string(z) + ".sraw";
      write_raster(out / "he" / name / file, s.he_stacks[i].planes[z]);
      planes.push_back(file);
    }
    write_json(out / "he" / name / "zstack.json",
               {{"format", "stiffmap-zstack"}, {"spacing_um", s.he_stacks[i].spacing_um}, {"planes", planes}});
    he_tiles.push_back({{"zstack", name + "/zstack.json"}, {"row", s.he_tiles[i].row}, {"col", s.he_tiles[i].col}});
  }
  write_json(out / "he" / "layout.json", {{"format", "stiffmap-layout"}, {"overlap", p.he_overlap}, {"tiles", he_tiles}});

  json un_tiles = json::array();
  for (std::size_t i = 0; i < s.un_tiles.size(); ++i) {
    const auto file = tile_name(s.un_tiles[i]) + ".sraw";
    write_raster(out / "unstained" / file, s.un_tile_images[i]);
    un_tiles.push_back({{"path", file}, {"row", s.un_tiles[i].row}, {"col", s.un_tiles[i].col}});
  }
  write_json(out / "unstained" / "layout.json",
             {{"format", "stiffmap-layout"}, {"overlap", p.un_overlap}, {"tiles", un_tiles}});

  json reg_sites = json::array(), curve_sites = json::array();
  for (std::size_t k = 0; k < s.sites.size(); ++k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "site_%02d", s.sites[k].site_id);
    const std::string dir = buf;
    const auto& scene = s.site_data[k].scene;
    write_raster(out / "afm" / dir / "bead_hi.sraw", scene.bead_hi);
    write_raster(out / "afm" / dir / "cantilever_lo.sraw", scene.cantilever_lo);
    write_raster(out / "afm" / dir / "afm_fov.sraw", scene.afm_fov);
    reg_sites.push_back({{"site_id", s.sites[k].site_id},
                         {"bead_hi", dir + "/bead_hi.sraw"},
                         {"cantilever_lo", dir + "/cantilever_lo.sraw"},
                         {"afm_fov", dir + "/afm_fov.sraw"},
                         {"mag_ratio", p.mag_ratio}});
    json curves = json::array();
    for (int r = 0; r < p.curve_rows; ++r)
      for (int c = 0; c < p.curve_cols; ++c) {
        const auto file = dir + "/curves/r" + std::to_string(r) + "_c" + std::to_string(c) + ".csv";
        write_force_curve_csv(out / "afm" / file, s.site_data[k].curves[r * p.curve_cols + c]);
        curves.push_back(file);
      }
    curve_sites.push_back({{"site_id", s.sites[k].site_id},
                           {"rows", p.curve_rows},
                           {"cols", p.curve_cols},
                           {"area_um", p.scan_um},
                           {"center_um", nullptr},
                           {"curves", curves}});
  }
  write_json(out / "afm" / "registration.json", {{"format", "stiffmap-registration"}, {"sites", reg_sites}});
  write_json(out / "afm" / "curves.json",
             {{"format", "stiffmap-curves"},
              {"indenter", {{"bead_radius_um", p.indenter.bead_radius_um}, {"poisson_ratio", p.indenter.poisson_ratio}}},
              {"sites", curve_sites}});

  json classes = json::array();
  const auto pal = synth::default_palettes();
  for (int k = 0; k < kStructureClasses; ++k) classes.push_back({{"class", structure_name(k)}, {"hsv", pal[k].hsv}});
  write_json(out / "palette.json", {{"format", "stiffmap-palette"}, {"classes", classes}});

  const auto& w = s.world;
  write_labels(out / "truth" / "labels.sraw", w.labels, p.he_pitch_um);
  Raster tex(w.size, w.size, 1, p.he_pitch_um), stiff(w.size, w.size, 1, p.he_pitch_um);
  StiffnessMap truth(w.size, w.size);
  for (std::size_t i = 0; i < tex.data.size(); ++i) {
    tex.data[i] = w.tissue.values[i] ? static_cast<float>(w.texture.values[i]) : -1.0f;
    stiff.data[i] = static_cast<float>(w.stiffness_pa.values[i]);
    truth.values_pa[i] = w.stiffness_pa.values[i];
    if (w.tissue.values[i]) truth.provenance[i] = Provenance::measured;
  }
  write_raster(out / "truth" / "texture.sraw", tex);
  write_raster(out / "truth" / "stiffness.sraw", stiff);
  write_raster(out / "truth" / "unstained.sraw", s.unstained);
  render_stiffness_png(out / "truth" / "stiffness.png", truth, cfg);
  write_json(out / "manifest.json", synth::manifest(s));
  write_json(log.output("sample.json"), {{"format", "stiffmap-sample"},
                                         {"he_layout", "he/layout.json"},
                                         {"unstained_layout", "unstained/layout.json"},
                                         {"registration", "afm/registration.json"},
                                         {"curves", "afm/curves.json"},
                                         {"palette", "palette.json"},
                                         {"manifest", "manifest.json"}});
  log.output("manifest.json");
  log.note("sites", s.sites.size());
}

inline void stage_edof(const Config&, const Paths& io, RunLog& log) {
  const auto z = load_zstack(io.at("zstack"), log);
  const Raster fused = log.timed("edof", [&] { return edof_fuse(z); });
  write_raster(log.output("edof.sraw"), fused);
  write_png(log.output("edof.png"), fused);
}

inline void stage_stitch(const Config&, const Paths& io, RunLog& log) {
  const auto layout = load_layout(io.at("layout"), log);
  const auto res = log.timed("stitch", [&] { return stitch_tiles(layout); });
  write_raster(log.output("mosaic.sraw"), res.image);
  write_png(log.output("mosaic.png"), res.image);
  json tiles = json::array(), pairs = json::array();
  for (std::size_t i = 0; i < layout.tiles.size(); ++i)
    tiles.push_back({{"row", layout.tiles[i].row}, {"col", layout.tiles[i].col}, {"position_px", json_of(res.positions[i])}});
  for (const auto& p : res.pairs)
    pairs.push_back({{"from", p.from}, {"to", p.to}, {"offset_px", json_of(p.offset)}, {"confidence", p.confidence}});
  write_json(log.output("stitch.json"), {{"format", "stiffmap-stitch"},
                                         {"width", res.image.width},
                                         {"height", res.image.height},
                                         {"channels", res.image.channels},
                                         {"pitch_um", res.image.pitch_um},
                                         {"origin_px", {res.origin_x, res.origin_y}},
                                         {"tiles", tiles},
                                         {"pairs", pairs}});
}

inline void stage_fit_curves(const Config& cfg, const Paths& io, RunLog& log) {
  const auto m = load_curves(io.at("curves"), log);
  json sites = json::array(), rejected = json::array();
  log.timed("fit", [&] {
    for (const auto& g : m.sites) {
      try {
        const auto s = fit_site_grid(g.curves, g.rows, g.cols, m.indenter, g.center_um.value_or(Point{}), g.site_id,
                                     cfg.fit, g.area_um);
        sites.push_back(site_to_json(s, g.center_um.has_value()));
      } catch (const Error& e) {
        rejected.push_back({{"site_id", g.site_id}, {"error", e.what()}});
      }
    }
  });
  require(!sites.empty(), Errc::site_rejected, "every site was rejected");
  write_json(log.output("measurements.json"),
             {{"format", "stiffmap-measurements"},
              {"indenter", {{"bead_radius_um", m.indenter.bead_radius_um}, {"poisson_ratio", m.indenter.poisson_ratio}}},
              {"noise_k", cfg.fit.noise_k},
              {"sites", sites},
              {"rejected", rejected}});
}

inline void stage_localize(const Config& cfg, const Paths& io, RunLog& log) {
  const fs::path manifest = io.at("registration");
  const json j = read_json(log.input(manifest));
  check_format(j, "stiffmap-registration", manifest);
  const Raster ws = read_image(log.input(io.at("wholesample")));
  json sites = json::array(), failed = json::array();
  try {
    for (const auto& s : j.at("sites")) {
      const int id = s.at("site_id");
      const Raster bead = read_image(log.input(resolve(manifest, s.at("bead_hi"))));
      const Raster cant = read_image(log.input(resolve(manifest, s.at("cantilever_lo"))));
      const Raster fov = read_image(log.input(resolve(manifest, s.at("afm_fov"))));
      const double mag = s.at("mag_ratio");
      try {
        const auto r = log.timed("site_" + std::to_string(id),
                                 [&] { return localize_contact_point(bead, cant, fov, ws, mag, cfg.localize, id); });
        sites.push_back({{"site_id", id},
                         {"position_um", json_of(r.position_um)},
                         {"position_px", json_of(r.position_px)},
                         {"rotation_deg", r.rotation_deg},
                         {"peak_ncc", r.peak_ncc},
                         {"bead_ncc", r.bead_ncc},
                         {"rotation_ncc", r.rotation_ncc},
                         {"wholesample_ncc", r.wholesample_ncc}});
      } catch (const Error& e) {
        failed.push_back({{"site_id", id}, {"stage", e.stage()}, {"error", e.what()}});
      }
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed, manifest.string() + ": " + e.what());
  }
  require(!sites.empty(), Errc::localization_failed, "no site could be localized");
  write_json(log.output("sites.json"),
             {{"format", "stiffmap-sites"}, {"pitch_um", ws.pitch_um}, {"sites", sites}, {"failed", failed}});
}

inline void stage_register_he(const Config& cfg, const Paths& io, RunLog& log) {
  const Raster he = read_image(log.input(io.at("he")));
  const Raster un = read_image(log.input(io.at("unstained")));
  const auto r = log.timed("register", [&] { return register_he_to_unstained(he, un, cfg.register_he); });
  write_json(log.output("he_registration.json"), {{"format", "stiffmap-he-registration"},
                                                  {"he_pitch_um", he.pitch_um},
                                                  {"unstained_pitch_um", un.pitch_um},
                                                  {"he_to_unstained", transform_to_json(r.transform)},
                                                  {"rotation_ncc", r.rotation_ncc},
                                                  {"translation_ncc", r.translation_ncc}});
}

// Cluster -> class by the nearest palette color (synthetic samples ship a palette).
inline ClusterAssignment assignment_from_palette(const ClusterModel& m, const fs::path& path, RunLog& log) {
  const json j = read_json(log.input(path));
  check_format(j, "stiffmap-palette", path);
  std::vector<Color3> rgb(kStructureClasses);
  std::vector<bool> seen(kStructureClasses, false);
  try {
    for (const auto& c : j.at("classes")) {
      int k = -1;
      for (int i = 0; i < kStructureClasses; ++i)
        if (c.at("class") == structure_name(i)) k = i;
      require(k >= 0, Errc::malformed, path.string() + ": unknown class");
      rgb[k] = hsv_to_rgb(c.at("hsv").get<Color3>());
      seen[k] = true;
    }
  } catch (const json::exception& e) {
    throw Error(Errc::malformed, path.string() + ": " + e.what());
  }
  for (int k = 0; k < kStructureClasses; ++k)
    require(seen[k], Errc::malformed, path.string() + ": palette lacks class " + structure_name(k));
  ClusterAssignment a;
  for (const auto& c : m.centroids) a.class_of.push_back(nearest_centroid(hsv_to_rgb(c), rgb));
  return a;
}

inline void stage_cluster(const Config& cfg, const Paths& io, RunLog& log) {
  const Raster rgb = read_image(log.input(io.at("image")));
  require_channels(rgb, 3, "cluster input");
  const Raster hsv = rgb_to_hsv(rgb);
  const auto pts = sample_pixels(hsv, cfg.cluster_max_points, cfg.cluster.seed);
  const auto model = log.timed("kmeans", [&] { return kmeans_hsv(pts, cfg.cluster); });
  const Raster pseudo = log.timed("pseudocolor", [&] { return pseudocolor(hsv, model); });
  write_json(log.output("clusters.json"), to_json(model));
  write_raster(log.output("pseudocolor.sraw"), pseudo);
  write_png(log.output("pseudocolor.png"), hsv_to_rgb(pseudo));
  log.note("clustered_points", pts.size());
  if (io.has("palette")) {
    write_json(log.output("assignment.json"), to_json(assignment_from_palette(model, io.at("palette"), log)));
    log.note("assignment", "nearest palette color");
  }
}

inline void stage_train(const Config& cfg, const Paths& io, RunLog& log) {
  const Raster rgb = read_image(log.input(io.at("image")));
  require_channels(rgb, 3, "training image");
  const Raster pseudo = read_raster(log.input(io.at("pseudocolor")));
  const auto model = cluster_model_from_json(read_json(log.input(io.at("clusters"))));
  const auto assign = assignment_from_json(read_json(log.input(io.at("assignment"))), model.k);
  const auto ts = make_training_set(rgb_to_hsv(rgb), pseudo, model, assign);
  TrainOptions opt = cfg.train;
  if (opt.batch_size == 0) opt.batch_size = 4 * std::max(rgb.width, rgb.height);
  const auto mlp = log.timed("train", [&] { return train_classifier(ts, opt); });
  write_json(log.output("model.json"), to_json(mlp));
  write_json(log.output("train_report.json"), {{"format", "stiffmap-train-report"},
                                               {"pixels", ts.size()},
                                               {"batch_size", opt.batch_size},
                                               {"epochs", opt.epochs},
                                               {"train_accuracy", mlp.train_accuracy},
                                               {"validation_accuracy", mlp.validation_accuracy},
                                               {"epoch_loss", mlp.epoch_loss}});
}

inline void stage_predict(const Config&, const Paths& io, RunLog& log) {
  const auto model = mlp_from_json(read_json(log.input(io.at("model"))));
  const Raster rgb = read_image(log.input(io.at("image")));
  const LabelMap labels = log.timed("predict", [&] { return predict_structure(rgb, model); });
  write_labels(log.output("labels.sraw"), labels, rgb.pitch_um);
  render_labels_png(log.output("labels.png"), labels);
  std::array<std::size_t, kStructureClasses> n{};
  for (auto v : labels.values) ++n[v];
  log.note("class_pixels", n);
}

// Sites joined across localization and force fitting, mapped into the
// structure map.
struct PropagationInputs {
  LabelMap labels;
  double pitch_um = 1.0;
  int roi_side = 0;
  std::vector<StructureROI> rois;
  std::vector<ScanArea> scans;
  json sites = json::array();
  json excluded = json::array();
};

inline PropagationInputs prepare_propagation(const Config& cfg, const Paths& io, RunLog& log) {
  PropagationInputs in;
  const Raster lr = read_raster(log.input(io.at("labels")));
  in.labels = labels_from_raster(lr);
  in.pitch_um = lr.pitch_um;
  in.roi_side = std::max(1, static_cast<int>(std::lround(cfg.roi_um / in.pitch_um)));
  const auto located = load_sites(io.at("sites"), log);
  const auto measured = load_measurements(io.at("measurements"), log);
  const auto he_to_un = load_transform(io.at("he-registration"), log);
  const auto un_to_he = he_to_un.inverse();
  for (const auto& [id, m] : measured) {
    auto it = located.find(id);
    if (it == located.end()) {
      in.excluded.push_back({{"site_id", id}, {"reason", "not localized"}});
      continue;
    }
    const Point he = un_to_he.apply(it->second.position_px);
    const int cx = static_cast<int>(std::lround(he.x)), cy = static_cast<int>(std::lround(he.y));
    try {
      in.rois.push_back(extract_roi(in.labels, cx, cy, in.roi_side, id, m.mean_pa));
    } catch (const Error& e) {
      in.excluded.push_back({{"site_id", id}, {"reason", e.what()}});
      continue;
    }
    // FOV axes relative to the structure map: undo the H&E rotation and the FOV rotation.
    in.scans.push_back(scan_area(m, he, in.pitch_um, -(he_to_un.rotation_deg + it->second.rotation_deg)));
    in.sites.push_back({{"site_id", id}, {"structure_px", json_of(he)}, {"roi_center_px", {cx, cy}}, {"mean_pa", m.mean_pa}});
  }
  for (const auto& [id, l] : located)
    if (!measured.count(id)) in.excluded.push_back({{"site_id", id}, {"reason", "no force measurement"}});
  require(!in.rois.empty(), Errc::propagation_failed, "no site has both a location and a measurement");
  return in;
}

inline void stage_propagate(const Config& cfg, const Paths& io, RunLog& log) {
  const auto in = prepare_propagation(cfg, io, log);
  const auto cmap = log.timed("correlation", [&] { return correlation_argmax(in.rois, in.labels); });
  const auto map = propagate_stiffness(cmap, in.rois, cfg.threshold, in.scans);
  std::vector<std::size_t> per_site(in.rois.size(), 0);
  for (std::size_t i = 0; i < map.provenance.size(); ++i)
    if (map.provenance[i] == Provenance::propagated) ++per_site[cmap.best_site.values[i]];
  json sites = in.sites;
  for (std::size_t k = 0; k < sites.size(); ++k) sites[k]["propagated_pixels"] = per_site[k];
  json skipped = json::array();
  for (int k : cmap.skipped) skipped.push_back(in.rois[k].site_id);
  save_stiffness(map, in.pitch_um, log.output("stiffness.sraw"), log.output("provenance.sraw"));
  const double hi = render_stiffness_png(log.output("stiffness.png"), map, cfg);
  write_json(log.output("propagate.json"), {{"format", "stiffmap-propagate"},
                                            {"threshold", cfg.threshold},
                                            {"roi_side_px", in.roi_side},
                                            {"sites", sites},
                                            {"excluded", in.excluded},
                                            {"skipped", skipped},
                                            {"warnings", cmap.warnings},
                                            {"counts", counts_json(map)},
                                            {"summary", summary_json(summarize(map))},
                                            {"render_max_pa", hi}});
}

inline void stage_interpolate(const Config& cfg, const Paths& io, RunLog& log) {
  const auto map = load_stiffness(io.at("stiffness"), io.at("provenance"), log);
  const double pitch = read_raster(io.at("stiffness")).pitch_um;
  const auto out = log.timed("mwls", [&] { return interpolate_mwls(map, cfg.interp_window_px, cfg.interp_min_points); });
  save_stiffness(out, pitch, log.output("stiffness.sraw"), log.output("provenance.sraw"));
  const double hi = render_stiffness_png(log.output("stiffness.png"), out, cfg);
  write_json(log.output("interpolate.json"), {{"format", "stiffmap-interpolate"},
                                              {"window_px", cfg.interp_window_px},
                                              {"min_points", cfg.interp_min_points},
                                              {"counts", counts_json(out)},
                                              {"render_max_pa", hi}});
}

inline json loocv_json(const LoocvReport& r, double threshold) {
  json folds = json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"site_id", f.site_id},
                     {"mean_pa", f.failed ? json(nullptr) : json(f.mean_pa)},
                     {"delta_percent", f.failed ? json(nullptr) : json(f.delta_percent)},
                     {"share", f.share},
                     {"dominant", f.dominant},
                     {"failed", f.failed},
                     {"error", f.failed ? json(f.error) : json(nullptr)}});
  return {{"threshold", threshold}, {"full_mean_pa", r.full_mean_pa}, {"full_pixels", r.full_pixels}, {"folds", folds}};
}

inline void stage_loocv(const Config& cfg, const Paths& io, RunLog& log) {
  const auto in = prepare_propagation(cfg, io, log);
  require(in.rois.size() >= 2, Errc::insufficient_samples, "leave-one-out needs at least two sites");
  const auto stack = log.timed("correlation", [&] { return correlation_scores(in.rois, in.labels); });
  const auto rep = log.timed("folds", [&] { return loocv(in.rois, stack, cfg.threshold); });
  json j = loocv_json(rep, cfg.threshold);
  j["format"] = "stiffmap-loocv";
  j["excluded"] = in.excluded;
  write_json(log.output("loocv.json"), j);
}

inline void stage_stats(const Config& cfg, const Paths& io, RunLog& log) {
  const auto map = load_stiffness(io.at("stiffness"), io.at("provenance"), log);
  const auto include = statistics_default();
  json j = {{"format", "stiffmap-stats"},
            {"include", {provenance_name(Provenance::measured), provenance_name(Provenance::propagated)}},
            {"counts", counts_json(map)},
            {"summary", summary_json(summarize(map, include))},
            {"comparison", nullptr},
            {"loocv", nullptr}};
  if (io.has("compare-stiffness")) {
    const auto other = load_stiffness(io.at("compare-stiffness"), io.at("compare-provenance"), log);
    const auto c = log.timed("compare", [&] {
      return compare_samples(map, other, cfg.stats_points, cfg.stats_trials, cfg.stats_seed, include);
    });
    j["comparison"] = {{"n_points", cfg.stats_points},
                       {"trials", cfg.stats_trials},
                       {"seed", cfg.stats_seed},
                       {"other_summary", summary_json(summarize(other, include))},
                       {"mean_p", c.mean_p},
                       {"p_values", c.p_values},
                       {"t_values", c.t_values}};
  }
  if (io.has("loocv")) {
    json l = read_json(log.input(io.at("loocv")));
    check_format(l, "stiffmap-loocv", io.at("loocv"));
    l.erase("format");
    j["loocv"] = l;
  }
  write_json(log.output("stats.json"), j);
}

}  // namespace stiffmap::cli
