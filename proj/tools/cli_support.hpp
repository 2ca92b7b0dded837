#pragma once

// Configuration, run logs and file helpers shared by the CLI stages.

#include <openssl/evp.h>

#include <json.hpp>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/forcecurve.hpp"
#include "stiffmap/mlp.hpp"
#include "stiffmap/propagate.hpp"
#include "stiffmap/raster_io.hpp"
#include "stiffmap/register.hpp"
#include "stiffmap/synth.hpp"

namespace stiffmap::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStage = 3;

// ---------------------------------------------------------------------------
// Configuration

struct Config {
  int threads = 0;
  synth::SampleParams synth;
  FitOptions fit;
  LocalizeOptions localize;
  HeRegistrationOptions register_he;
  KMeansOptions cluster;
  std::size_t cluster_max_points = 200000;
  TrainOptions train{.batch_size = 0};  // 0: four times the largest image dimension
  double threshold = kDefaultCorrelationThreshold;
  double roi_um = 13.0;
  int interp_window_px = 64;
  int interp_min_points = 8;
  int stats_points = 50;
  int stats_trials = 100;
  std::uint64_t stats_seed = 0;
  std::optional<double> render_max_pa;
  double render_percentile = 99.0;
};

// Reads an object while recording which keys were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(std::string("'") + key + "' has the wrong type");
    }
  }

  void get(const char* key, std::optional<double>& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (v.is_null()) out.reset();
    else if (v.is_number()) out = v.get<double>();
    else fail(std::string("'") + key + "' must be a number or null");
  }

  std::optional<Section> sub(const char* key) {
    used_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) fail("unknown key '" + k + "'");
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw Error(Errc::config, (path_.empty() ? std::string("config") : path_) + ": " + why);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void check_config(const Config& c) {
  auto need = [](bool ok, const std::string& why) { require(ok, Errc::config, why); };
  need(c.threads >= 0, "threads must be >= 0");
  need(c.fit.noise_k > 0.0, "fit_curves.noise_k must be positive");
  need(c.localize.ncc_floor >= -1.0 && c.localize.ncc_floor <= 1.0, "localize.ncc_floor must lie in [-1, 1]");
  need(c.localize.occlusion_threshold > 0.0 && c.localize.occlusion_threshold < 1.0,
       "localize.occlusion_threshold must lie in (0, 1)");
  need(c.localize.rotation.range_deg >= 0.0 && c.localize.rotation.step_deg > 0.0,
       "localize rotation search needs range >= 0 and step > 0");
  need(c.register_he.rotation.range_deg >= 0.0 && c.register_he.rotation.step_deg > 0.0,
       "register_he rotation search needs range >= 0 and step > 0");
  need(c.register_he.mask_smoothing_px >= 0.0, "register_he mask_smoothing_px must be >= 0");
  need(c.cluster.k >= 1 && c.cluster.replicates >= 1 && c.cluster.max_iterations >= 1,
       "cluster.k, replicates and max_iterations must be >= 1");
  need(c.train.epochs >= 1 && c.train.batch_size >= 0 && c.train.learning_rate > 0.0,
       "train.epochs >= 1, batch_size >= 0 and learning_rate > 0 required");
  need(c.train.validation_fraction >= 0.0 && c.train.validation_fraction < 1.0,
       "train.validation_fraction must lie in [0, 1)");
  need(std::isfinite(c.threshold), "propagate.threshold must be finite");
  need(c.roi_um > 0.0, "propagate.roi_um must be positive");
  need(c.interp_window_px >= 1 && c.interp_min_points >= 1, "interpolate window and min_points must be >= 1");
  need(c.stats_points >= 2 && c.stats_trials >= 1, "stats.n_points >= 2 and stats.trials >= 1 required");
  need(!c.render_max_pa || *c.render_max_pa > 0.0, "render.max_pa must be positive");
  need(c.render_percentile > 0.0 && c.render_percentile <= 100.0, "render.percentile must lie in (0, 100]");
}

inline Config parse_config(const json& j) {
  Config c;
  Section root(j, "");
  int version = 0;
  root.get("schema_version", version);
  if (version != kSchemaVersion)
    root.fail("schema_version must be " + std::to_string(kSchemaVersion));
  root.get("threads", c.threads);
  if (auto s = root.sub("synth")) {
    auto& p = c.synth;
    s->get("seed", p.seed);
    s->get("he_grid", p.he_grid);
    s->get("he_tile_px", p.he_tile_px);
    s->get("he_overlap", p.he_overlap);
    s->get("he_jitter_px", p.he_jitter_px);
    s->get("unstained_grid", p.un_grid);
    s->get("unstained_tile_px", p.un_tile_px);
    s->get("unstained_overlap", p.un_overlap);
    s->get("unstained_jitter_px", p.un_jitter_px);
    s->get("z_planes", p.z_planes);
    s->get("z_spacing_um", p.z_spacing_um);
    s->get("texture_mean_pa", p.texture_mean_pa);
    s->get("texture_sd_pa", p.texture_sd_pa);
    s->get("stiffness_grain_px", p.stiffness_grain_px);
    s->get("sites_per_texture", p.sites_per_texture);
    s->get("curve_rows", p.curve_rows);
    s->get("curve_cols", p.curve_cols);
    s->get("scan_um", p.scan_um);
    s->get("curve_snr_db", p.curve_snr_db);
    s->get("he_rotation_deg", p.he_rotation_deg);
    s->get("fov_rotation_max_deg", p.fov_rotation_max_deg);
    s->get("cantilever_shift_max_px", p.cantilever_shift_max_px);
    s->get("bead_radius_um", p.indenter.bead_radius_um);
    s->get("poisson_ratio", p.indenter.poisson_ratio);
    s->finish();
  }
  if (auto s = root.sub("fit_curves")) {
    s->get("noise_k", c.fit.noise_k);
    s->finish();
  }
  if (auto s = root.sub("localize")) {
    s->get("ncc_floor", c.localize.ncc_floor);
    s->get("occlusion_threshold", c.localize.occlusion_threshold);
    s->get("min_occlusion_fraction", c.localize.min_occlusion_fraction);
    s->get("rotation_range_deg", c.localize.rotation.range_deg);
    s->get("rotation_step_deg", c.localize.rotation.step_deg);
    s->finish();
  }
  if (auto s = root.sub("register_he")) {
    s->get("ncc_floor", c.register_he.ncc_floor);
    s->get("mask_smoothing_px", c.register_he.mask_smoothing_px);
    s->get("rotation_range_deg", c.register_he.rotation.range_deg);
    s->get("rotation_step_deg", c.register_he.rotation.step_deg);
    s->finish();
  }
  if (auto s = root.sub("cluster")) {
    s->get("k", c.cluster.k);
    s->get("replicates", c.cluster.replicates);
    s->get("max_iterations", c.cluster.max_iterations);
    s->get("tolerance", c.cluster.tolerance);
    s->get("seed", c.cluster.seed);
    s->get("max_points", c.cluster_max_points);
    s->finish();
  }
  if (auto s = root.sub("train")) {
    s->get("epochs", c.train.epochs);
    s->get("batch_size", c.train.batch_size);
    s->get("learning_rate", c.train.learning_rate);
    s->get("validation_fraction", c.train.validation_fraction);
    s->get("seed", c.train.seed);
    s->finish();
  }
  if (auto s = root.sub("propagate")) {
    s->get("threshold", c.threshold);
    s->get("roi_um", c.roi_um);
    s->finish();
  }
  if (auto s = root.sub("interpolate")) {
    s->get("window_px", c.interp_window_px);
    s->get("min_points", c.interp_min_points);
    s->finish();
  }
  if (auto s = root.sub("stats")) {
    s->get("n_points", c.stats_points);
    s->get("trials", c.stats_trials);
    s->get("seed", c.stats_seed);
    s->finish();
  }
  if (auto s = root.sub("render")) {
    s->get("max_pa", c.render_max_pa);
    s->get("percentile", c.render_percentile);
    s->finish();
  }
  root.finish();
  check_config(c);
  return c;
}

inline json config_to_json(const Config& c) {
  const auto& p = c.synth;
  return {
      {"schema_version", kSchemaVersion},
      {"threads", c.threads},
      {"synth",
       {{"seed", p.seed},
        {"he_grid", p.he_grid},
        {"he_tile_px", p.he_tile_px},
        {"he_overlap", p.he_overlap},
        {"he_jitter_px", p.he_jitter_px},
        {"unstained_grid", p.un_grid},
        {"unstained_tile_px", p.un_tile_px},
        {"unstained_overlap", p.un_overlap},
        {"unstained_jitter_px", p.un_jitter_px},
        {"z_planes", p.z_planes},
        {"z_spacing_um", p.z_spacing_um},
        {"texture_mean_pa", p.texture_mean_pa},
        {"texture_sd_pa", p.texture_sd_pa},
        {"stiffness_grain_px", p.stiffness_grain_px},
        {"sites_per_texture", p.sites_per_texture},
        {"curve_rows", p.curve_rows},
        {"curve_cols", p.curve_cols},
        {"scan_um", p.scan_um},
        {"curve_snr_db", p.curve_snr_db ? json(*p.curve_snr_db) : json(nullptr)},
        {"he_rotation_deg", p.he_rotation_deg},
        {"fov_rotation_max_deg", p.fov_rotation_max_deg},
        {"cantilever_shift_max_px", p.cantilever_shift_max_px},
        {"bead_radius_um", p.indenter.bead_radius_um},
        {"poisson_ratio", p.indenter.poisson_ratio}}},
      {"fit_curves", {{"noise_k", c.fit.noise_k}}},
      {"localize",
       {{"ncc_floor", c.localize.ncc_floor},
        {"occlusion_threshold", c.localize.occlusion_threshold},
        {"min_occlusion_fraction", c.localize.min_occlusion_fraction},
        {"rotation_range_deg", c.localize.rotation.range_deg},
        {"rotation_step_deg", c.localize.rotation.step_deg}}},
      {"register_he",
       {{"ncc_floor", c.register_he.ncc_floor},
        {"mask_smoothing_px", c.register_he.mask_smoothing_px},
        {"rotation_range_deg", c.register_he.rotation.range_deg},
        {"rotation_step_deg", c.register_he.rotation.step_deg}}},
      {"cluster",
       {{"k", c.cluster.k},
        {"replicates", c.cluster.replicates},
        {"max_iterations", c.cluster.max_iterations},
        {"tolerance", c.cluster.tolerance},
        {"seed", c.cluster.seed},
        {"max_points", c.cluster_max_points}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"validation_fraction", c.train.validation_fraction},
        {"seed", c.train.seed}}},
      {"propagate", {{"threshold", c.threshold}, {"roi_um", c.roi_um}}},
      {"interpolate", {{"window_px", c.interp_window_px}, {"min_points", c.interp_min_points}}},
      {"stats", {{"n_points", c.stats_points}, {"trials", c.stats_trials}, {"seed", c.stats_seed}}},
      {"render",
       {{"max_pa", c.render_max_pa ? json(*c.render_max_pa) : json(nullptr)},
        {"percentile", c.render_percentile}}},
  };
}

// ---------------------------------------------------------------------------
// Files

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(Errc::malformed, path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

inline Config load_config(const std::optional<fs::path>& path) {
  if (!path) return {};
  json j;
  try {
    j = read_json(*path);
  } catch (const Error& e) {
    throw Error(Errc::config, e.what());
  }
  return parse_config(j);
}

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, void (*)(EVP_MD_CTX*)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  require(ctx && EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) == 1, Errc::io, "sha256 init failed");
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

// Relative paths in a manifest resolve against the manifest's directory.
inline fs::path resolve(const fs::path& manifest, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : manifest.parent_path() / q;
}

inline Point point_of(const json& j) {
  require(j.is_array() && j.size() == 2, Errc::malformed, "expected an [x, y] pair");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline json json_of(Point p) { return json::array({p.x, p.y}); }

// ---------------------------------------------------------------------------
// Run log: every stage records hashed inputs and outputs, parameters and
// timings in <out>/<stage>.run.json.

class RunLog {
 public:
  RunLog(std::string stage, fs::path out_dir, const Config& cfg)
      : stage_(std::move(stage)), out_dir_(std::move(out_dir)), params_(config_to_json(cfg)),
        start_(std::chrono::steady_clock::now()) {}

  const fs::path& out_dir() const { return out_dir_; }

  const fs::path& input(const fs::path& p) {
    require(fs::is_regular_file(p), Errc::io, "missing input " + p.string());
    inputs_.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    return p;
  }
  fs::path output(const std::string& name) {
    outputs_.push_back(out_dir_ / name);
    return out_dir_ / name;
  }
  void note(const std::string& key, json value) { notes_[key] = std::move(value); }

  template <class F>
  auto timed(const std::string& what, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      timings_[what] = seconds_since(t0);
    } else {
      auto r = f();
      timings_[what] = seconds_since(t0);
      return r;
    }
  }

  void write(const std::string& status, const std::string& error = {}) {
    json outs = json::array();
    for (const auto& p : outputs_)
      if (fs::is_regular_file(p)) outs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    timings_["total"] = seconds_since(start_);
    json j = {{"format", "stiffmap-run-log"},
              {"schema_version", kSchemaVersion},
              {"tool_version", kToolVersion},
              {"stage", stage_},
              {"status", status},
              {"error", error.empty() ? json(nullptr) : json(error)},
              {"threads", thread_count()},
              {"parameters", params_},
              {"inputs", inputs_},
              {"outputs", outs},
              {"notes", notes_},
              {"timings_s", timings_}};
    write_json(out_dir_ / (stage_ + ".run.json"), j);
  }

 private:
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  std::string stage_;
  fs::path out_dir_;
  json params_;
  json inputs_ = json::array();
  std::vector<fs::path> outputs_;
  json notes_ = json::object();
  json timings_ = json::object();
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Rendering

// Perceptually ordered dark-blue -> green -> yellow ramp.
inline Color3 colormap(double t) {
  static const std::array<Color3, 9> ramp{{{0.267, 0.005, 0.329},
                                           {0.278, 0.175, 0.483},
                                           {0.231, 0.322, 0.546},
                                           {0.173, 0.449, 0.558},
                                           {0.128, 0.567, 0.551},
                                           {0.153, 0.680, 0.504},
                                           {0.362, 0.786, 0.388},
                                           {0.678, 0.864, 0.190},
                                           {0.993, 0.906, 0.144}}};
  t = std::clamp(t, 0.0, 1.0) * (ramp.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(t), ramp.size() - 2);
  const double f = t - static_cast<double>(i);
  Color3 c;
  for (int k = 0; k < 3; ++k) c[k] = (1.0 - f) * ramp[i][k] + f * ramp[i + 1][k];
  return c;
}

// Colormapped stiffness; values above the truncation limit saturate and
// unassigned pixels are black. Returns the limit used.
inline double render_stiffness_png(const fs::path& path, const StiffnessMap& m, const Config& cfg) {
  std::vector<double> v;
  for (std::size_t i = 0; i < m.values_pa.size(); ++i)
    if (m.provenance[i] != Provenance::unassigned) v.push_back(m.values_pa[i]);
  double hi = 1.0;
  if (cfg.render_max_pa) {
    hi = *cfg.render_max_pa;
  } else if (!v.empty()) {
    std::sort(v.begin(), v.end());
    const auto k = static_cast<std::size_t>(std::ceil(cfg.render_percentile / 100.0 * v.size())) - 1;
    hi = std::max(v[std::min(k, v.size() - 1)], 1e-12);
  }
  Raster out(m.width, m.height, 3, 1.0, 0.0f);
  for (std::size_t i = 0; i < m.values_pa.size(); ++i) {
    if (m.provenance[i] == Provenance::unassigned) continue;
    const auto c = colormap(m.values_pa[i] / hi);
    for (int k = 0; k < 3; ++k) out.data[i * 3 + k] = static_cast<float>(c[k]);
  }
  write_png(path, out);
  return hi;
}

inline void render_labels_png(const fs::path& path, const LabelMap& labels) {
  const auto pal = synth::default_palettes();
  Raster out(labels.width, labels.height, 3, 1.0);
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    const auto c = hsv_to_rgb(pal[labels.values[i]].hsv);
    for (int k = 0; k < 3; ++k) out.data[i * 3 + k] = static_cast<float>(c[k]);
  }
  write_png(path, out);
}

}  // namespace stiffmap::cli
