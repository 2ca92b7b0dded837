// stiffmap command line: one subcommand per pipeline stage plus `pipeline`,
// which chains them over a sample manifest.

#include <CLI11.hpp>

#include <functional>
#include <iostream>

#include "stages.hpp"

using namespace stiffmap;
using namespace stiffmap::cli;

namespace {

using StageFn = void (*)(const Config&, const Paths&, RunLog&);

// Error(code, what(), stage) would repeat the code string; strip it.
Error retag(const Error& e, const std::string& stage) {
  std::string detail = e.what();
  const std::string prefix = std::string(to_string(e.code())) + ": ";
  if (detail.rfind(prefix, 0) == 0) detail = detail.substr(prefix.size());
  else if (detail == to_string(e.code())) detail.clear();
  return Error(e.code(), detail, stage);
}

// Runs one stage into its output directory; the run log is written on
// success and on failure.
void run(const std::string& name, StageFn fn, const Config& cfg, const Paths& io) {
  fs::create_directories(io.out);
  RunLog log(name, io.out, cfg);
  try {
    fn(cfg, io, log);
  } catch (const Error& e) {
    const Error tagged = e.stage().empty() ? retag(e, name) : e;
    log.write("failed", tagged.what());
    throw tagged;
  } catch (const std::exception& e) {
    log.write("failed", e.what());
    throw Error(Errc::io, e.what(), name);
  }
  log.write("ok");
}

void run_pipeline(const Config& cfg, const fs::path& sample, const fs::path& out) {
  const json s = read_json(sample);
  check_format(s, "stiffmap-sample", sample);
  auto entry = [&](const char* key) -> fs::path {
    require(s.contains(key) && s.at(key).is_string(), Errc::malformed, sample.string() + ": missing '" + key + "'");
    return resolve(sample, s.at(key).get<std::string>());
  };
  auto step = [&](const std::string& name, StageFn fn, std::map<std::string, fs::path> in) {
    Paths io{std::move(in), out / name};
    std::cerr << "[pipeline] " << name << "\n";
    run(name, fn, cfg, io);
    return io.out;
  };

  const auto he = step("stitch-he", stage_stitch, {{"layout", entry("he_layout")}}) / "mosaic.sraw";
  const auto un = step("stitch-unstained", stage_stitch, {{"layout", entry("unstained_layout")}}) / "mosaic.sraw";
  const auto meas = step("fit-curves", stage_fit_curves, {{"curves", entry("curves")}}) / "measurements.json";
  const auto sites =
      step("localize", stage_localize, {{"registration", entry("registration")}, {"wholesample", un}}) / "sites.json";
  const auto reg = step("register-he", stage_register_he, {{"he", he}, {"unstained", un}}) / "he_registration.json";
  std::map<std::string, fs::path> cl{{"image", he}};
  if (s.contains("palette")) cl["palette"] = entry("palette");
  const auto clu = step("cluster", stage_cluster, cl);
  require(fs::exists(clu / "assignment.json"), Errc::config,
          "the sample has no palette; run cluster, assign clusters by hand and continue stage by stage");
  const auto model = step("train", stage_train,
                          {{"image", he},
                           {"pseudocolor", clu / "pseudocolor.sraw"},
                           {"clusters", clu / "clusters.json"},
                           {"assignment", clu / "assignment.json"}}) /
                     "model.json";
  const auto labels = step("predict", stage_predict, {{"model", model}, {"image", he}}) / "labels.sraw";
  const std::map<std::string, fs::path> prop{
      {"labels", labels}, {"sites", sites}, {"measurements", meas}, {"he-registration", reg}};
  const auto pm = step("propagate", stage_propagate, prop);
  step("interpolate", stage_interpolate,
       {{"stiffness", pm / "stiffness.sraw"}, {"provenance", pm / "provenance.sraw"}});
  const auto lo = step("loocv", stage_loocv, prop) / "loocv.json";
  step("stats", stage_stats,
       {{"stiffness", pm / "stiffness.sraw"}, {"provenance", pm / "provenance.sraw"}, {"loocv", lo}});
}

struct Input {
  const char* key;
  const char* help;
  bool required = true;
};

struct StageDef {
  const char* name;
  const char* help;
  StageFn fn;
  std::vector<Input> inputs;
};

const std::vector<StageDef>& stage_defs() {
  static const std::vector<StageDef> defs = {
      {"synth", "generate a synthetic sample with ground truth", stage_synth, {}},
      {"edof", "fuse a z-stack into one extended depth of field image", stage_edof,
       {{"zstack", "z-stack manifest (stiffmap-zstack)"}}},
      {"stitch", "stitch a tile layout into a mosaic", stage_stitch,
       {{"layout", "tile layout manifest (stiffmap-layout)"}}},
      {"fit-curves", "fit Hertz moduli to force curve grids", stage_fit_curves,
       {{"curves", "force curve manifest (stiffmap-curves)"}}},
      {"localize", "locate AFM contact points in the unstained whole-sample image", stage_localize,
       {{"registration", "AFM image manifest (stiffmap-registration)"},
        {"wholesample", "stitched unstained image"}}},
      {"register-he", "register the H&E mosaic to the unstained mosaic", stage_register_he,
       {{"he", "stitched H&E image"}, {"unstained", "stitched unstained image"}}},
      {"cluster", "k-means pseudocoloring of an H&E image", stage_cluster,
       {{"image", "H&E RGB image"}, {"palette", "class palette for automatic cluster assignment", false}}},
      {"train", "train the structure classifier", stage_train,
       {{"image", "H&E RGB image"},
        {"pseudocolor", "pseudocolor raster from cluster"},
        {"clusters", "clusters.json"},
        {"assignment", "cluster to class assignment"}}},
      {"predict", "classify every pixel as lumen, cell or stroma", stage_predict,
       {{"model", "model.json"}, {"image", "H&E RGB image"}}},
      {"propagate", "propagate site stiffness through the structure map", stage_propagate,
       {{"labels", "structure labels raster"},
        {"sites", "sites.json from localize"},
        {"measurements", "measurements.json from fit-curves"},
        {"he-registration", "he_registration.json"}}},
      {"interpolate", "fill unassigned pixels by moving weighted least squares", stage_interpolate,
       {{"stiffness", "stiffness raster"}, {"provenance", "provenance raster"}}},
      {"loocv", "leave-one-site-out sensitivity of the mean stiffness", stage_loocv,
       {{"labels", "structure labels raster"},
        {"sites", "sites.json from localize"},
        {"measurements", "measurements.json from fit-curves"},
        {"he-registration", "he_registration.json"}}},
      {"stats", "summary statistics and sample comparison", stage_stats,
       {{"stiffness", "stiffness raster"},
        {"provenance", "provenance raster"},
        {"compare-stiffness", "second sample stiffness raster", false},
        {"compare-provenance", "second sample provenance raster", false},
        {"loocv", "loocv.json to include", false}}},
  };
  return defs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stiffmap: tissue stiffness maps from AFM sites and histology"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::optional<std::string> config_path;
  std::optional<int> threads;
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--threads", threads, "worker threads (0 = hardware)")->check(CLI::NonNegativeNumber);

  std::string out, sample;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  std::map<std::string, std::string> inputs;
  std::map<CLI::App*, const StageDef*> by_app;

  for (const auto& d : stage_defs()) {
    auto* sub = app.add_subcommand(d.name, d.help);
    sub->add_option("--out", out, "output directory")->required();
    for (const auto& in : d.inputs) {
      auto* opt = sub->add_option(std::string("--") + in.key, inputs[in.key], in.help);
      if (in.required) opt->required();
    }
    if (std::string(d.name) == "synth") sub->add_option("--seed", seed, "random seed");
    if (std::string(d.name) == "propagate" || std::string(d.name) == "loocv")
      sub->add_option("--threshold", threshold, "correlation threshold");
    by_app[sub] = &d;
  }
  auto* pipe = app.add_subcommand("pipeline", "run every stage over a sample manifest");
  pipe->add_option("--sample", sample, "sample manifest (stiffmap-sample)")->required();
  pipe->add_option("--out", out, "output directory")->required();
  pipe->add_option("--threshold", threshold, "correlation threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  std::string stage = "cli";
  try {
    Config cfg = load_config(config_path ? std::optional<fs::path>(*config_path) : std::nullopt);
    if (threads) cfg.threads = *threads;
    if (seed) cfg.synth.seed = *seed;
    if (threshold) cfg.threshold = *threshold;
    check_config(cfg);
    set_thread_count(cfg.threads);

    if (pipe->parsed()) {
      stage = "pipeline";
      run_pipeline(cfg, sample, out);
      return kExitOk;
    }
    for (const auto& [sub, def] : by_app) {
      if (!sub->parsed()) continue;
      stage = def->name;
      Paths io;
      io.out = out;
      for (const auto& in : def->inputs)
        if (!inputs[in.key].empty()) io.in[in.key] = inputs[in.key];
      if (io.has("compare-stiffness") != io.has("compare-provenance"))
        throw Error(Errc::config, "--compare-stiffness and --compare-provenance go together");
      run(def->name, def->fn, cfg, io);
    }
    return kExitOk;
  } catch (const Error& e) {
    std::cerr << (e.stage().empty() ? retag(e, stage) : e).what() << "\n";
    return e.code() == Errc::config ? kExitConfig : kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "[" << stage << "] " << e.what() << "\n";
    return kExitStage;
  }
}
