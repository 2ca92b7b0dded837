#pragma once

// AFM force-curve analysis with the spherical Hertz contact model
//
//   F = 4/3 * E / (1 - nu^2) * sqrt(R) * delta^(3/2)
//
// Units: separation and indentation in um, force in nN, modulus in Pa. With
// these units nN/um^1.5 equals N/m^1.5, so a slope m of F against
// delta^(3/2) gives E = 3 m (1 - nu^2) / (4 sqrt(R_m)).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stiffmap/error.hpp"
#include "stiffmap/parallel.hpp"
#include "stiffmap/random.hpp"
#include "stiffmap/raster.hpp"
#include "stiffmap/raster_io.hpp"

namespace stiffmap {

inline constexpr std::size_t kMinCurveSamples = 16;
inline constexpr std::size_t kMinPostContactSamples = 8;
inline constexpr int kContactRun = 5;

struct ForceCurve {
  std::vector<double> separation_um;
  std::vector<double> force_nN;

  std::size_t size() const { return force_nN.size(); }

  void validate() const {
    require(separation_um.size() == force_nN.size(), Errc::invalid_argument,
            "force curve series lengths differ");
    require(size() >= kMinCurveSamples, Errc::insufficient_samples,
            "force curve needs at least 16 samples");
    const bool increasing = separation_um.back() > separation_um.front();
    for (std::size_t i = 1; i < size(); ++i) {
      const double step = separation_um[i] - separation_um[i - 1];
      require(increasing ? step > 0.0 : step < 0.0, Errc::invalid_argument,
              "separations must be strictly monotone");
    }
    for (std::size_t i = 0; i < size(); ++i)
      require(std::isfinite(force_nN[i]) && std::isfinite(separation_um[i]), Errc::non_finite,
              "force curve holds non-finite values");
  }
};

struct IndenterSpec {
  double bead_radius_um = 5.0;
  double poisson_ratio = 0.5;

  void validate() const {
    require(bead_radius_um > 0.0, Errc::invalid_argument, "bead radius must be positive");
    require(poisson_ratio >= 0.0 && poisson_ratio <= 0.5 + 1e-12, Errc::invalid_argument,
            "poisson ratio must lie in [0, 0.5]");
  }

  double max_indentation_um() const { return bead_radius_um / 2.0; }
};

// Hertz force (nN) for indentation delta (um); zero for delta <= 0.
inline double hertz_force_nN(double modulus_pa, double indentation_um, const IndenterSpec& spec) {
  if (indentation_um <= 0.0) return 0.0;
  const double radius_m = spec.bead_radius_um * 1e-6;
  const double delta_m = indentation_um * 1e-6;
  const double nu = spec.poisson_ratio;
  const double newtons = 4.0 / 3.0 * modulus_pa / (1.0 - nu * nu) * std::sqrt(radius_m) *
                         std::pow(delta_m, 1.5);
  return newtons * 1e9;
}

inline double modulus_from_slope(double slope, const IndenterSpec& spec) {
  const double nu = spec.poisson_ratio;
  return 3.0 * slope * (1.0 - nu * nu) / (4.0 * std::sqrt(spec.bead_radius_um * 1e-6));
}

// ---------------------------------------------------------------------------
// Contact detection

struct ContactPoint {
  std::size_t index = 0;  // first of kContactRun consecutive samples above threshold
  double baseline_nN = 0.0;
  double baseline_sd_nN = 0.0;
};

inline std::size_t baseline_length(std::size_t n) { return std::max<std::size_t>(2, n / 4); }

// Baseline statistics come from the first 25% of samples (acquisition order
// is approach order).
inline ContactPoint detect_contact_point(const ForceCurve& curve, double noise_k = 5.0) {
  curve.validate();
  const std::size_t q = baseline_length(curve.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < q; ++i) mean += curve.force_nN[i];
  mean /= static_cast<double>(q);
  double var = 0.0;
  for (std::size_t i = 0; i < q; ++i) var += (curve.force_nN[i] - mean) * (curve.force_nN[i] - mean);
  const double sd = std::sqrt(var / static_cast<double>(q));
  const double threshold = mean + noise_k * sd;

  int run = 0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    run = curve.force_nN[i] > threshold ? run + 1 : 0;
    if (run == kContactRun) return {i + 1 - kContactRun, mean, sd};
  }
  throw Error(Errc::no_contact, "force never exceeds baseline + " + std::to_string(noise_k) + " sd");
}

// ---------------------------------------------------------------------------
// Hertz fit

struct FitOptions {
  double noise_k = 5.0;
};

struct HertzFit {
  double modulus_pa = 0.0;
  double residual_nN = 0.0;  // RMS over post-contact samples
  double slope = 0.0;        // nN / um^1.5
  double contact_separation_um = 0.0;
  std::size_t contact_index = 0;
  std::size_t post_contact_samples = 0;
};

namespace detail {

struct ContactCandidate {
  double sse;
  double slope;
  std::size_t post;
};

// Least-squares slope through the origin of F' against delta_+^(3/2) for a
// given contact separation over samples [first, last); pre-contact samples
// contribute F'^2 to the SSE. Samples deeper than `cap` are skipped.
inline ContactCandidate evaluate_contact(const ForceCurve& c, std::size_t first, std::size_t last,
                                         double baseline, double contact_sep, double direction,
                                         double cap) {
  double sfd = 0.0, sdd = 0.0, sff = 0.0;
  std::size_t post = 0;
  for (std::size_t i = first; i < last; ++i) {
    const double delta = direction * (c.separation_um[i] - contact_sep);
    if (delta > cap) continue;
    const double f = c.force_nN[i] - baseline;
    sff += f * f;
    if (delta > 0.0) {
      const double d15 = delta * std::sqrt(delta);
      sfd += f * d15;
      sdd += d15 * d15;
      ++post;
    }
  }
  const double slope = sdd > 0.0 ? sfd / sdd : 0.0;
  return {sff - slope * sfd, slope, post};
}

}  // namespace detail

inline HertzFit fit_hertz(const ForceCurve& curve, const IndenterSpec& spec,
                          const FitOptions& opts = {}) {
  spec.validate();
  const ContactPoint cp = detect_contact_point(curve, opts.noise_k);
  const std::size_t n = curve.size();
  const std::size_t first = baseline_length(n);
  const double direction = curve.separation_um.back() > curve.separation_um.front() ? 1.0 : -1.0;
  const double cap = spec.max_indentation_um();

  // The contact search runs over a fixed sample window so candidates are
  // compared on the same data: it ends where indentation measured from the
  // detected sample reaches the cap. The contact is bracketed between the
  // end of the baseline window and the detected index (plus two samples).
  std::size_t window_end = cp.index;
  while (window_end < n &&
         direction * (curve.separation_um[window_end] - curve.separation_um[cp.index]) <= cap)
    ++window_end;
  const std::size_t lo_idx = std::min(first, cp.index);
  const std::size_t hi_idx = std::min(n - 1, cp.index + 2);
  auto objective = [&](double sep) {
    return detail::evaluate_contact(curve, first, window_end, cp.baseline_nN, sep, direction,
                                    std::numeric_limits<double>::infinity());
  };

  std::size_t best_idx = lo_idx;
  double best_sse = objective(curve.separation_um[lo_idx]).sse;
  for (std::size_t i = lo_idx + 1; i <= hi_idx; ++i) {
    const double sse = objective(curve.separation_um[i]).sse;
    if (sse < best_sse) {
      best_sse = sse;
      best_idx = i;
    }
  }
  // Golden-section refinement between the neighbouring samples.
  double a = curve.separation_um[best_idx > 0 ? best_idx - 1 : best_idx];
  double b = curve.separation_um[std::min(best_idx + 1, n - 1)];
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - invphi * (b - a), x2 = a + invphi * (b - a);
  double f1 = objective(x1).sse, f2 = objective(x2).sse;
  for (int it = 0; it < 100 && std::abs(b - a) > 1e-12; ++it) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - invphi * (b - a);
      f1 = objective(x1).sse;
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + invphi * (b - a);
      f2 = objective(x2).sse;
    }
  }
  double contact = 0.5 * (a + b);
  if (objective(contact).sse > best_sse) contact = curve.separation_um[best_idx];

  const auto fit =
      detail::evaluate_contact(curve, first, n, cp.baseline_nN, contact, direction, cap);
  if (fit.post < kMinPostContactSamples)
    throw Error(Errc::insufficient_samples,
                "only " + std::to_string(fit.post) + " post-contact samples within the fit window");
  if (!(fit.slope > 0.0))
    throw Error(Errc::non_physical_fit, "Hertz slope is not positive");

  double sq = 0.0;
  for (std::size_t i = first; i < n; ++i) {
    const double delta = direction * (curve.separation_um[i] - contact);
    if (delta <= 0.0 || delta > cap) continue;
    const double r = curve.force_nN[i] - cp.baseline_nN - fit.slope * delta * std::sqrt(delta);
    sq += r * r;
  }
  HertzFit out;
  out.slope = fit.slope;
  out.modulus_pa = modulus_from_slope(fit.slope, spec);
  out.residual_nN = std::sqrt(sq / static_cast<double>(fit.post));
  out.contact_separation_um = contact;
  out.contact_index = cp.index;
  out.post_contact_samples = fit.post;
  return out;
}

// ---------------------------------------------------------------------------
// Measurement sites

struct MeasurementSite {
  int site_id = 0;
  Point center_um;
  double area_um = 10.0;  // side of the scanned square
  int rows = 0;
  int cols = 0;
  std::vector<double> moduli_pa;   // row-major, 0 where invalid
  std::vector<std::uint8_t> valid;  // row-major
  double mean_pa = 0.0;
  double std_pa = 0.0;

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
};

// Population mean / standard deviation over valid cells, in cell order.
inline void recompute_site_stats(MeasurementSite& site) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < site.moduli_pa.size(); ++i)
    if (site.valid[i]) {
      sum += site.moduli_pa[i];
      ++n;
    }
  require(n > 0, Errc::site_rejected, "site has no valid cells");
  site.mean_pa = sum / static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < site.moduli_pa.size(); ++i)
    if (site.valid[i]) var += (site.moduli_pa[i] - site.mean_pa) * (site.moduli_pa[i] - site.mean_pa);
  site.std_pa = std::sqrt(var / static_cast<double>(n));
}

// Fits every curve of a rows x cols grid (row-major). Cells whose fit
// fails are marked invalid; more than half invalid rejects the site.
inline MeasurementSite fit_site_grid(const std::vector<ForceCurve>& curves, int rows, int cols,
                                     const IndenterSpec& spec, Point center_um, int site_id = 0,
                                     const FitOptions& opts = {}, double area_um = 10.0) {
  require(rows > 0 && cols > 0 && curves.size() == static_cast<std::size_t>(rows) * cols,
          Errc::invalid_argument, "curve grid is not rectangular");
  MeasurementSite site;
  site.site_id = site_id;
  site.center_um = center_um;
  site.area_um = area_um;
  site.rows = rows;
  site.cols = cols;
  site.moduli_pa.assign(curves.size(), 0.0);
  site.valid.assign(curves.size(), 0);
  parallel_for(0, static_cast<std::ptrdiff_t>(curves.size()), [&](std::ptrdiff_t i) {
    try {
      const auto fit = fit_hertz(curves[i], spec, opts);
      site.moduli_pa[i] = fit.modulus_pa;
      site.valid[i] = 1;
    } catch (const Error&) {
      // invalid cell
    }
  });
  const std::size_t ok = site.valid_count();
  if (2 * ok < curves.size())
    throw Error(Errc::site_rejected, "site " + std::to_string(site_id) + ": " +
                                         std::to_string(curves.size() - ok) + "/" +
                                         std::to_string(curves.size()) + " curves failed");
  recompute_site_stats(site);
  return site;
}

// ---------------------------------------------------------------------------
// Synthetic curves

struct CurveShape {
  std::size_t samples = 256;
  double approach_um = 2.0;      // starting separation above the surface
  double max_indent_um = 2.0;    // final indentation below the surface
  double contact_um = 0.0;       // surface position on the separation axis
};

inline double snr_noise_sd(const std::vector<double>& clean_post_contact, double snr_db) {
  double p = 0.0;
  for (double f : clean_post_contact) p += f * f;
  p /= std::max<std::size_t>(1, clean_post_contact.size());
  return std::sqrt(p / std::pow(10.0, snr_db / 10.0));
}

// Approach curve (separation decreasing) forward-generated from the Hertz
// model. `snr_db` empty means noiseless.
inline ForceCurve synthesize_curve(double modulus_pa, const IndenterSpec& spec,
                                   const CurveShape& shape, std::optional<double> snr_db = {},
                                   Rng* rng = nullptr) {
  ForceCurve c;
  c.separation_um.resize(shape.samples);
  c.force_nN.resize(shape.samples);
  std::vector<double> post;
  for (std::size_t i = 0; i < shape.samples; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(shape.samples - 1);
    const double sep = shape.approach_um + t * (-shape.max_indent_um - shape.approach_um);
    c.separation_um[i] = sep + shape.contact_um;
    c.force_nN[i] = hertz_force_nN(modulus_pa, -sep, spec);
    if (-sep > 0.0) post.push_back(c.force_nN[i]);
  }
  if (snr_db) {
    require(*snr_db > 0.0, Errc::invalid_argument, "SNR must be positive");
    require(rng != nullptr, Errc::invalid_argument, "noisy curve needs a random generator");
    const double sd = snr_noise_sd(post, *snr_db);
    for (auto& f : c.force_nN) f += rng->normal(0.0, sd);
  }
  return c;
}

// ---------------------------------------------------------------------------
// CSV: header line, then "separation_um,force_nN" rows.

inline ForceCurve read_force_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io, "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Errc::malformed, "empty force curve file");
  {
    // The first line must be a header, not data.
    std::istringstream probe(line);
    double a = 0.0, b = 0.0;
    char comma = 0;
    require(!(probe >> a >> comma >> b && comma == ','), Errc::malformed,
            "force curve CSV needs a header line");
  }
  ForceCurve c;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    require(comma != std::string::npos, Errc::malformed,
            path.string() + ":" + std::to_string(lineno) + ": expected two columns");
    try {
      std::size_t used = 0;
      const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
      const double sep = std::stod(a, &used);
      require(used == a.size(), Errc::malformed, "trailing characters");
      const double f = std::stod(b, &used);
      require(used == b.size(), Errc::malformed, "trailing characters");
      c.separation_um.push_back(sep);
      c.force_nN.push_back(f);
    } catch (const std::logic_error&) {
      throw Error(Errc::malformed, path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  c.validate();
  return c;
}

inline void write_force_curve_csv(const std::filesystem::path& path, const ForceCurve& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot open " + path.string() + " for writing");
  out << "separation_um,force_nN\n";
  for (std::size_t i = 0; i < c.size(); ++i)
    out << format_double(c.separation_um[i]) << ',' << format_double(c.force_nN[i]) << '\n';
}

}  // namespace stiffmap
