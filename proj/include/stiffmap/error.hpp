#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace stiffmap {

enum class Errc {
  invalid_argument,
  io,
  malformed,
  no_contact,
  non_physical_fit,
  insufficient_samples,
  site_rejected,
  degenerate,
  disconnected,
  zero_variance,
  localization_failed,
  registration_failed,
  missing_class,
  non_finite,
  unknown_color,
  no_coverage,
  empty_selection,
  propagation_failed,
  config,
};

inline const char* to_string(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::io: return "i/o error";
    case Errc::malformed: return "malformed input";
    case Errc::no_contact: return "no contact";
    case Errc::non_physical_fit: return "non-physical fit";
    case Errc::insufficient_samples: return "insufficient samples";
    case Errc::site_rejected: return "site rejected";
    case Errc::degenerate: return "degenerate input";
    case Errc::disconnected: return "disconnected tile graph";
    case Errc::zero_variance: return "zero variance";
    case Errc::localization_failed: return "localization failed";
    case Errc::registration_failed: return "registration failed";
    case Errc::missing_class: return "missing class";
    case Errc::non_finite: return "non-finite value";
    case Errc::unknown_color: return "unknown pseudo-color";
    case Errc::no_coverage: return "no propagation coverage";
    case Errc::empty_selection: return "empty selection";
    case Errc::propagation_failed: return "propagation failed";
    case Errc::config: return "configuration error";
  }
  return "error";
}

// Every library failure is reported as an Error. `stage` names the pipeline
// step that failed when one applies (e.g. "bead", "mask", "wholesample").
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail, std::string stage = {})
      : std::runtime_error(compose(code, detail, stage)),
        code_(code),
        stage_(std::move(stage)) {}

  Errc code() const noexcept { return code_; }
  const std::string& stage() const noexcept { return stage_; }

 private:
  static std::string compose(Errc code, const std::string& detail,
                             const std::string& stage) {
    std::string msg = to_string(code);
    if (!stage.empty()) msg = "[" + stage + "] " + msg;
    if (!detail.empty()) msg += ": " + detail;
    return msg;
  }

  Errc code_;
  std::string stage_;
};

inline void require(bool condition, Errc code, const std::string& detail) {
  if (!condition) throw Error(code, detail);
}

}  // namespace stiffmap
