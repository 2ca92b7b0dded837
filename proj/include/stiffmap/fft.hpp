#pragma once

#include <fftw3.h>

#include <algorithm>
#include <complex>
#include <mutex>
#include <span>
#include <vector>

#include "stiffmap/error.hpp"

namespace stiffmap {

using Complex = std::complex<double>;

namespace detail {
// FFTW planning is not thread-safe; execution with new-array functions is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

// Smallest n' >= n whose only prime factors are 2, 3, 5 and 7.
inline int next_fast_size(int n) {
  for (int m = std::max(n, 1);; ++m) {
    int r = m;
    for (int p : {2, 3, 5, 7})
      while (r % p == 0) r /= p;
    if (r == 1) return m;
  }
}

// Real 2-D transform of a width x height row-major grid. The half spectrum
// has height rows of (width/2 + 1) bins. inverse() is normalized so that
// inverse(forward(x)) == x.
class RealFft2d {
 public:
  RealFft2d(int width, int height) : width_(width), height_(height) {
    require(width > 0 && height > 0, Errc::invalid_argument, "fft size must be positive");
    std::vector<double> r(real_size());
    std::vector<Complex> c(spectrum_size());
    std::lock_guard lock(detail::fftw_planner_mutex());
    forward_ = fftw_plan_dft_r2c_2d(height, width, r.data(),
                                    reinterpret_cast<fftw_complex*>(c.data()),
                                    FFTW_ESTIMATE | FFTW_UNALIGNED);
    inverse_ = fftw_plan_dft_c2r_2d(height, width, reinterpret_cast<fftw_complex*>(c.data()),
                                    r.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    require(forward_ && inverse_, Errc::invalid_argument, "fftw planning failed");
  }

  RealFft2d(const RealFft2d&) = delete;
  RealFft2d& operator=(const RealFft2d&) = delete;

  ~RealFft2d() {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int spectrum_width() const { return width_ / 2 + 1; }
  std::size_t real_size() const { return static_cast<std::size_t>(width_) * height_; }
  std::size_t spectrum_size() const { return static_cast<std::size_t>(spectrum_width()) * height_; }

  std::vector<Complex> forward(std::span<const double> real) const {
    require(real.size() == real_size(), Errc::invalid_argument, "fft input size mismatch");
    std::vector<double> in(real.begin(), real.end());
    std::vector<Complex> out(spectrum_size());
    fftw_execute_dft_r2c(forward_, in.data(), reinterpret_cast<fftw_complex*>(out.data()));
    return out;
  }

  std::vector<double> inverse(std::span<const Complex> spectrum) const {
    require(spectrum.size() == spectrum_size(), Errc::invalid_argument, "fft input size mismatch");
    std::vector<Complex> in(spectrum.begin(), spectrum.end());
    std::vector<double> out(real_size());
    fftw_execute_dft_c2r(inverse_, reinterpret_cast<fftw_complex*>(in.data()), out.data());
    const double scale = 1.0 / static_cast<double>(real_size());
    for (auto& v : out) v *= scale;
    return out;
  }

 private:
  int width_;
  int height_;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

}  // namespace stiffmap
