#pragma once

// The Volterra-type function  mu(w) = int_0^inf w^u / Gamma(u) du  (mu(x,1,0) in
// Erdelyi's notation). It is what remains of the outer u-integral in the
// two-dimensional kernel once the u and r integrations are swapped, so it is
// tabulated once per process and shared.

#include <algorithm>
#include <cmath>
#include <limits>

#include "pointbirth/chebyshev.hpp"
#include "pointbirth/quadrature.hpp"
#include "pointbirth/specfun.hpp"

namespace pointbirth {

class VolterraTable {
 public:
  // Table range in log w. Below -1 the function is carried as mu * (log w)^2,
  // a smooth function of y = -1/log w on [0, 1].
  static constexpr double kSplit = -1.0;
  static constexpr double kUpper = 6.0;

  VolterraTable()
      : scaled_([](double y) { return scaled_direct(y); }, 0.0, 1.0, 48),
        log_mid_([](double lw) { return std::log(direct(lw)); }, kSplit, kUpper, 72) {}

  // mu(w) given lw = log w.
  double operator()(double lw) const {
    if (lw == -std::numeric_limits<double>::infinity()) return 0.0;
    if (lw <= kSplit) {
      const double y = -1.0 / lw;
      return scaled_(y) * y * y;
    }
    if (lw <= kUpper) return std::exp(log_mid_(lw));
    return direct(lw);
  }

  // mu(w) (log w)^2 as a function of y = -1/log w, valid for y in [0, 1].
  double scaled(double y) const { return scaled_(y); }

  // Direct quadrature, used to build the table and as its test oracle.
  static double direct(double lw) {
    if (lw < -2.0) {
      const double y = -1.0 / lw;
      return scaled_direct(y) * y * y;
    }
    const double w = std::exp(lw);
    // mu(w) grows like e^w; integrate the scaled integrand.
    const double shift = std::max(0.0, w);
    auto f = [lw, shift](double u) {
      if (u <= 0.0) return 0.0;
      return std::exp(u * lw - specfun::log_gamma(u) - shift);
    };
    const double upper = w + 40.0 * std::sqrt(w + 1.0) + 60.0;
    // The exponent reaches a few thousand, so the integrand itself carries
    // relative rounding noise near 1e-13 at the top of the table.
    quad::Options opt;
    opt.rel_tol = 1e-12;
    opt.max_depth = 40;
    std::vector<double> br{0.0, 1.0};
    if (w > 2.0) br.push_back(w);
    br.push_back(upper);
    return quad::integrate_segments(f, br, opt).value * std::exp(shift);
  }

  // int_0^inf v e^{-v} / Gamma(1 + v y) dv  ==  mu(w) (log w)^2  with y = -1/log w.
  static double scaled_direct(double y) {
    auto f = [y](double v) { return v * std::exp(-v - specfun::log_gamma(1.0 + v * y)); };
    quad::Options opt;
    opt.rel_tol = 1e-13;
    opt.max_depth = 40;
    return quad::integrate_segments(f, {0.0, 1.0, 4.0, 12.0, 40.0, 80.0}, opt).value;
  }

 private:
  ChebyshevSeries scaled_;
  ChebyshevSeries log_mid_;
};

inline const VolterraTable& volterra_table() {
  static const VolterraTable table;
  return table;
}

}  // namespace pointbirth
