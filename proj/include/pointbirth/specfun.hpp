#pragma once

// Special functions used by the point-source kernels: Gamma, the Macdonald
// function K0 and its normalised form, plus the scaled I0 and erfcx helpers
// needed by the radial heat averages and the d=3 closed form.

#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include "pointbirth/errors.hpp"

namespace pointbirth::specfun {

struct AccuracySpec {
  double rel_tol = 1e-10;
  // Below this argument K0 uses the power series, above it the continued
  // fraction / asymptotic expansion.
  double series_cutoff = 2.0;

  void validate() const {
    if (!(rel_tol > 0.0)) throw DomainError("AccuracySpec: rel_tol must be positive");
    if (!(series_cutoff > 0.0)) throw DomainError("AccuracySpec: series_cutoff must be positive");
  }
};

inline constexpr double kEulerGamma = 0.57721566490153286060651209;

namespace detail {

// Lanczos approximation, g = 7, n = 9. Relative error below 1e-14 on (0, 50].
inline constexpr double kLanczosG = 7.0;
inline constexpr std::array<double, 9> kLanczos = {
    0.99999999999980993,  676.5203681218851,     -1259.1392167224028,
    771.32342877765313,   -176.61502916214059,   12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7};

inline double lanczos_sum(double xm1) {
  double a = kLanczos[0];
  for (std::size_t i = 1; i < kLanczos.size(); ++i) a += kLanczos[i] / (xm1 + static_cast<double>(i));
  return a;
}

// K0(z) e^z for z >= 2 by Steed's evaluation of the second continued fraction.
inline double k0_scaled_cf2(double x) {
  double b = 2.0 * (1.0 + x);
  double d = 1.0 / b;
  double h = d;
  double delh = d;
  double q1 = 0.0;
  double q2 = 1.0;
  const double a1 = 0.25;
  double q = a1;
  double c = a1;
  double a = -a1;
  double s = 1.0 + q * delh;
  for (int i = 1; i < 10000; ++i) {
    a -= 2.0 * i;
    c = -a * c / (i + 1.0);
    const double qnew = (q1 - b * q2) / a;
    q1 = q2;
    q2 = qnew;
    q += c * qnew;
    b += 2.0;
    d = 1.0 / (b + a * d);
    delh = (b * d - 1.0) * delh;
    h += delh;
    const double dels = q * delh;
    s += dels;
    if (std::abs(dels / s) < 1e-17) break;
  }
  return std::sqrt(std::numbers::pi / (2.0 * x)) / s;
}

// Hankel asymptotic expansion of K0(z) e^z, summed to the smallest term.
inline double k0_scaled_asymptotic(double z) {
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 60; ++k) {
    const double next = -term * (2.0 * k - 1.0) * (2.0 * k - 1.0) / (k * 8.0 * z);
    if (std::abs(next) >= std::abs(term)) break;
    term = next;
    sum += term;
    if (std::abs(term) < 1e-18 * std::abs(sum)) break;
  }
  return std::sqrt(std::numbers::pi / (2.0 * z)) * sum;
}

// Small-argument series  K0 = -(log(z/2)+gamma) I0(z) + sum (z^2/4)^k/(k!)^2 H_k.
inline double k0_series(double z) {
  const double y = 0.25 * z * z;
  double term = 1.0;
  double i0 = 1.0;
  double tail = 0.0;
  double harmonic = 0.0;
  for (int k = 1; k < 500; ++k) {
    term *= y / (static_cast<double>(k) * k);
    harmonic += 1.0 / k;
    i0 += term;
    tail += term * harmonic;
    if (term * (1.0 + harmonic) < 1e-18 * (i0 + tail)) break;
  }
  return -(std::log(0.5 * z) + kEulerGamma) * i0 + tail;
}

}  // namespace detail

inline double gamma(double u) {
  if (!(u > 0.0)) throw DomainError("gamma: argument must be positive");
  if (u < 0.5) return gamma(u + 1.0) / u;
  const double xm1 = u - 1.0;
  const double t = xm1 + detail::kLanczosG + 0.5;
  return std::sqrt(2.0 * std::numbers::pi) * std::pow(t, xm1 + 0.5) * std::exp(-t) *
         detail::lanczos_sum(xm1);
}

inline double log_gamma(double u) {
  if (!(u > 0.0)) throw DomainError("log_gamma: argument must be positive");
  if (u < 0.5) return log_gamma(u + 1.0) - std::log(u);
  const double xm1 = u - 1.0;
  const double t = xm1 + detail::kLanczosG + 0.5;
  return 0.5 * std::log(2.0 * std::numbers::pi) + (xm1 + 0.5) * std::log(t) - t +
         std::log(detail::lanczos_sum(xm1));
}

inline double beta_function(double a, double b) {
  return std::exp(log_gamma(a) + log_gamma(b) - log_gamma(a + b));
}

// e^z K0(z). Shares the evaluation regimes of macdonald_k0.
inline double macdonald_k0_scaled(double z, const AccuracySpec& acc = {}) {
  if (!(z > 0.0)) throw DomainError("macdonald_k0: argument must be positive");
  if (z <= acc.series_cutoff) return std::exp(z) * detail::k0_series(z);
  if (z < 25.0) return detail::k0_scaled_cf2(z);
  return detail::k0_scaled_asymptotic(z);
}

/// Macdonald function K0(z), z > 0.
inline double macdonald_k0(double z, const AccuracySpec& acc = {}) {
  if (!(z > 0.0)) throw DomainError("macdonald_k0: argument must be positive");
  if (z <= acc.series_cutoff) return detail::k0_series(z);
  return std::exp(-z) * macdonald_k0_scaled(z, acc);
}

/// Normalised Macdonald function e^z (2z/pi)^{1/2} K0(z); 0 at z = 0, tends to 1.
inline double k0_tilde(double z, const AccuracySpec& acc = {}) {
  if (z < 0.0 || std::isnan(z)) throw DomainError("k0_tilde: argument must be nonnegative");
  if (z == 0.0) return 0.0;
  if (std::isinf(z)) return 1.0;
  return std::sqrt(2.0 * z / std::numbers::pi) * macdonald_k0_scaled(z, acc);
}

/// e^{-x} I0(x) for x >= 0.
inline double bessel_i0_scaled(double x) {
  x = std::abs(x);
  if (x <= 15.0) {
    const double y = 0.25 * x * x;
    double term = 1.0;
    double sum = 1.0;
    for (int k = 1; k < 400; ++k) {
      term *= y / (static_cast<double>(k) * k);
      sum += term;
      if (term < 1e-18 * sum) break;
    }
    return sum * std::exp(-x);
  }
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 200; ++k) {
    const double next = term * (2.0 * k - 1.0) * (2.0 * k - 1.0) / (k * 8.0 * x);
    if (next >= term) break;
    term = next;
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return sum / std::sqrt(2.0 * std::numbers::pi * x);
}

/// Scaled complementary error function e^{x^2} erfc(x).
inline double erfcx(double x) {
  if (std::isnan(x)) return x;
  if (x < 0.0) {
    if (x < -26.0) return std::numeric_limits<double>::infinity();
    return 2.0 * std::exp(x * x) - erfcx(-x);
  }
  if (x < 8.0) return std::exp(x * x) * std::erfc(x);
  double frac = x;
  for (int k = 60; k >= 1; --k) frac = x + 0.5 * k / frac;
  return 1.0 / (std::sqrt(std::numbers::pi) * frac);
}

}  // namespace pointbirth::specfun
