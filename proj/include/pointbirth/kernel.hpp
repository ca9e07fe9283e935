#pragma once

// Heat kernel P, the rank-one comparison kernel Pbar, and the one-point
// potential kernels P^alpha in d = 2, 3.
//
// P^alpha = P + Q^alpha where the correction Q^alpha depends on |x|, |y| only.
//   d = 3:  Q = 2t/(|x||y|) P(t;R) - 8 pi alpha t/(|x||y|) int_0^inf e^{-4 pi alpha u} P(t;u+R) du
//   d = 2:  Q = sqrt(4 pi t)/sqrt(|x||y|) P(t;R)
//               * int du t^u e^{-alpha u}/Gamma(u) int dr r^{u-1} e^{-r R^2/4t} (r+1)^{-u-1/2} K0~(|x||y|(r+1)/2t)
// with R = |x| + |y| and P(t;r) the scalar Gaussian profile. The d = 3 integral
// has a closed form in erfcx. For d = 2 the u-integral is done first, which
// leaves a single r-integral against the Volterra function mu(t e^{-alpha} r/(1+r)).

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <tuple>
#include <utility>
#include <vector>

#include "pointbirth/errors.hpp"
#include "pointbirth/parallel.hpp"
#include "pointbirth/quadrature.hpp"
#include "pointbirth/specfun.hpp"
#include "pointbirth/volterra.hpp"

namespace pointbirth {

struct KernelParams {
  int d = 3;
  double alpha = 0.0;
  double rel_tol = 1e-8;

  void validate() const {
    if (d != 2 && d != 3) throw DomainError("KernelParams: d must be 2 or 3");
    if (!std::isfinite(alpha)) throw DomainError("KernelParams: alpha must be finite");
    if (!(rel_tol > 0.0)) throw DomainError("KernelParams: rel_tol must be positive");
  }
};

// A point of R^d. For d = 2 the third coordinate is ignored and kept at 0.
struct SpacePoint {
  std::array<double, 3> coords{};
  int dim = 3;

  double norm() const {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += coords[i] * coords[i];
    return std::sqrt(s);
  }

  // The point (r, 0, ...) rotated by angle theta towards the second axis.
  static SpacePoint polar(int d, double r, double cos_angle = 1.0) {
    SpacePoint p;
    p.dim = d;
    const double c = std::clamp(cos_angle, -1.0, 1.0);
    p.coords[0] = r * c;
    p.coords[1] = r * std::sqrt(std::max(0.0, 1.0 - c * c));
    return p;
  }
};

inline double distance(const SpacePoint& x, const SpacePoint& y) {
  double s = 0.0;
  for (int i = 0; i < x.dim; ++i) {
    const double dz = x.coords[i] - y.coords[i];
    s += dz * dz;
  }
  return std::sqrt(s);
}

struct KernelValue {
  double value = 0.0;
  double heat = 0.0;
  double image = 0.0;
  double alpha_corr = 0.0;
};

inline double sphere_area(int d) {
  return d == 2 ? 2.0 * std::numbers::pi : 4.0 * std::numbers::pi;
}

// Reference weight |x|^{-(d-1)/2}.
inline double reference_weight(int d, double r) {
  return d == 2 ? 1.0 / std::sqrt(r) : 1.0 / r;
}

namespace detail {

inline void check_dim(int d) {
  if (d != 2 && d != 3) throw DomainError("dimension must be 2 or 3");
}

inline void check_time(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw DomainError("time must be positive");
}

inline double gauss_norm(int d, double t) {
  const double s = 4.0 * std::numbers::pi * t;
  return d == 2 ? 1.0 / s : 1.0 / (s * std::sqrt(s));
}

}  // namespace detail

inline double radial_heat_kernel(int d, double t, double r) {
  detail::check_dim(d);
  detail::check_time(t);
  if (r < 0.0) throw DomainError("radial_heat_kernel: r must be nonnegative");
  return detail::gauss_norm(d, t) * std::exp(-r * r / (4.0 * t));
}

inline double heat_kernel(int d, double t, const SpacePoint& x, const SpacePoint& y) {
  return radial_heat_kernel(d, t, distance(x, y));
}

inline double pbar_kernel(int d, double t, double rx, double ry) {
  detail::check_dim(d);
  detail::check_time(t);
  if (!(rx > 0.0) || !(ry > 0.0)) throw DomainError("pbar_kernel: points must differ from the origin");
  return reference_weight(d, rx) * reference_weight(d, ry) * std::exp(-(rx * rx + ry * ry) / (4.0 * t)) /
         std::sqrt(t);
}

inline double pbar_kernel(int d, double t, const SpacePoint& x, const SpacePoint& y) {
  return pbar_kernel(d, t, x.norm(), y.norm());
}

// Spherical average over the direction of y of P(t;x,y) times the sphere area,
// so that int P(t;x,y) f(|y|) dy = int_0^inf radial_heat_average * f(r') r'^{d-1} dr'.
inline double radial_heat_average(int d, double t, double r, double rp) {
  const double z = r * rp / (2.0 * t);
  const double gauss = detail::gauss_norm(d, t) * std::exp(-(r - rp) * (r - rp) / (4.0 * t));
  if (d == 2) return 2.0 * std::numbers::pi * gauss * specfun::bessel_i0_scaled(z);
  const double shell = z < 1e-8 ? 1.0 - z : -std::expm1(-2.0 * z) / (2.0 * z);
  return 4.0 * std::numbers::pi * gauss * shell;
}

namespace detail {

// int_0^inf e^{-k u} e^{-(u+R)^2/4t} du, stable for either sign of k.
inline double gauss_exp_integral(double t, double k, double R) {
  const double st = std::sqrt(t);
  const double z = (R + 2.0 * k * t) / (2.0 * st);
  if (z >= 0.0) return std::sqrt(std::numbers::pi * t) * std::exp(-R * R / (4.0 * t)) * specfun::erfcx(z);
  return std::sqrt(std::numbers::pi * t) * std::exp(k * R + k * k * t) * std::erfc(z);
}

// Image and alpha parts of the d = 3 correction.
inline std::pair<double, double> correction_d3(double t, double alpha, double rx, double ry) {
  const double R = rx + ry;
  const double image = 2.0 * t / (rx * ry) * radial_heat_kernel(3, t, R);
  if (alpha == 0.0) return {image, 0.0};
  const double k = 4.0 * std::numbers::pi * alpha;
  const double integral = gauss_norm(3, t) * gauss_exp_integral(t, k, R);
  return {image, -8.0 * std::numbers::pi * alpha * t / (rx * ry) * integral};
}

// Same alpha part by adaptive quadrature of the defining integral.
inline double correction_d3_alpha_quadrature(double t, double alpha, double rx, double ry, double rel_tol) {
  if (alpha == 0.0) return 0.0;
  const double R = rx + ry;
  const double k = 4.0 * std::numbers::pi * alpha;
  // Integrand e^{-ku - (u+R)^2/4t}, peaked at u* = max(0, -R - 2kt); cut where
  // it has fallen by e^{-40} from its maximum.
  const double ustar = std::max(0.0, -R - 2.0 * k * t);
  auto log_f = [&](double u) { return -k * u - (u + R) * (u + R) / (4.0 * t); };
  const double peak = log_f(ustar);
  auto f = [&](double u) { return std::exp(log_f(u) - peak); };
  double upper = ustar + 1.0;
  while (log_f(upper) - peak > -40.0) upper = ustar + 2.0 * (upper - ustar);
  std::vector<double> br{0.0};
  if (ustar > 0.0) br.push_back(ustar);
  br.push_back(upper);
  quad::Options opt;
  opt.rel_tol = rel_tol;
  const double value = quad::integrate_segments(f, br, opt).value * std::exp(peak);
  return -8.0 * std::numbers::pi * alpha * t / (rx * ry) * gauss_norm(3, t) * value;
}

// d = 2 correction for fixed (t, alpha), evaluated for many radius pairs.
// The r-integral is split at r_lo = e^{s_lo}: below it the substitution
// y = -1/log w turns the slowly decaying mu-tail into a smooth integrand on
// [0, y_lo]; above it composite Gauss-Legendre panels in s = log r.
class CorrectionD2 {
 public:
  CorrectionD2(double t, double alpha) : t_(t) {
    check_time(t);
    const double ltau = std::log(t) - alpha;
    const auto& table = volterra_table();
    const double s_lo = std::min(-30.0, -2.0 - ltau);
    const double lw_lo = ltau + s_lo - std::log1p(std::exp(s_lo));
    const double y_lo = -1.0 / lw_lo;

    const quad::Rule ga = quad::gauss_legendre(20);
    for (std::size_t i = 0; i < ga.nodes.size(); ++i) {
      const double y = y_lo * ga.nodes[i];
      const double q = std::exp(-1.0 / y - ltau);
      const double r = q / (1.0 - q);
      r_.push_back(r);
      pref_.push_back(y_lo * ga.weights[i] * table.scaled(y) * std::sqrt(1.0 + r));
    }
    head_ = r_.size();

    std::vector<double> br;
    for (double b = -5.0; b > s_lo; b *= 1.5) br.push_back(b);
    if (br.back() - s_lo < 1.0) br.back() = s_lo;
    else br.push_back(s_lo);
    std::reverse(br.begin(), br.end());
    for (double b = -4.0; b <= kSMax; b += 1.0) br.push_back(b);
    const quad::Rule gp = quad::gauss_legendre(kPanelNodes);
    for (std::size_t p = 0; p + 1 < br.size(); ++p) {
      const double a = br[p];
      const double w = br[p + 1] - br[p];
      for (std::size_t i = 0; i < gp.nodes.size(); ++i) {
        const double s = a + w * gp.nodes[i];
        const double r = std::exp(s);
        const double lw = ltau + s - std::log1p(r);
        r_.push_back(r);
        pref_.push_back(w * gp.weights[i] * table(lw) / std::sqrt(1.0 + r));
      }
    }
  }

  double operator()(double rx, double ry) const {
    const double R = rx + ry;
    const double c = R * R / (4.0 * t_);
    if (c > 740.0) return 0.0;
    const double z0 = rx * ry / (2.0 * t_);
    double sum = 0.0;
    for (std::size_t i = 0; i < r_.size(); ++i) {
      const double r = r_[i];
      if (i >= head_ && r * c > 45.0) break;
      const double z = z0 * (1.0 + r);
      sum += pref_[i] * std::exp(-(1.0 + r) * c) * specfun::k0_tilde(z);
    }
    return sum / (std::sqrt(4.0 * std::numbers::pi * t_) * std::sqrt(rx * ry));
  }

  double time() const { return t_; }

 private:
  static constexpr double kSMax = 120.0;
  static constexpr int kPanelNodes = 12;
  double t_;
  std::size_t head_ = 0;
  std::vector<double> r_;
  std::vector<double> pref_;
};

// The d = 2 correction as the nested (u, r) double integral, outer u split at
// 1 and r = s^{1/u} on [0, 1] for u < 1. Slow; used as an oracle.
inline double correction_d2_nested(double t, double alpha, double rx, double ry, double rel_tol) {
  const double R = rx + ry;
  const double c = R * R / (4.0 * t);
  const double z0 = rx * ry / (2.0 * t);
  const double ltau = std::log(t) - alpha;
  quad::Options opt;
  opt.rel_tol = rel_tol;
  opt.max_depth = 30;
  auto g = [&](double u, double r) {
    return std::pow(1.0 + r, -u - 0.5) * std::exp(-(1.0 + r) * c) * specfun::k0_tilde(z0 * (1.0 + r));
  };
  double s_hi = std::log(std::max(2.0, 60.0 / std::max(c, 1e-300)));
  s_hi = std::min(s_hi, 200.0);
  auto inner_tail = [&](double u) {
    // r in [1, inf) as s = log r.
    auto f = [&](double s) {
      const double r = std::exp(s);
      const double log_f = u * s - (u + 0.5) * std::log1p(r) - (1.0 + r) * c;
      return log_f < -745.0 ? 0.0 : std::exp(log_f) * specfun::k0_tilde(z0 * (1.0 + r));
    };
    std::vector<double> br{0.0};
    for (double b = 2.0; b < s_hi; b += 2.0) br.push_back(b);
    br.push_back(s_hi);
    return quad::integrate_segments(f, br, opt).value;
  };
  auto outer = [&](double u) {
    if (u <= 0.0) return 0.0;
    double head;
    if (u < 1.0) {
      // (1/Gamma(u)) int_0^1 r^{u-1} g dr = (1/Gamma(u+1)) int_0^1 g(s^{1/u}) ds
      auto f = [&](double s) { return g(u, std::pow(s, 1.0 / u)); };
      head = quad::integrate(f, 0.0, 1.0, opt).value * std::exp(-specfun::log_gamma(u + 1.0));
    } else {
      auto f = [&](double r) { return std::pow(r, u - 1.0) * g(u, r); };
      head = quad::integrate(f, 0.0, 1.0, opt).value * std::exp(-specfun::log_gamma(u));
    }
    const double tail = inner_tail(u) * std::exp(-specfun::log_gamma(u));
    return std::exp(u * ltau) * (head + tail);
  };
  const double tau = std::exp(ltau);
  const double u_hi = std::max(4.0, tau + 40.0 * std::sqrt(tau + 1.0) + 40.0);
  std::vector<double> br{0.0};
  if (ltau < -1.0) {
    const double u0 = -1.0 / ltau;
    for (double m : {0.25, 1.0, 4.0})
      if (m * u0 < 1.0) br.push_back(m * u0);
  }
  br.push_back(1.0);
  if (tau > 2.0) br.push_back(tau);
  br.push_back(u_hi);
  const double J = quad::integrate_segments(outer, br, opt).value;
  return J / (std::sqrt(4.0 * std::numbers::pi * t) * std::sqrt(rx * ry));
}

}  // namespace detail

// Q^alpha(t; rx, ry) = P^alpha - P, the part of the kernel seen only through radii.
inline double palpha_correction(const KernelParams& params, double t, double rx, double ry) {
  params.validate();
  detail::check_time(t);
  if (!(rx > 0.0) || !(ry > 0.0)) throw DomainError("palpha_correction: radii must be positive");
  if (params.d == 3) {
    const auto [image, corr] = detail::correction_d3(t, params.alpha, rx, ry);
    return image + corr;
  }
  return detail::CorrectionD2(t, params.alpha)(rx, ry);
}

inline KernelValue palpha_kernel(const KernelParams& params, double t, const SpacePoint& x, const SpacePoint& y) {
  params.validate();
  detail::check_time(t);
  const double rx = x.norm();
  const double ry = y.norm();
  if (!(rx > 0.0) || !(ry > 0.0)) throw DomainError("palpha_kernel: points must differ from the origin");
  KernelValue kv;
  kv.heat = heat_kernel(params.d, t, x, y);
  if (params.d == 3) {
    std::tie(kv.image, kv.alpha_corr) = detail::correction_d3(t, params.alpha, rx, ry);
  } else {
    kv.alpha_corr = detail::CorrectionD2(t, params.alpha)(rx, ry);
  }
  kv.value = kv.heat + kv.image + kv.alpha_corr;
  return kv;
}

// Reusable evaluator of Q^alpha at a fixed (params, t).
class CorrectionEvaluator {
 public:
  CorrectionEvaluator(const KernelParams& params, double t) : params_(params), t_(t) {
    params.validate();
    detail::check_time(t);
    if (params.d == 2) d2_.emplace_back(t, params.alpha);
  }

  double operator()(double rx, double ry) const {
    if (params_.d == 3) {
      const auto [image, corr] = detail::correction_d3(t_, params_.alpha, rx, ry);
      return image + corr;
    }
    return d2_.front()(rx, ry);
  }

  const KernelParams& params() const { return params_; }
  double time() const { return t_; }

 private:
  KernelParams params_;
  double t_;
  std::vector<detail::CorrectionD2> d2_;
};

// Total mass m^alpha(t, x) = int P^alpha(t; x, y) dy.
inline double palpha_total_mass(const KernelParams& params, double t, double rx) {
  params.validate();
  detail::check_time(t);
  if (!(rx > 0.0)) throw DomainError("palpha_total_mass: x must differ from the origin");
  if (params.d == 3) {
    // 1 + E/|x| with E = int_0^inf e^{-ku} erfc((u+|x|)/2 sqrt t) du.
    const double st = std::sqrt(t);
    const double a = rx / (2.0 * st);
    const double k = 4.0 * std::numbers::pi * params.alpha;
    const double kappa = k * st;
    double E;
    if (std::abs(kappa) < 1e-4) {
      // Taylor expansion of [F(a) - F(a+kappa)]/k with F(b) = e^{-a^2} erfcx(b).
      const double ex = std::exp(-a * a);
      const double f0 = specfun::erfcx(a);
      const double f1 = 2.0 * a * f0 - 2.0 / std::sqrt(std::numbers::pi);
      const double f2 = 2.0 * f0 + 2.0 * a * f1;
      const double f3 = 4.0 * f1 + 2.0 * a * f2;
      E = -st * ex * (f1 + 0.5 * kappa * f2 + kappa * kappa * f3 / 6.0);
    } else {
      const double b = a + kappa;
      const double tail = b >= 0.0 ? std::exp(-a * a) * specfun::erfcx(b)
                                   : std::exp(b * b - a * a) * std::erfc(b);
      E = (std::erfc(a) - tail) / k;
    }
    return 1.0 + E / rx;
  }
  // d = 2: 1 + 2 pi int_0^inf Q(t; |x|, r) r dr.
  const detail::CorrectionD2 q(t, params.alpha);
  auto f = [&](double s) {
    const double r = std::exp(s);
    return q(rx, r) * r * r;
  };
  const double s_hi = std::log(rx + 12.0 * std::sqrt(t) + 1.0) + 1.0;
  std::vector<double> br;
  for (double b = -40.0; b < s_hi; b += 2.0) br.push_back(b);
  br.push_back(s_hi);
  quad::Options opt;
  opt.rel_tol = params.rel_tol;
  const double mass = quad::integrate_segments(f, br, opt).value;
  return 1.0 + 2.0 * std::numbers::pi * mass;
}

inline double palpha_total_mass(const KernelParams& params, double t, const SpacePoint& x) {
  return palpha_total_mass(params, t, x.norm());
}

// Central-difference estimate of (d/dt - Delta_x) P^alpha(t; x, y), relative
// to the kernel value at (t, x, y).
inline double heat_residual(const KernelParams& params, double t, const SpacePoint& x, const SpacePoint& y,
                            double h_t, double h_x) {
  params.validate();
  if (!(h_t > 0.0) || !(t > h_t)) throw DomainError("heat_residual: need t > h_t > 0");
  if (!(h_x > 0.0) || !(x.norm() > 2.0 * h_x)) throw DomainError("heat_residual: stencil crosses the origin");
  auto P = [&](double tt, const SpacePoint& xx) { return palpha_kernel(params, tt, xx, y).value; };
  const double centre = P(t, x);
  const double dt = (P(t + h_t, x) - P(t - h_t, x)) / (2.0 * h_t);
  double lap = 0.0;
  for (int i = 0; i < params.d; ++i) {
    SpacePoint plus = x;
    SpacePoint minus = x;
    plus.coords[i] += h_x;
    minus.coords[i] -= h_x;
    lap += (P(t, plus) - 2.0 * centre + P(t, minus)) / (h_x * h_x);
  }
  return (dt - lap) / centre;
}

struct KernelQuery {
  double t = 1.0;
  SpacePoint x;
  SpacePoint y;
};

inline std::vector<KernelValue> palpha_batch(const KernelParams& params, const std::vector<KernelQuery>& queries,
                                             int threads = 0) {
  std::vector<KernelValue> out(queries.size());
  parallel_for(queries.size(), resolve_threads(threads),
               [&](std::size_t i) { out[i] = palpha_kernel(params, queries[i].t, queries[i].x, queries[i].y); });
  return out;
}

}  // namespace pointbirth
