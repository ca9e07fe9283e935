#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "pointbirth/quadrature.hpp"
#include "pointbirth/specfun.hpp"

namespace sf = pointbirth::specfun;
namespace quad = pointbirth::quad;

namespace {

// K0(z) = int_0^inf exp(-z cosh u) du by adaptive quadrature.
double k0_oracle(double z) {
  quad::Options opt;
  opt.rel_tol = 1e-13;
  opt.abs_tol = 0.0;
  const double upper = std::acosh(1.0 + 750.0 / z);
  return quad::integrate([z](double u) { return std::exp(-z * std::cosh(u)); }, 0.0, upper, opt).value;
}

}  // namespace

TEST(Gamma, FactorialAndHalfInteger) {
  EXPECT_DOUBLE_EQ(sf::gamma(1.0), 1.0);
  EXPECT_NEAR(sf::gamma(0.5), std::sqrt(std::numbers::pi), 1e-14);
  EXPECT_NEAR(sf::gamma(5.0), 24.0, 1e-12);
}

TEST(Gamma, MatchesIntegralDefinition) {
  quad::Options opt;
  opt.rel_tol = 1e-12;
  for (double u : {0.75, 1.5, 3.25}) {
    // s = w^m on [0, 1] smooths the endpoint: the integrand becomes m w^{mu-1} exp(-w^m).
    const double m = u < 1.0 ? 1.0 / u : 2.0;
    const double head =
        quad::integrate([u, m](double w) { return m * std::pow(w, m * u - 1.0) * std::exp(-std::pow(w, m)); }, 0.0, 1.0, opt)
            .value;
    const double tail =
        quad::integrate_segments([u](double s) { return std::pow(s, u - 1.0) * std::exp(-s); }, {1.0, 10.0, 80.0}, opt)
            .value;
    EXPECT_NEAR(sf::gamma(u), head + tail, 1e-10 * (head + tail)) << "u = " << u;
  }
}

TEST(Gamma, RejectsNonpositive) { EXPECT_THROW(sf::gamma(0.0), pointbirth::DomainError); }

TEST(MacdonaldK0, QuadratureOracleAtReferencePoints) {
  const double at1 = k0_oracle(1.0);
  const double at10 = k0_oracle(10.0);
  EXPECT_NEAR(sf::macdonald_k0(1.0), at1, 1e-12 * at1);
  EXPECT_NEAR(sf::macdonald_k0(10.0), at10, 1e-12 * at10);
  EXPECT_NEAR(at1, 0.4210244382, 1e-10);
  EXPECT_NEAR(at10, 1.778e-5, 1e-8);
}

TEST(MacdonaldK0, LogGridAgainstOracle) {
  for (int i = 0; i <= 40; ++i) {
    const double z = std::exp(std::log(1e-4) + (std::log(50.0) - std::log(1e-4)) * i / 40);
    const double oracle = k0_oracle(z);
    EXPECT_NEAR(sf::macdonald_k0(z), oracle, 1e-10 * oracle) << "z = " << z;
  }
}

TEST(MacdonaldK0, LogarithmicDivergenceAtZero) {
  for (double z : {1e-6, 1e-9, 1e-12}) {
    const double lead = -sf::kEulerGamma - std::log(z / 2.0);
    EXPECT_NEAR(sf::macdonald_k0(z) / lead, 1.0, 1e-6) << "z = " << z;
  }
}

TEST(MacdonaldK0, RegimesAgreeAtSwitchPoints) {
  const double z0 = sf::AccuracySpec{}.series_cutoff;
  const double series = std::exp(z0) * sf::detail::k0_series(z0);
  EXPECT_NEAR(series, sf::detail::k0_scaled_cf2(z0), 1e-13 * series);
  const double cf = sf::detail::k0_scaled_cf2(25.0);
  EXPECT_NEAR(cf, sf::detail::k0_scaled_asymptotic(25.0), 1e-14 * cf);
}

TEST(K0Tilde, DefinitionAndLimits) {
  const double oracle = std::exp(1.0) * std::sqrt(2.0 / std::numbers::pi) * k0_oracle(1.0);
  EXPECT_NEAR(sf::k0_tilde(1.0), oracle, 1e-12);
  EXPECT_NEAR(sf::k0_tilde(1.0), 0.9131, 1e-4);
  EXPECT_EQ(sf::k0_tilde(0.0), 0.0);
  EXPECT_EQ(sf::k0_tilde(INFINITY), 1.0);
  // Approach to the limits: 1 - 1/(8z) at infinity, O(sqrt(z) log z) at zero.
  EXPECT_NEAR(sf::k0_tilde(1e6), 1.0 - 1.0 / 8e6, 1e-12);
  EXPECT_LT(sf::k0_tilde(1e-12), 1e-4);
}

TEST(K0Tilde, BoundedWithInteriorMaximum) {
  double best = 0.0;
  int arg = -1;
  const int n = 2000;
  for (int i = 0; i <= n; ++i) {
    const double z = std::pow(10.0, -6.0 + 9.0 * i / n);
    const double v = sf::k0_tilde(z);
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_GE(v, 0.0);
    if (v > best) {
      best = v;
      arg = i;
    }
  }
  EXPECT_GT(arg, 0);
  EXPECT_LE(arg, n);
  EXPECT_LT(best, 1.0 + 1e-12);
}

TEST(Erfcx, MatchesDefinition) {
  for (double x : {-3.0, -0.5, 0.0, 0.7, 5.0}) EXPECT_NEAR(sf::erfcx(x), std::exp(x * x) * std::erfc(x), 1e-13 * sf::erfcx(x));
  EXPECT_NEAR(sf::erfcx(30.0) * 30.0 * std::sqrt(std::numbers::pi), 1.0, 1e-3);
}

TEST(BesselI0Scaled, MatchesSeries) {
  for (double x : {0.1, 2.0, 14.0, 40.0}) {
    double sum = 0.0;
    double term = 1.0;
    for (int k = 0; k < 400; ++k) {
      if (k > 0) term *= (x / 2.0) * (x / 2.0) / (k * static_cast<double>(k));
      sum += term * std::exp(-x);
    }
    EXPECT_NEAR(sf::bessel_i0_scaled(x), sum, 1e-12 * sum) << "x = " << x;
  }
}
