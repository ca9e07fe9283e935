#pragma once

#include <cmath>
#include <numbers>
#include <vector>

namespace pointbirth {

// Chebyshev interpolant of a smooth function on [a, b].
class ChebyshevSeries {
 public:
  ChebyshevSeries() = default;

  template <class F>
  ChebyshevSeries(F&& f, double a, double b, int n) : a_(a), b_(b), coef_(n, 0.0) {
    std::vector<double> values(n);
    for (int k = 0; k < n; ++k) {
      const double x = std::cos(std::numbers::pi * (k + 0.5) / n);
      values[k] = f(0.5 * (b + a) + 0.5 * (b - a) * x);
    }
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += values[k] * std::cos(std::numbers::pi * j * (k + 0.5) / n);
      coef_[j] = 2.0 * s / n;
    }
    coef_[0] *= 0.5;
  }

  double operator()(double x) const {
    const double y = (2.0 * x - a_ - b_) / (b_ - a_);
    const double y2 = 2.0 * y;
    double d = 0.0;
    double dd = 0.0;
    for (std::size_t j = coef_.size() - 1; j >= 1; --j) {
      const double sv = d;
      d = y2 * d - dd + coef_[j];
      dd = sv;
    }
    return y * d - dd + coef_[0];
  }

  double lower() const { return a_; }
  double upper() const { return b_; }
  // Magnitude of the trailing coefficients, a cheap truncation estimate.
  double tail() const {
    const std::size_t n = coef_.size();
    return n < 2 ? 0.0 : std::abs(coef_[n - 1]) + std::abs(coef_[n - 2]);
  }

 private:
  double a_ = -1.0;
  double b_ = 1.0;
  std::vector<double> coef_;
};

}  // namespace pointbirth
