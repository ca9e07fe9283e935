#pragma once

// Adaptive Gauss-Kronrod integration and fixed Gauss rules.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "pointbirth/errors.hpp"

namespace pointbirth::quad {

struct Result {
  double value = 0.0;
  double error = 0.0;
  // Integral of |f|, used as the scale of the rounding floor.
  double abs_value = 0.0;
};

struct Options {
  double rel_tol = 1e-10;
  double abs_tol = 0.0;
  int max_depth = 20;
};

namespace detail {

inline constexpr std::array<double, 8> kXgk = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
inline constexpr std::array<double, 8> kWgk = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
inline constexpr std::array<double, 4> kWg = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

template <class F>
Result gk15(F& f, double a, double b) {
  const double c = 0.5 * (a + b);
  const double h = 0.5 * (b - a);
  const double fc = f(c);
  double kronrod = fc * kWgk[7];
  double gauss = fc * kWg[3];
  double absk = std::abs(fc) * kWgk[7];
  for (int j = 0; j < 7; ++j) {
    const double dx = h * kXgk[j];
    const double f1 = f(c - dx);
    const double f2 = f(c + dx);
    kronrod += kWgk[j] * (f1 + f2);
    absk += kWgk[j] * (std::abs(f1) + std::abs(f2));
    if (j % 2 == 1) gauss += kWg[j / 2] * (f1 + f2);
  }
  const double ah = std::abs(h);
  return {kronrod * h, std::abs((kronrod - gauss) * h), absk * ah};
}

}  // namespace detail

// Globally adaptive bisection on [a, b]; each interval may be split at most
// max_depth times. The tolerance is floored at the rounding level of the sum
// of |f|. Throws NonConvergenceError when the cap is hit first.
template <class F>
Result integrate(F&& f, double a, double b, const Options& opt = {}) {
  if (a == b) return {};
  struct Piece {
    double a, b;
    Result r;
    int depth;
    bool operator<(const Piece& o) const { return r.error < o.r.error; }
  };
  std::priority_queue<Piece> heap;
  heap.push({a, b, detail::gk15(f, a, b), 0});
  double total = heap.top().r.value;
  double err = heap.top().r.error;
  double abs_total = heap.top().r.abs_value;
  constexpr double kRound = 50.0 * std::numeric_limits<double>::epsilon();
  for (int iter = 0;; ++iter) {
    const double tol = std::max({opt.abs_tol, opt.rel_tol * std::abs(total), kRound * abs_total});
    if (err <= tol) break;
    Piece p = heap.top();
    if (p.depth >= opt.max_depth || iter > 50000) {
      throw NonConvergenceError("adaptive quadrature exceeded refinement cap on [" + std::to_string(a) + ", " +
                                    std::to_string(b) + "]",
                                err / std::max(std::abs(total), 1e-300));
    }
    heap.pop();
    const double mid = 0.5 * (p.a + p.b);
    Piece left{p.a, mid, detail::gk15(f, p.a, mid), p.depth + 1};
    Piece right{mid, p.b, detail::gk15(f, mid, p.b), p.depth + 1};
    total += left.r.value + right.r.value - p.r.value;
    err += left.r.error + right.r.error - p.r.error;
    abs_total += left.r.abs_value + right.r.abs_value - p.r.abs_value;
    heap.push(left);
    heap.push(right);
  }
  // Recompute from the pieces to shed accumulated rounding in the running sums.
  Result out;
  while (!heap.empty()) {
    out.value += heap.top().r.value;
    out.error += heap.top().r.error;
    out.abs_value += heap.top().r.abs_value;
    heap.pop();
  }
  return out;
}

// Integral over consecutive breakpoints, each segment adaptive.
template <class F>
Result integrate_segments(F&& f, const std::vector<double>& breaks, const Options& opt = {}) {
  Result out;
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    const Result r = integrate(f, breaks[i], breaks[i + 1], opt);
    out.value += r.value;
    out.error += r.error;
    out.abs_value += r.abs_value;
  }
  return out;
}

struct Rule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

// Gauss-Legendre rule on [0, 1].
inline Rule gauss_legendre(int n) {
  Rule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0;
      double p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = pk;
      }
      if (n == 1) p0 = 1.0;
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    rule.nodes[n - 1 - i] = 0.5 * (x + 1.0);
    rule.weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
  }
  return rule;
}

// Gauss-Lobatto rule on [0, 1] (endpoints included).
inline Rule gauss_lobatto(int n) {
  Rule rule;
  rule.nodes.assign(n, 0.0);
  rule.weights.assign(n, 0.0);
  const int m = n - 1;
  for (int i = 0; i < n; ++i) {
    double x = -std::cos(std::numbers::pi * i / m);
    if (i > 0 && i < m) {
      for (int it = 0; it < 100; ++it) {
        // Interior nodes are the roots of P'_m; Newton on P'_m via the
        // Legendre ODE (1-x^2) P''_m = 2x P'_m - m(m+1) P_m.
        double p0 = 1.0;
        double p1 = x;
        for (int k = 2; k <= m; ++k) {
          const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
          p0 = p1;
          p1 = pk;
        }
        const double dp = m * (x * p1 - p0) / (x * x - 1.0);
        const double d2p = (2.0 * x * dp - m * (m + 1.0) * p1) / (1.0 - x * x);
        const double dx = dp / d2p;
        x -= dx;
        if (std::abs(dx) < 1e-16) break;
      }
    }
    double p0 = 1.0;
    double p1 = x;
    for (int k = 2; k <= m; ++k) {
      const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = pk;
    }
    rule.nodes[i] = 0.5 * (x + 1.0);
    rule.weights[i] = 1.0 / (m * (m + 1.0) * p1 * p1);
  }
  return rule;
}

}  // namespace pointbirth::quad
