#pragma once

// Radial fields on a graded grid and quadrature realisations of the
// semigroups S (heat), Sbar (rank-one comparison) and S^alpha.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "pointbirth/errors.hpp"
#include "pointbirth/kernel.hpp"
#include "pointbirth/parallel.hpp"
#include "pointbirth/quadrature.hpp"

namespace pointbirth {

struct ReferenceWeight {
  int d = 3;

  double operator()(double r) const { return reference_weight(d, r); }
  double operator()(const SpacePoint& x) const { return reference_weight(d, x.norm()); }
};

// A nonnegative function on R^d minus the origin with 0 <= f <= C phi.
struct TestFunction {
  int d = 3;
  std::function<double(const SpacePoint&)> eval;
  // Profile f(r) for radial functions.
  std::function<double(double)> profile;
  double envelope_const = 0.0;
  bool radial = true;
  double rho = 2.0;
  std::string label;
  // f ~ r^p as r -> 0, used to extrapolate below the grid.
  double leading_power = 0.0;

  double operator()(const SpacePoint& x) const {
    if (radial) return profile(x.norm());
    return eval(x);
  }

  double operator()(double r) const {
    if (radial) return profile(r);
    return eval(SpacePoint::polar(d, r));
  }

  TestFunction scaled(double c) const {
    TestFunction g = *this;
    if (profile) g.profile = [p = profile, c](double r) { return c * p(r); };
    if (eval) g.eval = [e = eval, c](const SpacePoint& x) { return c * e(x); };
    g.envelope_const *= c;
    g.label = label + "*" + std::to_string(c);
    return g;
  }

  static TestFunction make_radial(int d, std::function<double(double)> profile, double envelope, std::string label,
                                  double leading_power = 0.0, double rho = 2.0) {
    TestFunction f;
    f.d = d;
    f.profile = profile;
    f.eval = [profile](const SpacePoint& x) { return profile(x.norm()); };
    f.envelope_const = envelope;
    f.radial = true;
    f.rho = rho;
    f.label = std::move(label);
    f.leading_power = leading_power;
    return f;
  }

  // amplitude * e^{-|x|^2 / 4 sigma}.
  static TestFunction gaussian(int d, double sigma = 1.0, double amplitude = 1.0, double rho = 2.0) {
    const double a = 0.25 * (d - 1);
    // sup_r r^{(d-1)/2} e^{-r^2/4 sigma} at r^2 = (d-1) sigma
    const double envelope = amplitude * std::pow((d - 1) * sigma, a) * std::exp(-a);
    return make_radial(
        d, [sigma, amplitude](double r) { return amplitude * std::exp(-r * r / (4.0 * sigma)); }, envelope,
        "gaussian", 0.0, rho);
  }

  // phi^xi e^{-|x|^2/4 sigma}, xi in [0, 1].
  static TestFunction weight_power(int d, double xi, double sigma = 1.0, double rho = 2.0) {
    const double p = -0.5 * (d - 1) * xi;
    const double a = 0.25 * (d - 1) * (1.0 - xi);
    const double envelope = a == 0.0 ? 1.0 : std::pow(2.0 * a * sigma * 2.0, a) * std::exp(-a);
    return make_radial(
        d, [p, sigma](double r) { return std::pow(r, p) * std::exp(-r * r / (4.0 * sigma)); }, envelope,
        "weight_power", p, rho);
  }

  // Indicator of the ball of the given radius, smoothed over `width`.
  static TestFunction mollified_ball(int d, double radius, double width, double rho = 2.0) {
    auto prof = [radius, width](double r) { return 0.5 * std::erfc((r - radius) / width); };
    const double envelope = std::pow(radius + 6.0 * width, 0.5 * (d - 1));
    return make_radial(d, prof, envelope, "ball", 0.0, rho);
  }

  // A general (possibly non-radial) function.
  static TestFunction general(int d, std::function<double(const SpacePoint&)> eval, double envelope,
                              std::string label, double rho = 2.0) {
    TestFunction f;
    f.d = d;
    f.eval = std::move(eval);
    f.envelope_const = envelope;
    f.radial = false;
    f.rho = rho;
    f.label = std::move(label);
    return f;
  }
};

struct GridSpec {
  int n = 512;
  double r_min = 1e-8;
  double r_knee = 0.25;
  double r_max = 16.0;

  void validate() const {
    if (n < 16) throw ConfigError("grid: n must be at least 16");
    if (!(r_min > 0.0) || !(r_knee > r_min) || !(r_max > r_knee))
      throw ConfigError("grid: need 0 < r_min < r_knee < r_max");
  }
};

// Nodes r(u) = r_knee log(1 + e^u) on a uniform u-mesh: geometric spacing
// below r_knee, uniform above. Weights integrate g(r) r^{d-1} dr by the
// trapezoid rule in u.
struct RadialGrid {
  int d = 3;
  GridSpec spec;
  std::vector<double> nodes;
  std::vector<double> weights;
  // Local node spacing dr = (dr/du) du.
  std::vector<double> spacing;
  // Node i sits at u = u0 + i du.
  double u0 = 0.0;
  double du = 0.0;

  static std::shared_ptr<const RadialGrid> make(int d, const GridSpec& spec = {}) {
    detail::check_dim(d);
    spec.validate();
    auto g = std::make_shared<RadialGrid>();
    g->d = d;
    g->spec = spec;
    const double u0 = std::log(std::expm1(spec.r_min / spec.r_knee));
    const double u1 = std::log(std::expm1(spec.r_max / spec.r_knee));
    const double du = (u1 - u0) / (spec.n - 1);
    g->nodes.resize(spec.n);
    g->weights.resize(spec.n);
    g->spacing.resize(spec.n);
    g->u0 = u0;
    g->du = du;
    for (int i = 0; i < spec.n; ++i) {
      const double u = u0 + i * du;
      const double softplus = u > 30.0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
      const double r = spec.r_knee * softplus;
      const double drdu = spec.r_knee / (1.0 + std::exp(-u));
      const double end = (i == 0 || i == spec.n - 1) ? 0.5 : 1.0;
      g->nodes[i] = r;
      g->weights[i] = end * du * drdu * std::pow(r, d - 1);
      g->spacing[i] = du * drdu;
    }
    return g;
  }

  std::size_t size() const { return nodes.size(); }
  // Grid coordinate of a radius, inverse of r(u).
  double u_of(double r) const {
    const double x = r / spec.r_knee;
    return x > 30.0 ? x + std::log1p(-std::exp(-x)) : std::log(std::expm1(x));
  }
  double r_min() const { return nodes.front(); }
  double r_max() const { return nodes.back(); }
};

using GridPtr = std::shared_ptr<const RadialGrid>;

// Values of a radial function at the grid nodes.
struct FieldSample {
  GridPtr grid;
  std::vector<double> values;
  // f ~ r^p below the first node; estimated from the two smallest nodes when unset.
  double leading_power = std::numeric_limits<double>::quiet_NaN();

  FieldSample() = default;
  FieldSample(GridPtr g, std::vector<double> v, double p = std::numeric_limits<double>::quiet_NaN())
      : grid(std::move(g)), values(std::move(v)), leading_power(p) {}

  static FieldSample zeros(GridPtr g) {
    const std::size_t n = g->size();
    return FieldSample(std::move(g), std::vector<double>(n, 0.0), 0.0);
  }

  static FieldSample sample(GridPtr g, const TestFunction& f);

  std::size_t size() const { return values.size(); }

  double power() const {
    if (!std::isnan(leading_power)) return leading_power;
    const double v0 = std::abs(values[0]);
    const double v1 = std::abs(values[1]);
    if (!(v0 > 0.0) || !(v1 > 0.0)) return 0.0;
    // Fields in the test class are bounded by C phi, so the estimate is kept
    // within [-(d-1)/2, 2]; differences of nearby fields are otherwise noisy.
    const double p = std::log(v1 / v0) / std::log(grid->nodes[1] / grid->nodes[0]);
    return std::clamp(p, -0.5 * (grid->d - 1), 2.0);
  }

  // Monotone cubic (Fritsch-Carlson) interpolation in log r; power law below
  // the grid and zero beyond it.
  double operator()(double r) const {
    const auto& x = grid->nodes;
    const std::size_t n = x.size();
    if (r <= x.front()) return values.front() * std::pow(r / x.front(), power());
    if (r > x.back()) return 0.0;
    const std::size_t k = std::upper_bound(x.begin(), x.end(), r) - x.begin() - 1;
    const std::size_t j = std::min(k, n - 2);
    auto lx = [&](std::size_t i) { return std::log(x[i]); };
    auto slope = [&](std::size_t i) { return (values[i + 1] - values[i]) / (lx(i + 1) - lx(i)); };
    auto tangent = [&](std::size_t i) {
      if (i == 0) return slope(0);
      if (i == n - 1) return slope(n - 2);
      const double a = slope(i - 1);
      const double b = slope(i);
      if (a * b <= 0.0) return 0.0;
      const double ha = lx(i) - lx(i - 1);
      const double hb = lx(i + 1) - lx(i);
      const double w1 = 2.0 * hb + ha;
      const double w2 = hb + 2.0 * ha;
      return (w1 + w2) / (w1 / a + w2 / b);
    };
    const double h = lx(j + 1) - lx(j);
    const double s = (std::log(r) - lx(j)) / h;
    const double m0 = tangent(j) * h;
    const double m1 = tangent(j + 1) * h;
    const double s2 = s * s;
    const double s3 = s2 * s;
    return (2 * s3 - 3 * s2 + 1) * values[j] + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * values[j + 1] +
           (s3 - s2) * m1;
  }

  FieldSample& operator+=(const FieldSample& o) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += o.values[i];
    return *this;
  }
  FieldSample& operator-=(const FieldSample& o) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= o.values[i];
    return *this;
  }
  FieldSample& operator*=(double c) {
    for (double& v : values) v *= c;
    return *this;
  }
  friend FieldSample operator+(FieldSample a, const FieldSample& b) { return a += b; }
  friend FieldSample operator-(FieldSample a, const FieldSample& b) { return a -= b; }
  friend FieldSample operator*(double c, FieldSample a) { return a *= c; }
};

// Spherical mean of f over |x| = r.
inline double spherical_mean(const TestFunction& f, double r) {
  if (!(r > 0.0)) throw DomainError("spherical_mean: r must be positive");
  if (f.radial) return f.profile(r);
  constexpr int kAzimuth = 128;
  double sum = 0.0;
  if (f.d == 2) {
    for (int k = 0; k < kAzimuth; ++k) {
      const double th = 2.0 * std::numbers::pi * (k + 0.5) / kAzimuth;
      SpacePoint x;
      x.dim = 2;
      x.coords = {r * std::cos(th), r * std::sin(th), 0.0};
      sum += f.eval(x);
    }
    return sum / kAzimuth;
  }
  static const quad::Rule polar = quad::gauss_legendre(64);
  for (std::size_t i = 0; i < polar.nodes.size(); ++i) {
    const double c = 2.0 * polar.nodes[i] - 1.0;
    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    double ring = 0.0;
    for (int k = 0; k < kAzimuth; ++k) {
      const double th = 2.0 * std::numbers::pi * (k + 0.5) / kAzimuth;
      SpacePoint x;
      x.dim = 3;
      x.coords = {r * c, r * s * std::cos(th), r * s * std::sin(th)};
      ring += f.eval(x);
    }
    sum += polar.weights[i] * ring / kAzimuth;
  }
  return sum;
}

inline FieldSample FieldSample::sample(GridPtr g, const TestFunction& f) {
  if (f.d != g->d) throw DomainError("FieldSample::sample: dimension mismatch");
  std::vector<double> v(g->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = spherical_mean(f, g->nodes[i]);
  const double p = f.radial ? f.leading_power : std::numeric_limits<double>::quiet_NaN();
  return FieldSample(std::move(g), std::move(v), p);
}

namespace detail {

inline double norm_integrand_power(int d, double p, double rho) {
  // phi |f|^rho r^{d-1} ~ r^{e} near 0
  return -0.5 * (d - 1) + p * rho + (d - 1);
}

}  // namespace detail

// (int phi |f|^rho dx)^{1/rho} from grid values, with the region below the
// first node integrated analytically from the power-law extrapolation.
inline double h_norm(const FieldSample& f, double rho) {
  if (!(rho >= 1.0)) throw DomainError("h_norm: rho must be at least 1");
  const auto& g = *f.grid;
  const double area = sphere_area(g.d);
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += g.weights[i] * reference_weight(g.d, g.nodes[i]) * std::pow(std::abs(f.values[i]), rho);
  const double e = detail::norm_integrand_power(g.d, f.power(), rho);
  const double r0 = g.nodes[0];
  if (e > -1.0 && f.values[0] != 0.0) {
    s += reference_weight(g.d, r0) * std::pow(std::abs(f.values[0]), rho) * std::pow(r0, g.d - 1) * r0 / (e + 1.0);
  } else if (f.values[0] != 0.0) {
    throw NonConvergenceError("h_norm: function too singular at the origin", e);
  }
  return std::pow(area * s, 1.0 / rho);
}

// Norm of a test function by adaptive quadrature in log r of its spherical means.
inline double h_norm(const TestFunction& f, double rho) {
  if (!(rho >= 1.0)) throw DomainError("h_norm: rho must be at least 1");
  const int d = f.d;
  auto integrand = [&](double s) {
    const double r = std::exp(s);
    const double m = std::abs(spherical_mean(f, r));
    return reference_weight(d, r) * std::pow(m, rho) * std::pow(r, d);
  };
  quad::Options opt;
  opt.rel_tol = 1e-10;
  opt.abs_tol = 1e-300;
  std::vector<double> br;
  for (double b = -40.0; b <= 4.0; b += 1.0) br.push_back(b);
  const double value = quad::integrate_segments(integrand, br, opt).value;
  return std::pow(sphere_area(d) * value, 1.0 / rho);
}

inline double h_distance(const FieldSample& a, const FieldSample& b, double rho) {
  FieldSample diff = a - b;
  diff.leading_power = std::isnan(a.leading_power) ? b.leading_power : a.leading_power;
  return h_norm(diff, rho);
}

// Dense n x n quadrature realisation of a radial integral operator:
// (A f)_i = sum_j A_ij f_j.
class FlowMatrix {
 public:
  enum class Kind { heat, correction, palpha };

  FlowMatrix() = default;
  FlowMatrix(GridPtr grid, double t, std::vector<double> m) : grid_(std::move(grid)), t_(t), m_(std::move(m)) {}

  // Rows whose Gaussian is narrower than a few node spacings are not resolved
  // by the node rule. There the kernel is integrated exactly against the
  // six-point Lagrange interpolant of f in the grid coordinate u.
  static FlowMatrix heat(GridPtr grid, double t, int threads = 0) {
    detail::check_time(t);
    const std::size_t n = grid->size();
    std::vector<double> m(n * n, 0.0);
    const auto& r = grid->nodes;
    const auto& w = grid->weights;
    const int d = grid->d;
    const double width = std::sqrt(2.0 * t);
    const quad::Rule gl = quad::gauss_legendre(8);
    parallel_for(n, resolve_threads(threads), [&](std::size_t i) {
      double* row = &m[i * n];
      if (width >= kResolved * grid->spacing[i]) {
        for (std::size_t j = 0; j < n; ++j) row[j] = radial_heat_average(d, t, r[i], r[j]) * w[j];
        return;
      }
      const double lo = std::max(r.front(), r[i] - 12.0 * width);
      const double hi = std::min(r.back(), r[i] + 12.0 * width);
      std::size_t k = std::upper_bound(r.begin(), r.end(), lo) - r.begin();
      k = k == 0 ? 0 : k - 1;
      for (; k + 1 < n && r[k] < hi; ++k) {
        const double a = std::max(lo, r[k]);
        const double b = std::min(hi, r[k + 1]);
        if (!(b > a)) continue;
        const long first = std::clamp(static_cast<long>(k) - 2, 0L, static_cast<long>(n) - 6);
        const int pieces = std::max(1, static_cast<int>(std::ceil((b - a) / (0.5 * width))));
        const double len = (b - a) / pieces;
        for (int p = 0; p < pieces; ++p) {
          for (std::size_t q = 0; q < gl.nodes.size(); ++q) {
            const double rp = a + len * (p + gl.nodes[q]);
            const double kern = len * gl.weights[q] * radial_heat_average(d, t, r[i], rp) * std::pow(rp, d - 1);
            const double x = (grid->u_of(rp) - grid->u0) / grid->du - first;
            for (int c = 0; c < 6; ++c) {
              double l = 1.0;
              for (int e = 0; e < 6; ++e)
                if (e != c) l *= (x - e) / (c - e);
              row[first + c] += kern * l;
            }
          }
        }
      }
    });
    return FlowMatrix(grid, t, std::move(m));
  }

  static constexpr double kResolved = 1.2;

  static FlowMatrix correction(GridPtr grid, const KernelParams& params, double t, int threads = 0) {
    if (params.d != grid->d) throw DomainError("FlowMatrix: dimension mismatch");
    const CorrectionEvaluator q(params, t);
    const std::size_t n = grid->size();
    std::vector<double> m(n * n, 0.0);
    const auto& r = grid->nodes;
    const auto& w = grid->weights;
    const double area = sphere_area(grid->d);
    parallel_for(n, resolve_threads(threads), [&](std::size_t i) {
      for (std::size_t j = i; j < n; ++j) {
        const double v = q(r[i], r[j]);
        m[i * n + j] = v;
        m[j * n + i] = v;
      }
    });
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) m[i * n + j] *= area * w[j];
    return FlowMatrix(grid, t, std::move(m));
  }

  FieldSample apply(const FieldSample& f) const {
    const std::size_t n = grid_->size();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = &m_[i * n];
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += row[j] * f.values[j];
      out[i] = s;
    }
    return FieldSample(grid_, std::move(out));
  }

  // Row sums: the operator applied to 1.
  std::vector<double> row_sums() const {
    const std::size_t n = grid_->size();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i] += m_[i * n + j];
    return out;
  }

  FlowMatrix& operator+=(const FlowMatrix& o) {
    for (std::size_t k = 0; k < m_.size(); ++k) m_[k] += o.m_[k];
    return *this;
  }

  double operator()(std::size_t i, std::size_t j) const { return m_[i * grid_->size() + j]; }
  // Row-major entries.
  const std::vector<double>& data() const { return m_; }
  const GridPtr& grid() const { return grid_; }
  double time() const { return t_; }

 private:
  GridPtr grid_;
  double t_ = 0.0;
  std::vector<double> m_;
};

// Builds each (grid, kind, alpha, t) matrix once. Thread safe.
class OperatorCache {
 public:
  using Ptr = std::shared_ptr<const FlowMatrix>;

  explicit OperatorCache(GridPtr grid, int threads = 0) : grid_(std::move(grid)), threads_(threads) {}

  const FlowMatrix& heat(double t) { return *get(FlowMatrix::Kind::heat, 0.0, t); }
  const FlowMatrix& correction(double alpha, double t) { return *get(FlowMatrix::Kind::correction, alpha, t); }
  const FlowMatrix& palpha(double alpha, double t) { return *get(FlowMatrix::Kind::palpha, alpha, t); }
  Ptr palpha_shared(double alpha, double t) { return get(FlowMatrix::Kind::palpha, alpha, t); }
  // Built on demand and not retained; a cached copy is reused if present.
  Ptr palpha_transient(double alpha, double t) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = cache_.find(std::make_tuple(static_cast<int>(FlowMatrix::Kind::palpha), alpha, t));
      if (it != cache_.end()) return it->second;
    }
    return build(FlowMatrix::Kind::palpha, alpha, t);
  }

  const GridPtr& grid() const { return grid_; }
  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return cache_.size();
  }
  void clear() {
    std::lock_guard<std::mutex> lock(mutex_);
    cache_.clear();
  }

 private:
  Ptr build(FlowMatrix::Kind kind, double alpha, double t) const {
    const KernelParams params{grid_->d, alpha};
    switch (kind) {
      case FlowMatrix::Kind::heat:
        return std::make_shared<const FlowMatrix>(FlowMatrix::heat(grid_, t, threads_));
      case FlowMatrix::Kind::correction:
        return std::make_shared<const FlowMatrix>(FlowMatrix::correction(grid_, params, t, threads_));
      case FlowMatrix::Kind::palpha: {
        // Built directly so that the parts are not retained as well.
        FlowMatrix sum = FlowMatrix::heat(grid_, t, threads_);
        sum += FlowMatrix::correction(grid_, params, t, threads_);
        return std::make_shared<const FlowMatrix>(std::move(sum));
      }
    }
    throw DomainError("operator cache: unknown kind");
  }

  Ptr get(FlowMatrix::Kind kind, double alpha, double t) {
    const auto key = std::make_tuple(static_cast<int>(kind), alpha, t);
    {
      std::lock_guard<std::mutex> lock(mutex_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    Ptr m = build(kind, alpha, t);
    std::lock_guard<std::mutex> lock(mutex_);
    auto [it, inserted] = cache_.emplace(key, std::move(m));
    return it->second;
  }

  GridPtr grid_;
  int threads_;
  mutable std::mutex mutex_;
  std::map<std::tuple<int, double, double>, Ptr> cache_;
};

// Semigroup applications on the grid. The leading power of the output is the
// singular order of the correction: r^{-(d-1)/2} when alpha-flow is applied.
inline FieldSample apply_heat(OperatorCache& cache, double t, const FieldSample& f) {
  FieldSample out = cache.heat(t).apply(f);
  out.leading_power = 0.0;
  return out;
}

inline FieldSample apply_correction(OperatorCache& cache, double alpha, double t, const FieldSample& f) {
  FieldSample out = cache.correction(alpha, t).apply(f);
  out.leading_power = -0.5 * (cache.grid()->d - 1);
  return out;
}

inline FieldSample apply_palpha(OperatorCache& cache, const KernelParams& params, double t, const FieldSample& f) {
  if (params.d != cache.grid()->d) throw DomainError("apply_palpha: dimension mismatch");
  FieldSample out = cache.palpha(params.alpha, t).apply(f);
  out.leading_power = -0.5 * (params.d - 1);
  return out;
}

inline FieldSample apply_heat(OperatorCache& cache, double t, const TestFunction& f) {
  return apply_heat(cache, t, FieldSample::sample(cache.grid(), f));
}

inline FieldSample apply_palpha(OperatorCache& cache, const KernelParams& params, double t, const TestFunction& f) {
  return apply_palpha(cache, params, t, FieldSample::sample(cache.grid(), f));
}

// Sbar_t f(x) = t^{-1/2} phi(x) e^{-|x|^2/4t} <f, phi e^{-|.|^2/4t}>.
inline FieldSample apply_pbar(double t, const FieldSample& f) {
  detail::check_time(t);
  const auto& g = *f.grid;
  double inner = 0.0;
  for (std::size_t j = 0; j < f.size(); ++j)
    inner += g.weights[j] * f.values[j] * reference_weight(g.d, g.nodes[j]) * std::exp(-g.nodes[j] * g.nodes[j] / (4.0 * t));
  inner *= sphere_area(g.d);
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = reference_weight(g.d, g.nodes[i]) * std::exp(-g.nodes[i] * g.nodes[i] / (4.0 * t)) * inner / std::sqrt(t);
  return FieldSample(f.grid, std::move(out), -0.5 * (g.d - 1));
}

inline FieldSample apply_pbar(GridPtr grid, double t, const TestFunction& f) {
  return apply_pbar(t, FieldSample::sample(std::move(grid), f));
}

// Heat flow of a (possibly non-radial) function at one point, by polar
// quadrature of the full d-dimensional integral.
inline double heat_flow_at(double t, const TestFunction& f, const SpacePoint& x) {
  detail::check_time(t);
  const int d = f.d;
  const double st = std::sqrt(t);
  const quad::Rule radial = quad::gauss_legendre(48);
  constexpr int kAzimuth = 64;
  double sum = 0.0;
  // Radius of the displacement y - x, Gaussian weight absorbed up to 12 sqrt(t).
  const double rmax = 12.0 * st;
  for (std::size_t a = 0; a < radial.nodes.size(); ++a) {
    const double rho = rmax * radial.nodes[a];
    const double wr = rmax * radial.weights[a] * radial_heat_kernel(d, t, rho) * std::pow(rho, d - 1);
    if (d == 2) {
      double ring = 0.0;
      for (int k = 0; k < kAzimuth; ++k) {
        const double th = 2.0 * std::numbers::pi * (k + 0.5) / kAzimuth;
        SpacePoint y = x;
        y.coords[0] += rho * std::cos(th);
        y.coords[1] += rho * std::sin(th);
        ring += f(y);
      }
      sum += wr * 2.0 * std::numbers::pi * ring / kAzimuth;
    } else {
      static const quad::Rule polar = quad::gauss_legendre(32);
      double shell = 0.0;
      for (std::size_t i = 0; i < polar.nodes.size(); ++i) {
        const double c = 2.0 * polar.nodes[i] - 1.0;
        const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
        double ring = 0.0;
        for (int k = 0; k < kAzimuth; ++k) {
          const double th = 2.0 * std::numbers::pi * (k + 0.5) / kAzimuth;
          SpacePoint y = x;
          y.coords[0] += rho * c;
          y.coords[1] += rho * s * std::cos(th);
          y.coords[2] += rho * s * std::sin(th);
          ring += f(y);
        }
        shell += polar.weights[i] * ring / kAzimuth;
      }
      sum += wr * 4.0 * std::numbers::pi * shell;
    }
  }
  return sum;
}

// S^alpha_t f at one point for a general f: heat part by d-dimensional
// quadrature, correction through the spherical means of f.
inline double apply_palpha_at(const KernelParams& params, double t, const TestFunction& f, const SpacePoint& x,
                              const RadialGrid& grid) {
  const double heat = heat_flow_at(t, f, x);
  const CorrectionEvaluator q(params, t);
  const double rx = x.norm();
  double corr = 0.0;
  for (std::size_t j = 0; j < grid.size(); ++j)
    corr += grid.weights[j] * q(rx, grid.nodes[j]) * spherical_mean(f, grid.nodes[j]);
  return heat + sphere_area(params.d) * corr;
}

}  // namespace pointbirth
