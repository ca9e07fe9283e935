#pragma once

// The log-Laplace equation
//     v(t) = S^alpha_t phi - eta int_0^t S^alpha_{t-s} v(s)^{1+beta} ds
// solved by Picard iteration over linearised Volterra solves, and by the
// Trotter scheme that alternates exact branching ODE steps with S^alpha flows.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pointbirth/errors.hpp"
#include "pointbirth/field.hpp"
#include "pointbirth/kernel.hpp"
#include "pointbirth/quadrature.hpp"
#include "pointbirth/specfun.hpp"

namespace pointbirth {

struct ModelParams {
  int d = 2;
  double alpha = 0.0;
  double beta = 1.0;
  double eta = 1.0;
  // Norm exponent; NaN selects the midpoint of the admissible interval.
  double rho = std::numeric_limits<double>::quiet_NaN();

  double rho_lower() const { return 1.0 / (1.0 - beta * (d - 1) / (d + 1.0)); }
  double rho_upper() const { return (d + 1.0) / (d - 1.0); }
  double rho_value() const { return std::isnan(rho) ? 0.5 * (rho_lower() + rho_upper()) : rho; }
  double kappa() const {
    const double r = rho_value();
    return beta / 2.0 - beta * (d + 1) * (r - 1.0) / (4.0 * r);
  }
  double lambda() const { return beta * (d - 1) / 4.0; }
  KernelParams kernel() const { return KernelParams{d, alpha}; }

  static ModelParams reference(int d) {
    ModelParams p;
    p.d = d;
    p.alpha = 0.0;
    p.eta = 1.0;
    p.beta = d == 2 ? 1.0 : 0.5;
    p.rho = d == 2 ? 2.0 : 1.6;
    return p;
  }
};

struct HypothesisReport {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  std::string summary() const {
    std::string s;
    for (const auto& v : violations) s += (s.empty() ? "" : "; ") + v;
    return s;
  }
};

inline HypothesisReport validate_hypothesis(const ModelParams& p) {
  HypothesisReport rep;
  if (p.d != 2 && p.d != 3) {
    rep.violations.push_back("d must be 2 or 3");
    return rep;
  }
  if (!std::isfinite(p.alpha)) rep.violations.push_back("alpha must be finite");
  if (!(p.beta > 0.0 && p.beta <= 1.0)) rep.violations.push_back("beta must lie in (0, 1]");
  if (!(p.eta >= 0.0)) rep.violations.push_back("eta must be nonnegative");
  if (!rep.ok()) return rep;
  if (p.d == 3 && !(p.beta < 1.0))
    rep.violations.push_back("d = 3 requires beta < 1 (infinite variance branching)");
  const double r = p.rho_value();
  if (!(r > p.rho_lower()))
    rep.violations.push_back("rho = " + std::to_string(r) + " must exceed 1/(1 - beta(d-1)/(d+1)) = " +
                             std::to_string(p.rho_lower()));
  if (!(r < p.rho_upper()))
    rep.violations.push_back("rho = " + std::to_string(r) + " must be below (d+1)/(d-1) = " +
                             std::to_string(p.rho_upper()));
  const double k = p.kappa();
  if (!(k > 0.0 && k < 1.0)) rep.violations.push_back("kappa = " + std::to_string(k) + " must lie in (0, 1)");
  if (!(k + p.lambda() < 1.0)) rep.violations.push_back("kappa + lambda must be below 1");
  return rep;
}

// Exact flow of v' = -eta v^{1+beta} over a time delta.
inline double csb_step(double v, double delta, double eta, double beta) {
  if (v < 0.0) throw DomainError("csb_step: v must be nonnegative");
  if (!(delta >= 0.0)) throw DomainError("csb_step: delta must be nonnegative");
  if (eta == 0.0 || v == 0.0) return v;
  return v / std::pow(1.0 + eta * beta * std::pow(v, beta) * delta, 1.0 / beta);
}

struct ElementaryBound {
  double lhs = 0.0;
  double rhs = 0.0;
};

// |a (a v 0)^beta - b (b v 0)^beta|  versus  (1+beta)(|a|+|b|)^beta |a-b|.
inline ElementaryBound elementary_bound(double a, double b, double beta) {
  if (!(beta > 0.0)) throw DomainError("elementary_bound: beta must be positive");
  auto f = [beta](double x) { return x * std::pow(std::max(x, 0.0), beta); };
  return {std::abs(f(a) - f(b)), (1.0 + beta) * std::pow(std::abs(a) + std::abs(b), beta) * std::abs(a - b)};
}

// I(t) = t^{1-lambda}/(1-lambda) + t^{1-lambda-kappa} B(1-kappa, 1-lambda).
inline double i_integral(double t, double kappa, double lambda) {
  if (!(kappa >= 0.0) || !(lambda >= 0.0)) throw DomainError("i_integral: kappa, lambda must be nonnegative");
  if (!(kappa + lambda < 1.0)) throw DomainError("i_integral: kappa + lambda must be below 1");
  if (t < 0.0) throw DomainError("i_integral: t must be nonnegative");
  if (t == 0.0) return 0.0;
  return std::pow(t, 1.0 - lambda) / (1.0 - lambda) +
         std::pow(t, 1.0 - lambda - kappa) * specfun::beta_function(1.0 - kappa, 1.0 - lambda);
}

struct SolverConfig {
  double T = 1.0;
  double picard_tol = 1e-9;
  int max_picard_iters = 30;
  int trotter_n = 64;
  // Uniform panels per unit time, and geometric cuts of the first panel.
  int panels_per_unit = 96;
  int start_levels = 16;
  double start_ratio = 1.4142135623730951;
  // Gauss-Legendre nodes of the tau-rule tau = h sigma^p on uniform panels
  // and on the geometric start.
  int tau_nodes = 16;
  int tau_nodes_start = 16;
  double tau_grading = 5.0;
  // Nodes of the time interpolant of the nonlinearity.
  int stencil = 5;
  // Contraction factor above which the Picard horizon is shortened.
  double restart_contraction = 0.5;
  // Measure residuals with a finer tau-rule and a wider centred interpolant
  // than the solver uses. Off, the residual is the fixed-point defect of the
  // solver's own discretisation.
  bool independent_residual = true;
  int threads = 0;

  void validate() const {
    if (!(T > 0.0)) throw ConfigError("solver: T must be positive");
    if (!(picard_tol > 0.0)) throw ConfigError("solver: picard_tol must be positive");
    if (max_picard_iters < 1) throw ConfigError("solver: max_picard_iters must be at least 1");
    if (trotter_n < 1) throw ConfigError("solver: trotter_n must be at least 1");
    if (panels_per_unit < 1) throw ConfigError("solver: panels_per_unit must be at least 1");
    if (start_levels < 0) throw ConfigError("solver: start_levels must be nonnegative");
    if (!(start_ratio > 1.0)) throw ConfigError("solver: start_ratio must exceed 1");
    if (tau_nodes < 2 || tau_nodes_start < 2) throw ConfigError("solver: tau rules need at least 2 nodes");
    if (!(tau_grading >= 1.0)) throw ConfigError("solver: tau_grading must be at least 1");
    if (stencil < 2 || stencil > 8) throw ConfigError("solver: stencil must lie in [2, 8]");
  }
};

// 0 = t_0 < ... < t_N: uniform panels of width h from t = K h on, geometric
// nodes K h q^{-m} below it. K = ceil(1/(q-1)) keeps every step below the
// distance to the origin, so steps shrink with the initial layer.
struct TimeMesh {
  std::vector<double> t;
  // Step widths, exact multiples on the uniform part so that operators repeat.
  std::vector<double> dt;
  // Steps i < start_steps lie in the geometric part.
  std::size_t start_steps = 0;

  static TimeMesh make(double T, int panels_per_unit, int start_levels, double start_ratio = 2.0) {
    TimeMesh m;
    const int n = std::max(1, static_cast<int>(std::ceil(T * panels_per_unit - 1e-9)));
    const double h = T / n;
    const int first = start_levels == 0 ? 1 : std::min(n, static_cast<int>(std::ceil(1.0 / (start_ratio - 1.0) - 1e-9)));
    m.t.push_back(0.0);
    for (int k = start_levels; k >= 1; --k) m.t.push_back(first * h * std::pow(start_ratio, -k));
    m.start_steps = start_levels == 0 ? 0 : start_levels + 1;
    for (int i = first; i <= n; ++i) m.t.push_back(i == n ? T : i * h);
    for (std::size_t i = 0; i + 1 < m.t.size(); ++i) m.dt.push_back(i < m.start_steps ? m.t[i + 1] - m.t[i] : h);
    return m;
  }

  std::size_t size() const { return t.size(); }
  double back() const { return t.back(); }
};

struct Solution {
  std::vector<double> times;
  std::vector<FieldSample> values;
  std::vector<double> residuals;
  std::string method;
  int iterations = 0;
  double contraction = 0.0;
  // Largest negative excursion removed by clamping, relative to sup |v|.
  double clamp = 0.0;
  // For the Trotter scheme: branching parameters and level, so that values
  // between flow instants are reproduced exactly.
  double eta = 0.0;
  double beta = 1.0;
  int trotter_n = 0;

  // v(t) by cubic Lagrange interpolation between nodes; Trotter solutions are
  // piecewise CSB flows of their values at k/n.
  FieldSample at(double t) const {
    if (times.empty()) throw DomainError("Solution::at: empty solution");
    if (t < times.front() - 1e-12 || t > times.back() + 1e-12) throw DomainError("Solution::at: t outside horizon");
    if (method == "trotter") {
      std::size_t k = std::upper_bound(times.begin(), times.end(), t + 1e-12) - times.begin();
      k = k == 0 ? 0 : k - 1;
      FieldSample out = values[k];
      const double dt = t - times[k];
      if (dt > 0.0)
        for (double& v : out.values) v = csb_step(v, dt, eta, beta);
      return out;
    }
    for (std::size_t i = 0; i < times.size(); ++i)
      if (std::abs(times[i] - t) <= 1e-12 * std::max(1.0, t)) return values[i];
    std::size_t k = std::upper_bound(times.begin(), times.end(), t) - times.begin();
    const std::size_t lo = k >= 2 ? std::min(k - 2, times.size() >= 4 ? times.size() - 4 : 0) : 0;
    const std::size_t hi = std::min(times.size(), lo + 4);
    FieldSample out = FieldSample::zeros(values.front().grid);
    out.leading_power = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t j = lo; j < hi; ++j) {
      double l = 1.0;
      for (std::size_t m = lo; m < hi; ++m)
        if (m != j) l *= (t - times[m]) / (times[j] - times[m]);
      for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += l * values[j].values[i];
    }
    return out;
  }
};

namespace detail {

// Lagrange basis values at x for the given nodes.
inline std::vector<double> lagrange_weights(const std::vector<double>& nodes, double x) {
  std::vector<double> w(nodes.size(), 1.0);
  for (std::size_t j = 0; j < nodes.size(); ++j)
    for (std::size_t m = 0; m < nodes.size(); ++m)
      if (m != j) w[j] *= (x - nodes[m]) / (nodes[j] - nodes[m]);
  return w;
}

inline void gemv(const std::vector<double>& m, const std::vector<double>& x, double scale, std::vector<double>& y) {
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &m[i * n];
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * x[j];
    y[i] += scale * s;
  }
}

}  // namespace detail

// Integrates one mesh step of the Duhamel formula
//     w(t_{i+1}) = S_h w(t_i) - int_0^h S_tau g(t_{i+1} - tau) dtau,
// with g replaced by its Lagrange interpolant through the stencil nodes and
// the tau-integral by Gauss-Legendre in sigma, tau = h sigma^p. The grading
// p absorbs the tau-singularity of S_tau acting on fields that are singular
// at the origin. The interpolant is taken in sqrt(s): near the origin the
// point interaction makes the solution behave like sqrt(s) at early times.
class DuhamelStepper {
 public:
  struct Rule {
    int tau_nodes = 32;
    int tau_nodes_start = 8;
    double grading = 5.0;
    // Stencil width for the time interpolant (4 = cubic).
    int stencil = 4;
    // Whether the stencil may reach beyond the step (used by the residual).
    bool centred = false;
    // Whether operators go into the shared cache. Otherwise only those of the
    // current step width are kept, which suits a single sweep.
    bool retain = true;
  };

  struct Step {
    OperatorCache::Ptr flow;
    std::vector<std::size_t> nodes;
    // Per tau node: operator S_tau, weight, and Lagrange weights over `nodes`.
    std::vector<OperatorCache::Ptr> ops;
    std::vector<double> weights;
    std::vector<std::vector<double>> lagrange;
  };

  DuhamelStepper(OperatorCache& cache, const KernelParams& params, Rule rule)
      : cache_(cache), params_(params), rule_(rule) {}

  // Stencil node indices for step i -> i+1 on a mesh of size n.
  std::vector<std::size_t> stencil(std::size_t i, std::size_t n) const {
    const int w = rule_.stencil;
    long lo = rule_.centred ? static_cast<long>(i) - (w - 2) / 2 : static_cast<long>(i) + 2 - w;
    long hi = lo + w - 1;
    if (hi > static_cast<long>(n) - 1) {
      lo -= hi - (static_cast<long>(n) - 1);
      hi = static_cast<long>(n) - 1;
    }
    lo = std::max(0L, lo);
    hi = std::min(hi, static_cast<long>(n) - 1);
    hi = std::max(hi, static_cast<long>(i) + 1);
    std::vector<std::size_t> out;
    for (long j = lo; j <= hi; ++j) out.push_back(static_cast<std::size_t>(j));
    return out;
  }

  Step step(const TimeMesh& mesh, std::size_t i) {
    const auto& t = mesh.t;
    Step st;
    const double h = mesh.dt[i];
    st.nodes = stencil(i, t.size());
    if (!rule_.retain && h != local_h_) {
      local_.clear();
      local_h_ = h;
    }
    st.flow = op(h);
    std::vector<double> xs;
    for (std::size_t j : st.nodes) xs.push_back(std::sqrt(t[j]));
    const quad::Rule gl = quad::gauss_legendre(i < mesh.start_steps ? rule_.tau_nodes_start : rule_.tau_nodes);
    const double p = rule_.grading;
    for (std::size_t q = 0; q < gl.nodes.size(); ++q) {
      const double sg = gl.nodes[q];
      const double tau = h * std::pow(sg, p);
      st.ops.push_back(op(tau));
      st.weights.push_back(gl.weights[q] * h * p * std::pow(sg, p - 1.0));
      st.lagrange.push_back(detail::lagrange_weights(xs, std::sqrt(std::max(0.0, t[i + 1] - tau))));
    }
    return st;
  }

  OperatorCache& cache() { return cache_; }

 private:
  OperatorCache::Ptr op(double tau) {
    if (rule_.retain) return cache_.palpha_shared(params_.alpha, tau);
    auto it = local_.find(tau);
    if (it != local_.end()) return it->second;
    auto m = cache_.palpha_transient(params_.alpha, tau);
    local_.emplace(tau, m);
    return m;
  }

  OperatorCache& cache_;
  KernelParams params_;
  Rule rule_;
  std::map<double, OperatorCache::Ptr> local_;
  double local_h_ = -1.0;
};

namespace detail {

inline double sup_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// sum_a l_qa f[nodes[a]] over the stencil nodes for which `use(a)` holds.
template <class Use>
void interpolate(const DuhamelStepper::Step& st, std::size_t q, const std::vector<std::vector<double>>& f, Use use,
                 std::vector<double>& out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t a = 0; a < st.nodes.size(); ++a) {
    if (!use(a)) continue;
    const double l = st.lagrange[q][a];
    const auto& fa = f[st.nodes[a]];
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += l * fa[k];
  }
}

}  // namespace detail

// Solves v(t) = S_t v0 - int_0^t S_{t-s}(psi(s) v(s)) ds on the mesh, psi
// given at the mesh nodes. Near the origin v grows like sqrt(s) and psi like
// a power of v, so v and psi^{1/psi_power} are interpolated in time rather
// than their product. The implicit end-point dependence is resolved by
// fixed-point iteration. Negative values are clamped to 0; the largest
// clamped magnitude (relative to sup |v|) is reported through `clamp`.
inline std::vector<FieldSample> duhamel_linear(DuhamelStepper& stepper, const TimeMesh& mesh, const FieldSample& v0,
                                               const std::vector<FieldSample>& psi, double psi_power = 1.0,
                                               double* clamp = nullptr) {
  const std::size_t nt = mesh.size();
  const std::size_t n = v0.size();
  std::vector<FieldSample> v(nt, v0);
  std::vector<std::vector<double>> vv(nt), base(psi.size());
  vv[0] = v0.values;
  for (std::size_t j = 0; j < psi.size(); ++j) {
    base[j] = psi[j].values;
    for (double& x : base[j]) x = std::pow(std::max(x, 0.0), 1.0 / psi_power);
  }
  double worst_clamp = 0.0;
  std::vector<double> x(n), p(n);
  for (std::size_t i = 0; i + 1 < nt; ++i) {
    const auto st = stepper.step(mesh, i);
    std::vector<double> cur = st.flow->apply(v[i]).values;
    if (!psi.empty()) {
      std::size_t self = 0;
      while (st.nodes[self] != i + 1) ++self;
      std::vector<double> b(n * n, 0.0);
      for (std::size_t q = 0; q < st.ops.size(); ++q) {
        detail::interpolate(st, q, base, [](std::size_t) { return true; }, p);
        for (double& y : p) y = std::pow(std::max(y, 0.0), psi_power);
        detail::interpolate(st, q, vv, [&](std::size_t a) { return st.nodes[a] <= i; }, x);
        for (std::size_t k = 0; k < n; ++k) x[k] *= p[k];
        const std::vector<double>& s = st.ops[q]->data();
        detail::gemv(s, x, -st.weights[q], cur);
        // Combined operator acting on the unknown end point.
        const double c = st.weights[q] * st.lagrange[q][self];
        for (std::size_t r = 0; r < n; ++r) {
          const double* srow = &s[r * n];
          double* brow = &b[r * n];
          for (std::size_t k = 0; k < n; ++k) brow[k] += c * srow[k] * p[k];
        }
      }
      const std::vector<double> rhs = cur;
      for (int it = 0;; ++it) {
        std::vector<double> next = rhs;
        detail::gemv(b, cur, -1.0, next);
        double diff = 0.0;
        for (std::size_t k = 0; k < n; ++k)
          diff = std::max(diff, std::abs(next[k] - cur[k]) / (std::abs(next[k]) + 1e-300));
        cur.swap(next);
        if (diff < 1e-14) break;
        if (it == 200) throw NonConvergenceError("linearized step: implicit iteration did not settle", diff);
      }
    }
    const double sup = detail::sup_abs(cur);
    for (double& y : cur) {
      if (y < 0.0) {
        worst_clamp = std::max(worst_clamp, -y / std::max(sup, 1e-300));
        y = 0.0;
      }
    }
    vv[i + 1] = cur;
    v[i + 1].values = std::move(cur);
    v[i + 1].leading_power = std::numeric_limits<double>::quiet_NaN();
  }
  if (clamp) *clamp = worst_clamp;
  return v;
}

class LogLaplaceSolver {
 public:
  LogLaplaceSolver(const ModelParams& params, OperatorCache& cache, SolverConfig config = {})
      : params_(params),
        cache_(cache),
        config_(config),
        stepper_(cache, params.kernel(), {config.tau_nodes, config.tau_nodes_start, config.tau_grading, config.stencil, false, true}),
        checker_(cache, params.kernel(),
                 config.independent_residual
                     ? DuhamelStepper::Rule{config.tau_nodes + 16, 2 * config.tau_nodes_start, config.tau_grading,
                                            config.stencil + 1, true, false}
                     : DuhamelStepper::Rule{config.tau_nodes, config.tau_nodes_start, config.tau_grading,
                                            config.stencil, false, true}) {
    config_.validate();
    const auto rep = validate_hypothesis(params);
    if (!rep.ok()) throw ConfigError("hypothesis violated: " + rep.summary());
    if (params.d != cache.grid()->d) throw ConfigError("solver: grid dimension differs from model dimension");
  }

  const ModelParams& params() const { return params_; }
  const SolverConfig& config() const { return config_; }
  OperatorCache& cache() { return cache_; }

  TimeMesh mesh(double T) const { return TimeMesh::make(T, config_.panels_per_unit, config_.start_levels, config_.start_ratio); }

  // S^alpha_t phi on the mesh.
  Solution flow(const FieldSample& phi, double T) {
    const TimeMesh m = mesh(T);
    Solution sol;
    sol.method = "flow";
    sol.times = m.t;
    sol.values = duhamel_linear(stepper_, m, phi, {});
    return sol;
  }

  // v(t) = S_t phi - int_0^t S_{t-s}(psi(s) v(s)) ds with psi(s) = psi_fn(s).
  Solution linearized(const FieldSample& phi, double T, const std::function<FieldSample(double)>& psi_fn) {
    const TimeMesh m = mesh(T);
    std::vector<FieldSample> psi;
    for (double t : m.t) psi.push_back(psi_fn(t));
    Solution sol;
    sol.method = "linearized";
    sol.times = m.t;
    sol.values = duhamel_linear(stepper_, m, phi, psi, 1.0, &sol.clamp);
    return sol;
  }

  // Starting iterate: the linear flow, zero, or the datum held fixed in time.
  enum class Init { flow, zero, datum };

  Solution picard(const FieldSample& phi, double T, Init init = Init::flow) {
    Solution out;
    out.method = "picard";
    double start = 0.0;
    double window = T;
    FieldSample datum = phi;
    out.times.push_back(0.0);
    out.values.push_back(phi);
    while (start < T - 1e-12) {
      window = std::min(window, T - start);
      Solution part;
      if (!picard_window(datum, window, init, part)) {
        window *= 0.5;
        if (window < 1.0 / config_.panels_per_unit)
          throw NonConvergenceError("picard: contraction persists on the shortest window", part.contraction);
        continue;
      }
      for (std::size_t i = 1; i < part.times.size(); ++i) {
        out.times.push_back(start + part.times[i]);
        out.values.push_back(part.values[i]);
      }
      out.iterations = std::max(out.iterations, part.iterations);
      out.contraction = std::max(out.contraction, part.contraction);
      out.clamp = std::max(out.clamp, part.clamp);
      datum = part.values.back();
      start += window;
    }
    return out;
  }

  // One application of the Picard map to `current` (given on this solver's mesh).
  Solution picard_step(const FieldSample& phi, const Solution& current) {
    const TimeMesh m = mesh(current.times.back());
    bool same = m.size() == current.times.size();
    for (std::size_t j = 0; same && j < m.size(); ++j) same = std::abs(m.t[j] - current.times[j]) <= 1e-12;
    if (!same) throw DomainError("picard_step: solution is not on the solver mesh");
    std::vector<FieldSample> psi(m.size(), FieldSample::zeros(phi.grid));
    for (std::size_t j = 0; j < m.size(); ++j)
      for (std::size_t q = 0; q < phi.size(); ++q)
        psi[j].values[q] = params_.eta * std::pow(std::max(current.values[j].values[q], 0.0), params_.beta);
    Solution sol;
    sol.method = "picard";
    sol.iterations = 1;
    sol.times = m.t;
    sol.values = duhamel_linear(stepper_, m, phi, psi, params_.beta, &sol.clamp);
    return sol;
  }

  // Trotter scheme of level n up to time T; values stored at the flow
  // instants k/n, k = 0..floor(nT).
  Solution trotter(const FieldSample& phi, double T, int n) {
    if (n < 1) throw DomainError("trotter: n must be at least 1");
    const double delta = 1.0 / n;
    const FlowMatrix& s = cache_.palpha(params_.alpha, delta);
    Solution sol;
    sol.method = "trotter";
    sol.eta = params_.eta;
    sol.beta = params_.beta;
    sol.trotter_n = n;
    FieldSample v = s.apply(phi);
    const int steps = static_cast<int>(std::floor(T * n + 1e-9));
    sol.times.push_back(0.0);
    sol.values.push_back(v);
    for (int k = 1; k <= steps; ++k) {
      for (double& x : v.values) x = csb_step(std::max(x, 0.0), delta, params_.eta, params_.beta);
      v = s.apply(v);
      for (double& x : v.values) x = std::max(x, 0.0);
      sol.times.push_back(k * delta);
      sol.values.push_back(v);
    }
    if (T > steps * delta + 1e-12) {
      sol.times.push_back(T);
      sol.values.push_back(sol.at(T));
    }
    return sol;
  }

  // H-norm defect of the integral equation at the nodes of a fresh mesh
  // (finer tau-rule, wider centred interpolant of eta v^{1+beta}).
  // Returns (times, residuals).
  std::pair<std::vector<double>, std::vector<double>> residual(const Solution& sol, const FieldSample& phi) {
    const double T = sol.times.back();
    const TimeMesh m = mesh(T);
    const std::size_t nt = m.size();
    const std::size_t n = phi.size();
    std::vector<FieldSample> v;
    for (double t : m.t) v.push_back(sol.at(t));
    std::vector<std::vector<double>> vv(nt);
    for (std::size_t j = 0; j < nt; ++j) vv[j] = v[j].values;
    FieldSample z = phi;
    std::vector<double> res(nt, 0.0);
    const double rho = params_.rho_value();
    res[0] = h_distance(v[0], phi, rho);
    std::vector<double> x(n);
    for (std::size_t i = 0; i + 1 < nt; ++i) {
      const auto st = checker_.step(m, i);
      std::vector<double> next = st.flow->apply(z).values;
      for (std::size_t q = 0; q < st.ops.size(); ++q) {
        detail::interpolate(st, q, vv, [](std::size_t) { return true; }, x);
        for (double& y : x) y = params_.eta * std::pow(std::max(y, 0.0), 1.0 + params_.beta);
        detail::gemv(st.ops[q]->data(), x, -st.weights[q], next);
      }
      z.values = std::move(next);
      z.leading_power = std::numeric_limits<double>::quiet_NaN();
      res[i + 1] = h_distance(v[i + 1], z, rho);
    }
    return {m.t, res};
  }

  // Residual at each of the solution's own nodes (nearest mesh node).
  void attach_residuals(Solution& sol, const FieldSample& phi) {
    const auto [t, r] = residual(sol, phi);
    sol.residuals.assign(sol.times.size(), 0.0);
    for (std::size_t i = 0; i < sol.times.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < t.size(); ++j)
        if (std::abs(t[j] - sol.times[i]) < std::abs(t[best] - sol.times[i])) best = j;
      sol.residuals[i] = r[best];
    }
  }

 private:
  bool picard_window(const FieldSample& datum, double T, Init init, Solution& out) {
    const TimeMesh m = mesh(T);
    const double rho = params_.rho_value();
    std::vector<FieldSample> cur;
    if (init == Init::flow) {
      cur = duhamel_linear(stepper_, m, datum, {});
    } else if (init == Init::zero) {
      cur.assign(m.size(), FieldSample::zeros(datum.grid));
    } else {
      cur.assign(m.size(), datum);
    }
    double prev = std::numeric_limits<double>::infinity();
    double clamp = 0.0;
    out.contraction = 0.0;
    for (int k = 1; k <= config_.max_picard_iters; ++k) {
      std::vector<FieldSample> psi(m.size(), FieldSample::zeros(datum.grid));
      for (std::size_t j = 0; j < m.size(); ++j)
        for (std::size_t q = 0; q < datum.size(); ++q)
          psi[j].values[q] = params_.eta * std::pow(std::max(cur[j].values[q], 0.0), params_.beta);
      double c = 0.0;
      auto next = duhamel_linear(stepper_, m, datum, psi, params_.beta, &c);
      clamp = std::max(clamp, c);
      double diff = 0.0;
      for (std::size_t j = 0; j < m.size(); ++j) diff = std::max(diff, h_distance(next[j], cur[j], rho));
      cur = std::move(next);
      if (std::isfinite(prev) && prev > 0.0) out.contraction = std::max(out.contraction, diff / prev);
      out.iterations = k;
      if (diff < config_.picard_tol) {
        out.times = m.t;
        out.values = std::move(cur);
        out.clamp = clamp;
        return true;
      }
      if (k >= 3 && diff / prev > config_.restart_contraction) {
        out.contraction = diff / prev;
        return false;
      }
      prev = diff;
    }
    throw NonConvergenceError("picard: iteration cap reached", out.contraction);
  }

  ModelParams params_;
  OperatorCache& cache_;
  SolverConfig config_;
  DuhamelStepper stepper_;
  DuhamelStepper checker_;
};

}  // namespace pointbirth
