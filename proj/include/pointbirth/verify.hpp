#pragma once

// Acceptance suite: one check per property of the kernels, the flow, the
// log-Laplace solvers and the particle scheme. Shared by the test driver and
// the `verify` subcommand.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pointbirth/field.hpp"
#include "pointbirth/kernel.hpp"
#include "pointbirth/loglaplace.hpp"
#include "pointbirth/quadrature.hpp"
#include "pointbirth/simulate.hpp"
#include "pointbirth/specfun.hpp"

namespace pointbirth::verify {

struct Check {
  int id = 0;
  std::string name;
  bool passed = false;
  // Headline quantity and the threshold it is held against.
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
  double seconds = 0.0;
};

inline Check named(int id, std::string name) {
  Check c;
  c.id = id;
  c.name = std::move(name);
  return c;
}

struct SuiteOptions {
  GridSpec grid;
  SolverConfig solver;
  int replicates = 10000;
  int trotter_n = 32;
  std::uint64_t seed = 1;
  int threads = 0;
  // Checks to run; empty runs all.
  std::set<int> only;

  bool wants(int id) const { return only.empty() || only.count(id) > 0; }
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

inline double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace detail

// heat <= P^alpha and P^alpha <= heat + C Pbar on a random sample with T = 2.
inline Check kernel_sandwich(std::uint64_t seed = 1) {
  detail::Stopwatch clock;
  Check c = named(1, "kernel sandwich");
  std::mt19937_64 rng(seed);
  int violations = 0;
  std::ostringstream fitted;
  for (int d : {2, 3}) {
    for (double alpha : {-1.0, 0.0, 1.0}) {
      const KernelParams kp{d, alpha};
      std::vector<double> excess;
      std::vector<double> pbar;
      std::vector<KernelValue> values;
      for (int i = 0; i < 1000; ++i) {
        const double t = detail::uniform(rng, 1e-3, 2.0);
        const double rx = detail::log_uniform(rng, 1e-2, 4.0);
        const double ry = detail::log_uniform(rng, 1e-2, 4.0);
        const double ca = detail::uniform(rng, -1.0, 1.0);
        const auto kv = palpha_kernel(kp, t, SpacePoint::polar(d, rx), SpacePoint::polar(d, ry, ca));
        values.push_back(kv);
        pbar.push_back(pbar_kernel(d, t, rx, ry));
      }
      double C = 0.0;
      for (std::size_t i = 0; i < values.size(); ++i)
        if (pbar[i] > 0.0) C = std::max(C, (values[i].value - values[i].heat) / pbar[i]);
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto& kv = values[i];
        if (!std::isfinite(kv.value) || !(kv.value >= kv.heat)) ++violations;
        if (!(kv.value <= kv.heat + C * pbar[i])) ++violations;
      }
      if (!std::isfinite(C)) ++violations;
      fitted << " C(d=" << d << ",a=" << alpha << ")=" << detail::fmt(C);
    }
  }
  c.measured = violations;
  c.threshold = 0.0;
  c.passed = violations == 0;
  c.detail = "violations " + std::to_string(violations) + ";" + fitted.str();
  c.seconds = clock.seconds();
  return c;
}

// max (P^alpha - P)/P decreases along alpha = 1, 10, 100, 1000.
inline Check alpha_limits(std::uint64_t seed = 2) {
  detail::Stopwatch clock;
  Check c = named(2, "alpha limits");
  bool ok = true;
  std::ostringstream out;
  for (int d : {3, 2}) {
    const double threshold = d == 3 ? 1e-3 : 1e-2;
    std::vector<double> maxima;
    for (double alpha : {1.0, 10.0, 100.0, 1000.0}) {
      std::mt19937_64 rng(seed);
      const KernelParams kp{d, alpha};
      double m = 0.0;
      for (int i = 0; i < 1000; ++i) {
        const double t = detail::uniform(rng, 0.1, 2.0);
        const double rx = detail::uniform(rng, 0.5, 2.0);
        const double ry = detail::uniform(rng, 0.5, 2.0);
        const double ca = detail::uniform(rng, -1.0, 1.0);
        const auto kv = palpha_kernel(kp, t, SpacePoint::polar(d, rx), SpacePoint::polar(d, ry, ca));
        m = std::max(m, std::abs(kv.value - kv.heat) / kv.heat);
      }
      maxima.push_back(m);
    }
    for (std::size_t i = 1; i < maxima.size(); ++i) ok = ok && maxima[i] < maxima[i - 1];
    ok = ok && maxima.back() < threshold;
    out << " d=" << d << ":";
    for (double m : maxima) out << " " << detail::fmt(m);
    if (d == 3) c.measured = maxima.back();
  }
  c.threshold = 1e-3;
  c.passed = ok;
  c.detail = "max relative excess at alpha=1,10,100,1000" + out.str();
  c.seconds = clock.seconds();
  return c;
}

// Central-difference heat-equation residual relative to the kernel value.
inline Check heat_equation(std::uint64_t seed = 3) {
  detail::Stopwatch clock;
  Check c = named(3, "heat-equation residual");
  constexpr double kStep = 1e-3;
  double worst = 0.0;
  for (int d : {2, 3}) {
    for (double alpha : {-1.0, 0.0, 1.0}) {
      std::mt19937_64 rng(seed);
      const KernelParams kp{d, alpha};
      // For d = 3, alpha < 0 the kernel grows like exp(k R + k^2 t) with
      // k = 4 pi |alpha|; the stencil is shrunk to those length and time scales.
      const double k = d == 3 && alpha < 0.0 ? 4.0 * std::numbers::pi * -alpha : 1.0;
      const double hx = kStep / std::max(1.0, k);
      const double ht = kStep / std::max(1.0, k * k);
      for (int i = 0; i < 100; ++i) {
        const double t = detail::uniform(rng, 0.5, 1.0);
        const double rx = detail::uniform(rng, 0.5, 2.0);
        const double ry = detail::uniform(rng, 0.5, 2.0);
        const double ca = detail::uniform(rng, -1.0, 1.0);
        const double r = heat_residual(kp, t, SpacePoint::polar(d, rx), SpacePoint::polar(d, ry, ca), ht, hx);
        worst = std::max(worst, std::isfinite(r) ? std::abs(r) : INFINITY);
      }
    }
  }
  c.measured = worst;
  c.threshold = 1e-4;
  c.passed = worst < c.threshold;
  c.detail = "max |residual| over d in {2,3}, alpha in {-1,0,1}, base step " + detail::fmt(kStep);
  c.seconds = clock.seconds();
  return c;
}

// |a(a v 0)^b - b(b v 0)^b| <= (1+b)(|a|+|b|)^b |a-b| on random triples.
inline Check elementary(std::uint64_t seed = 10) {
  detail::Stopwatch clock;
  Check c = named(10, "elementary inequality");
  std::mt19937_64 rng(seed);
  int violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const double a = detail::uniform(rng, -10.0, 10.0);
    const double b = detail::uniform(rng, -10.0, 10.0);
    double beta = detail::uniform(rng, 0.0, 1.0);
    beta = beta == 0.0 ? 1.0 : beta;
    const auto e = elementary_bound(a, b, beta);
    if (!(e.lhs <= e.rhs)) ++violations;
  }
  c.measured = violations;
  c.passed = violations == 0;
  c.detail = "violations " + std::to_string(violations) + " of 10000";
  c.seconds = clock.seconds();
  return c;
}

// K0 against its integral representation, and the endpoint values of the
// normalised function against its limits 0 and 1.
inline Check special_functions() {
  detail::Stopwatch clock;
  Check c = named(11, "special functions");
  double worst = 0.0;
  quad::Options opt;
  opt.rel_tol = 1e-13;
  opt.abs_tol = 0.0;
  constexpr int kPoints = 61;
  const double lo = std::log(1e-4);
  const double hi = std::log(50.0);
  for (int i = 0; i < kPoints; ++i) {
    const double z = std::exp(lo + (hi - lo) * i / (kPoints - 1));
    // K0(z) = int_0^inf exp(-z cosh u) du, truncated where the integrand is below e^-750.
    const double upper = std::acosh(1.0 + 750.0 / z);
    const double oracle = quad::integrate([z](double u) { return std::exp(-z * std::cosh(u)); }, 0.0, upper, opt).value;
    worst = std::max(worst, std::abs(specfun::macdonald_k0(z) - oracle) / oracle);
  }
  const double at0 = specfun::k0_tilde(1e-6);
  const double at_inf = specfun::k0_tilde(50.0);
  const double limit_gap = std::max(std::abs(at0 - 0.0), std::abs(at_inf - 1.0));
  c.measured = worst;
  c.threshold = 1e-8;
  c.passed = worst < 1e-8 && limit_gap < 1e-3;
  c.detail = "K0 max relative error " + detail::fmt(worst) + "; K0~(1e-6) = " + detail::fmt(at0) +
             ", K0~(50) = " + detail::fmt(at_inf) + ", gap to limits " + detail::fmt(limit_gap) + " (tolerance 1e-3)";
  c.seconds = clock.seconds();
  return c;
}

namespace detail {

// Quantities gathered per reference configuration.
struct ConfigRun {
  int d = 0;
  double ck = 0.0;
  double ck_seconds = 0.0;
  bool picard_ok = false;
  int iterations = 0;
  double max_residual = 0.0;
  double init_gap = 0.0;
  double domination = 0.0;
  double negative = 0.0;
  double picard_seconds = 0.0;
  std::string picard_error;
  std::vector<double> trotter;
  double trotter_seconds = 0.0;
  double nondegeneracy = 0.0;
};

inline ConfigRun run_config(int d, const SuiteOptions& opt, bool solve) {
  ConfigRun out;
  out.d = d;
  const ModelParams mp = ModelParams::reference(d);
  const double rho = mp.rho_value();
  auto grid = RadialGrid::make(d, opt.grid);
  OperatorCache cache(grid, opt.threads);
  const FieldSample phi = FieldSample::sample(grid, TestFunction::gaussian(d, 1.0, 1.0, rho));
  const double phi_norm = h_norm(phi, rho);
  const KernelParams kp = mp.kernel();

  Stopwatch ck_clock;
  for (double s : {0.25, 0.5}) {
    for (double t : {0.25, 0.5}) {
      const FieldSample direct = apply_palpha(cache, kp, s + t, phi);
      const FieldSample composed = apply_palpha(cache, kp, s, apply_palpha(cache, kp, t, phi));
      out.ck = std::max(out.ck, h_distance(direct, composed, rho) / phi_norm);
    }
  }
  out.ck_seconds = ck_clock.seconds();
  cache.clear();
  if (!solve) return out;

  Stopwatch clock;
  SolverConfig sc = opt.solver;
  sc.T = 1.0;
  sc.threads = opt.threads;
  LogLaplaceSolver solver(mp, cache, sc);
  try {
    const Solution pic = solver.picard(phi, 1.0);
    out.iterations = pic.iterations;
    const auto res = solver.residual(pic, phi).second;
    out.max_residual = *std::max_element(res.begin(), res.end());
    const Solution alt = solver.picard(phi, 1.0, LogLaplaceSolver::Init::datum);
    for (std::size_t i = 0; i < pic.times.size(); ++i)
      out.init_gap = std::max(out.init_gap, h_distance(pic.values[i], alt.at(pic.times[i]), rho));
    const Solution flow = solver.flow(phi, 1.0);
    for (std::size_t i = 0; i < pic.times.size(); ++i) {
      const FieldSample s = flow.at(pic.times[i]);
      double scale = 0.0;
      for (double x : s.values) scale = std::max(scale, std::abs(x));
      for (std::size_t q = 0; q < s.size(); ++q) {
        out.domination = std::max(out.domination, (pic.values[i].values[q] - s.values[q]) / scale);
        out.negative = std::max(out.negative, -pic.values[i].values[q] / scale);
      }
    }
    out.picard_ok = true;
    out.picard_seconds = clock.seconds();

    Stopwatch tclock;
    const FieldSample v1 = pic.values.back();
    for (int n : {8, 16, 32, 64}) {
      const Solution tr = solver.trotter(phi, 1.0, n);
      out.trotter.push_back(h_distance(tr.values.back(), v1, rho) / phi_norm);
    }
    out.trotter_seconds = tclock.seconds();
    const FieldSample flowed = apply_palpha(cache, kp, 0.5, phi);
    out.nondegeneracy = h_distance(pic.at(0.5), flowed, rho) / phi_norm;
  } catch (const NonConvergenceError& e) {
    out.picard_error = e.what();
    out.picard_seconds = clock.seconds();
  }
  return out;
}

struct SimulationRun {
  Estimate laplace;
  double laplace_oracle = 0.0;
  Estimate mean;
  double mean_oracle = 0.0;
  double mean_literal = 0.0;
  Estimate mean_eta0;
  double mean_eta0_oracle = 0.0;
  double seconds = 0.0;
  double mean_particles = 0.0;
};

inline SimulationRun run_simulation(const SuiteOptions& opt) {
  Stopwatch clock;
  SimulationRun out;
  constexpr int d = 2;
  constexpr double t = 0.5;
  const SpacePoint x = SpacePoint::polar(d, 1.0);
  ModelParams mp = ModelParams::reference(d);
  auto grid = RadialGrid::make(d, opt.grid);
  OperatorCache cache(grid, opt.threads);
  const TestFunction phi = TestFunction::gaussian(d, 1.0, 1.0, mp.rho_value());
  const ParticleCloud mu = ParticleCloud::dirac(d, 1.0);
  SimConfig sc;
  sc.trotter_n = opt.trotter_n;
  sc.replicates = opt.replicates;
  sc.seed = opt.seed;
  sc.threads = opt.threads;
  const int n = sc.trotter_n;
  // The scheme flows by 1/n before the first branching, so its mean at t is
  // the flow over (1 + [tn])/n.
  const double shifted = (1.0 + std::floor(t * n + 1e-9)) / n;

  CloudPairing pairing(cache, mp.kernel(), phi);
  {
    PathSimulator sim(cache, mp, sc);
    const auto clouds = simulate_replicates(sim, mu, t);
    std::size_t total = 0;
    for (const auto& cl : clouds) total += cl.size();
    out.mean_particles = static_cast<double>(total) / clouds.size();
    out.laplace = estimate_laplace(clouds, pairing);
    out.mean = estimate_mean(clouds, pairing);
  }
  LogLaplaceSolver solver(mp, cache);
  const Solution tr = solver.trotter(FieldSample::sample(grid, phi), t, n);
  out.laplace_oracle = std::exp(-tr.values.back()(x.norm()));
  out.mean_oracle = apply_palpha_at(mp.kernel(), shifted, phi, x, *grid);
  out.mean_literal = apply_palpha_at(mp.kernel(), t, phi, x, *grid);

  mp.eta = 0.0;
  {
    SimConfig quiet = sc;
    quiet.replicates = std::min(sc.replicates, 100);
    PathSimulator sim(cache, mp, quiet);
    out.mean_eta0 = estimate_mean(simulate_replicates(sim, mu, t), pairing);
  }
  out.mean_eta0_oracle = out.mean_oracle;
  out.seconds = clock.seconds();
  return out;
}

// Agreement within 3 standard errors, with a floor for the deterministic case.
inline bool within(const Estimate& e, double oracle, double& z) {
  const double tol = 3.0 * e.se + 1e-6 * std::abs(oracle);
  z = e.se > 0.0 ? (e.mean - oracle) / e.se : 0.0;
  return std::abs(e.mean - oracle) <= tol;
}

}  // namespace detail

// Runs the selected checks; `on_check` sees each result as it completes.
inline std::vector<Check> run_suite(const SuiteOptions& opt, const std::function<void(const Check&)>& on_check = {}) {
  std::vector<Check> out;
  auto emit = [&](Check c) {
    if (on_check) on_check(c);
    out.push_back(std::move(c));
  };
  if (opt.wants(1)) emit(kernel_sandwich(opt.seed));
  if (opt.wants(2)) emit(alpha_limits(opt.seed + 1));
  if (opt.wants(3)) emit(heat_equation(opt.seed + 2));

  const bool need_solve = opt.wants(5) || opt.wants(6) || opt.wants(9);
  if (opt.wants(4) || need_solve) {
    std::vector<detail::ConfigRun> runs;
    for (int d : {3, 2}) runs.push_back(detail::run_config(d, opt, need_solve));
    if (opt.wants(4)) {
      Check c = named(4, "semigroup property");
      c.threshold = 1e-4;
      for (const auto& r : runs) {
        c.measured = std::max(c.measured, r.ck);
        c.detail += (c.detail.empty() ? "" : "; ") + std::string("d=") + std::to_string(r.d) + " " + detail::fmt(r.ck);
        c.seconds += r.ck_seconds;
      }
      c.passed = c.measured < c.threshold;
      emit(c);
    }
    if (opt.wants(5)) {
      Check c = named(5, "log-Laplace well-posedness");
      c.threshold = 1e-6;
      bool ok = true;
      for (const auto& r : runs) {
        std::string part = "d=" + std::to_string(r.d) + " ";
        if (!r.picard_ok) {
          ok = false;
          part += r.picard_error;
        } else {
          ok = ok && r.iterations <= 30 && r.max_residual < 1e-6 && r.init_gap < 1e-5 && r.domination <= 1e-10 &&
               r.negative <= 0.0;
          part += "iterations " + std::to_string(r.iterations) + ", residual " + detail::fmt(r.max_residual) +
                  ", init gap " + detail::fmt(r.init_gap) + ", domination excess " + detail::fmt(r.domination) +
                  ", negativity " + detail::fmt(r.negative);
        }
        c.measured = std::max(c.measured, r.max_residual);
        c.detail += (c.detail.empty() ? "" : "; ") + part;
        c.seconds += r.picard_seconds;
      }
      c.passed = ok;
      emit(c);
    }
    if (opt.wants(6)) {
      Check c = named(6, "Trotter convergence");
      c.threshold = 1e-3;
      bool ok = true;
      for (const auto& r : runs) {
        std::string part = "d=" + std::to_string(r.d) + " n=8..64:";
        if (r.trotter.size() != 4) {
          ok = false;
          part += " not run";
        } else {
          for (std::size_t i = 0; i < r.trotter.size(); ++i) {
            part += " " + detail::fmt(r.trotter[i]);
            if (i > 0) ok = ok && r.trotter[i] < r.trotter[i - 1];
          }
          ok = ok && r.trotter.back() < c.threshold;
          c.measured = std::max(c.measured, r.trotter.back());
        }
        c.detail += (c.detail.empty() ? "" : "; ") + part;
        c.seconds += r.trotter_seconds;
      }
      c.passed = ok;
      emit(c);
    }
    if (opt.wants(9)) {
      // The variance half is completed with the simulation below.
      const auto& r2 = runs.back();
      Check c = named(9, "non-degeneracy");
      c.measured = r2.nondegeneracy;
      c.threshold = 1e-3;
      c.passed = r2.picard_ok && c.measured > c.threshold;
      c.detail = "d=2 |v(1/2) - S(1/2)phi|/|phi| " + detail::fmt(c.measured);
      out.push_back(c);
    }
  }

  if (opt.wants(7) || opt.wants(8) || opt.wants(9)) {
    const auto sim = detail::run_simulation(opt);
    if (opt.wants(7)) {
      Check c = named(7, "duality");
      double z = 0.0;
      c.passed = detail::within(sim.laplace, sim.laplace_oracle, z);
      c.measured = z;
      c.threshold = 3.0;
      c.detail = "E exp(-<X,phi>) " + detail::fmt(sim.laplace.mean) + " +- " + detail::fmt(sim.laplace.se) +
                 ", exp(-v_n) " + detail::fmt(sim.laplace_oracle) + ", mean particles " +
                 detail::fmt(sim.mean_particles);
      c.seconds = sim.seconds;
      emit(c);
    }
    if (opt.wants(8)) {
      Check c = named(8, "expectation formula");
      double z1 = 0.0;
      double z0 = 0.0;
      const bool a = detail::within(sim.mean, sim.mean_oracle, z1);
      const bool b = detail::within(sim.mean_eta0, sim.mean_eta0_oracle, z0);
      const double literal_z = sim.mean.se > 0.0 ? (sim.mean.mean - sim.mean_literal) / sim.mean.se : 0.0;
      c.passed = a && b;
      c.measured = z1;
      c.threshold = 3.0;
      c.detail = "eta=1 mean " + detail::fmt(sim.mean.mean) + " +- " + detail::fmt(sim.mean.se) + " vs " +
                 detail::fmt(sim.mean_oracle) + "; eta=0 mean " + detail::fmt(sim.mean_eta0.mean) + " vs " +
                 detail::fmt(sim.mean_eta0_oracle) + " (gap " +
                 detail::fmt(std::abs(sim.mean_eta0.mean - sim.mean_eta0_oracle)) + "); z against S_t phi without the" +
                 " initial flow step " + detail::fmt(literal_z);
      emit(c);
    }
    if (opt.wants(9)) {
      auto it = std::find_if(out.begin(), out.end(), [](const Check& c) { return c.id == 9; });
      Check c = *it;
      out.erase(it);
      const double ratio = sim.mean.variance / sim.mean.variance_se;
      c.passed = c.passed && ratio > 10.0;
      c.detail += ", variance " + detail::fmt(sim.mean.variance) + " +- " + detail::fmt(sim.mean.variance_se) +
                  " (ratio " + detail::fmt(ratio) + ")";
      emit(c);
    }
  }
  if (opt.wants(10)) emit(elementary(opt.seed + 9));
  if (opt.wants(11)) emit(special_functions());
  std::sort(out.begin(), out.end(), [](const Check& a, const Check& b) { return a.id < b.id; });
  return out;
}

}  // namespace pointbirth::verify
