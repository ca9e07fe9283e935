#pragma once

// Weighted branching particles for the level-n splitting scheme.
//
// A cloud of atoms nu with a pending flow time s represents the measure
// S^alpha_s nu. Continuous state branching of a diffuse measure X over a time
// delta is a Poisson cluster: with c = (eta beta delta)^{-1/beta}, atoms are
// placed at Poisson(c |X|) iid points drawn from X/|X|, each carrying an iid
// jump of the branching law. Sampling the atoms of S^alpha_delta nu this way
// reproduces the law of the scheme exactly; the pairing at the end uses the
// flowed test function, so no final displacement noise enters.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <vector>

#include "pointbirth/errors.hpp"
#include "pointbirth/field.hpp"
#include "pointbirth/kernel.hpp"
#include "pointbirth/loglaplace.hpp"
#include "pointbirth/parallel.hpp"
#include "pointbirth/quadrature.hpp"

namespace pointbirth {

struct Particle {
  SpacePoint x;
  double mass = 0.0;
};

struct ParticleCloud {
  int d = 2;
  double time = 0.0;
  // The represented measure is S^alpha_pending applied to the atoms.
  double pending = 0.0;
  std::vector<Particle> particles;

  std::size_t size() const { return particles.size(); }
  double atom_mass() const {
    double s = 0.0;
    for (const auto& p : particles) s += p.mass;
    return s;
  }

  static ParticleCloud dirac(int d, double r, double mass = 1.0) {
    if (!(r > 0.0)) throw DomainError("ParticleCloud: atoms must sit off the origin");
    ParticleCloud c;
    c.d = d;
    if (mass > 0.0) c.particles.push_back({SpacePoint::polar(d, r), mass});
    return c;
  }
};

struct SimConfig {
  int trotter_n = 32;
  int replicates = 10000;
  std::uint64_t seed = 1;
  std::size_t particle_cap = 1000000;
  // Atoms heavier than this are split in equal parts; 0 selects 4 times the
  // initial mass per atom.
  double split_threshold = 0.0;
  bool splitting = true;
  // Start with the flow S_{1/n} before the first branching interval.
  bool flow_first = true;
  int threads = 0;

  void validate() const {
    if (trotter_n < 1) throw ConfigError("sim: trotter_n must be at least 1");
    if (replicates < 1) throw ConfigError("sim: replicates must be at least 1");
    if (particle_cap < 1) throw ConfigError("sim: particle_cap must be at least 1");
    if (!(split_threshold >= 0.0)) throw ConfigError("sim: split_threshold must be nonnegative");
  }
};

struct Estimate {
  double mean = 0.0;
  double se = 0.0;
  std::size_t count = 0;
  // Sample variance and the standard error of that variance.
  double variance = 0.0;
  double variance_se = 0.0;
};

inline Estimate estimate_from(const std::vector<double>& xs) {
  Estimate e;
  e.count = xs.size();
  if (xs.empty()) return e;
  double m = 0.0;
  for (double x : xs) m += x;
  m /= xs.size();
  e.mean = m;
  if (xs.size() < 2) return e;
  double m2 = 0.0;
  double m4 = 0.0;
  for (double x : xs) {
    const double c = (x - m) * (x - m);
    m2 += c;
    m4 += c * c;
  }
  const double n = static_cast<double>(xs.size());
  e.variance = m2 / (n - 1.0);
  e.se = std::sqrt(e.variance / n);
  m2 /= n;
  m4 /= n;
  e.variance_se = std::sqrt(std::max(0.0, m4 - m2 * m2) / n);
  return e;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::size_t poisson(double mean, std::mt19937_64& rng) {
  if (!(mean > 0.0)) return 0;
  return std::poisson_distribution<std::size_t>(mean)(rng);
}

inline SpacePoint random_direction(int d, double r, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  SpacePoint p;
  p.dim = d;
  double s = 0.0;
  while (!(s > 0.0)) {
    s = 0.0;
    for (int i = 0; i < d; ++i) {
      p.coords[i] = g(rng);
      s += p.coords[i] * p.coords[i];
    }
  }
  s = r / std::sqrt(s);
  for (int i = 0; i < d; ++i) p.coords[i] *= s;
  return p;
}

inline std::complex<double> clog1p(std::complex<double> w) {
  if (std::abs(w) > 1e-2) return std::log(1.0 + w);
  std::complex<double> term = w;
  std::complex<double> sum = 0.0;
  for (int k = 1; k <= 10; ++k) {
    sum += term / static_cast<double>(k);
    term *= -w;
  }
  return sum;
}

inline std::complex<double> cexpm1(std::complex<double> z) {
  if (std::abs(z) > 1e-2) return std::exp(z) - 1.0;
  std::complex<double> term = z;
  std::complex<double> sum = 0.0;
  for (int k = 1; k <= 10; ++k) {
    sum += term;
    term *= z / static_cast<double>(k + 1);
  }
  return sum;
}

}  // namespace detail

// Independent stream for replicate i.
inline std::mt19937_64 replicate_rng(std::uint64_t seed, std::uint64_t replicate) {
  return std::mt19937_64(detail::splitmix64(detail::splitmix64(seed) ^ detail::splitmix64(replicate + 1)));
}

// Jump law of continuous state branching with index 1 + beta. Its Laplace
// transform is 1 - u_delta(lambda)/c with u_delta = csb_step(lambda, ...), the
// law of a^{1/beta} G with a = eta beta delta and
//   E e^{-s G} = 1 - s (1 + s^beta)^{-1/beta},   P(G > y) <-> (1 + s^beta)^{-1/beta}.
// beta = 1 gives G ~ Exp(1). Otherwise G is drawn from a quantile table built
// by Talbot inversion. Knots are log-spaced in y between P(G <= y) = 1e-10 and
// P(G > y) = 1e-14, the tails beyond are the exact power laws, and the table
// is rescaled to mean 1 so that the branching stays critical.
class JumpLaw {
 public:
  static constexpr int kKnots = 4096;

  explicit JumpLaw(double beta) : beta_(beta) {
    if (!(beta > 0.0 && beta <= 1.0)) throw DomainError("JumpLaw: beta must lie in (0, 1]");
    if (beta < 1.0) build();
  }

  double beta() const { return beta_; }

  double transform(double s) const {
    if (s == 0.0) return 1.0;
    return 1.0 - s * std::pow(1.0 + std::pow(s, beta_), -1.0 / beta_);
  }

  // P(G <= y) and P(G > y).
  double cdf(double y) const {
    if (!(y > 0.0)) return 0.0;
    if (beta_ == 1.0) return -std::expm1(-y);
    // 1 - (1 + w)^{-1/beta} with w = s^{-beta}, without cancellation for small w.
    return talbot(y, [&](std::complex<double> s) {
      const std::complex<double> w = std::pow(s, -beta_);
      return -detail::cexpm1(-detail::clog1p(w) / beta_) / s;
    });
  }
  double survival(double y) const {
    if (!(y > 0.0)) return 1.0;
    if (beta_ == 1.0) return std::exp(-y);
    return talbot(y, [&](std::complex<double> s) { return std::pow(1.0 + std::pow(s, beta_), -1.0 / beta_); });
  }

  // Quantile function of G.
  double quantile(double u) const {
    if (beta_ == 1.0) return -std::log1p(-u);
    const double w = std::log(u) - std::log1p(-u);
    if (w <= w_.front()) return y_.front() * std::pow(u / u_lo_, 1.0 / beta_);
    if (w >= w_.back()) return y_.back() * std::pow(s_hi_ / (1.0 - u), 1.0 / (1.0 + beta_));
    const std::size_t k = std::upper_bound(w_.begin(), w_.end(), w) - w_.begin() - 1;
    const double f = (w - w_[k]) / (w_[k + 1] - w_[k]);
    return std::exp((1.0 - f) * std::log(y_[k]) + f * std::log(y_[k + 1]));
  }

  double sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    double u = uni(rng);
    while (!(u > 0.0)) u = uni(rng);
    return quantile(u);
  }

  // E[h(G)] for the tabulated law, by Gauss-Legendre in the logit of u
  // between knots and in the power-law variable on the tails.
  template <class H>
  double expect(H&& h) const {
    static const quad::Rule gl = quad::gauss_legendre(8);
    double sum = 0.0;
    for (std::size_t k = 0; k + 1 < w_.size(); ++k) {
      const double len = w_[k + 1] - w_[k];
      for (std::size_t q = 0; q < gl.nodes.size(); ++q) {
        const double w = w_[k] + len * gl.nodes[q];
        const double u = 1.0 / (1.0 + std::exp(-w));
        sum += len * gl.weights[q] * u * (1.0 - u) * h(quantile(u));
      }
    }
    // Lower tail u = u_lo x, upper tail 1 - u = s_hi x, x in (0, 1), with x = v^m
    // to smooth the endpoint behaviour.
    constexpr int m = 4;
    static const quad::Rule tail = quad::gauss_legendre(64);
    for (std::size_t q = 0; q < tail.nodes.size(); ++q) {
      const double v = tail.nodes[q];
      const double x = std::pow(v, m);
      const double dx = tail.weights[q] * m * std::pow(v, m - 1);
      sum += u_lo_ * dx * h(quantile(u_lo_ * x));
      sum += s_hi_ * dx * h(y_.back() * std::pow(1.0 / x, 1.0 / (1.0 + beta_)));
    }
    return sum;
  }

  double validation_error() const { return validation_error_; }

 private:
  template <class F>
  static double talbot(double y, F&& F_) {
    constexpr int M = 32;
    using C = std::complex<double>;
    const double r = 2.0 * M / (5.0 * y);
    double sum = 0.5 * std::exp(r * y) * F_(C(r, 0.0)).real();
    for (int k = 1; k < M; ++k) {
      const double th = k * std::numbers::pi / M;
      const double cot = 1.0 / std::tan(th);
      const C s(r * th * cot, r * th);
      const double sigma = th + (th * cot - 1.0) * cot;
      sum += (std::exp(s * y) * F_(s) * C(1.0, sigma)).real();
    }
    return sum * r / M;
  }

  void build() {
    constexpr double kLow = 1e-10;
    constexpr double kHigh = 1e-14;
    double lo = 1e-3;
    while (cdf(lo) > kLow) {
      lo *= 0.1;
      if (lo < 1e-250) throw NonConvergenceError("JumpLaw: lower tail out of range", cdf(lo));
    }
    double hi = 1e2;
    while (survival(hi) > kHigh) {
      hi *= 10.0;
      if (hi > 1e250) throw NonConvergenceError("JumpLaw: upper tail out of range", survival(hi));
    }
    const double llo = std::log(lo);
    const double lhi = std::log(hi);
    for (int k = 0; k < kKnots; ++k) {
      const double y = std::exp(llo + (lhi - llo) * k / (kKnots - 1));
      const double F = cdf(y);
      double w;
      if (F < 0.5) {
        w = std::log(F) - std::log1p(-F);
      } else {
        const double S = survival(y);
        w = std::log1p(-S) - std::log(S);
      }
      if (!std::isfinite(w) || (!w_.empty() && !(w > w_.back())))
        throw NonConvergenceError("JumpLaw: inverted distribution is not increasing", y);
      y_.push_back(y);
      w_.push_back(w);
    }
    u_lo_ = 1.0 / (1.0 + std::exp(-w_.front()));
    s_hi_ = 1.0 / (1.0 + std::exp(w_.back()));
    const double mean = expect([](double y) { return y; });
    if (std::abs(mean - 1.0) > 1e-2) throw NonConvergenceError("JumpLaw: table mean differs from 1", mean);
    for (double& y : y_) y /= mean;
    double worst = 0.0;
    for (int i = 0; i < 16; ++i) {
      const double s = std::pow(10.0, -6.0 + 9.0 * i / 15.0);
      const double acc = expect([s](double y) { return -std::expm1(-s * y); });
      const double exact = 1.0 - transform(s);
      worst = std::max(worst, std::abs(acc - exact) / exact);
    }
    if (worst > 1e-3) throw NonConvergenceError("JumpLaw: quantile table misses the Laplace transform", worst);
    validation_error_ = worst;
  }

  double beta_;
  std::vector<double> y_;
  std::vector<double> w_;
  double u_lo_ = 0.0;
  double s_hi_ = 0.0;
  double validation_error_ = 0.0;
};

// Total mass after branching over delta from mass z: compound Poisson with
// rate c z and jumps a^{1/beta} G.
inline double csb_sample(double mass, double delta, double eta, const JumpLaw& law, std::mt19937_64& rng) {
  if (!(mass >= 0.0)) throw DomainError("csb_sample: mass must be nonnegative");
  if (!(delta >= 0.0)) throw DomainError("csb_sample: delta must be nonnegative");
  if (eta == 0.0 || mass == 0.0 || delta == 0.0) return mass;
  const double beta = law.beta();
  const double scale = std::pow(eta * beta * delta, 1.0 / beta);
  const std::size_t N = detail::poisson(mass / scale, rng);
  if (N == 0) return 0.0;
  if (beta == 1.0) return scale * std::gamma_distribution<double>(static_cast<double>(N), 1.0)(rng);
  double s = 0.0;
  for (std::size_t i = 0; i < N; ++i) s += law.sample(rng);
  return scale * s;
}

inline double csb_sample(double mass, double delta, double eta, double beta, std::mt19937_64& rng) {
  return csb_sample(mass, delta, eta, JumpLaw(beta), rng);
}

// Draws from the normalized kernel P^alpha(delta; x, .) for one delta. The heat
// part is a Gaussian step; the correction part lives on the grid nodes with
// the same quadrature weights as the flow matrices, so the sampled measure is
// the one the grid solver propagates.
class FlowSampler {
 public:
  FlowSampler(OperatorCache& cache, const KernelParams& params, double delta)
      : grid_(cache.grid()), params_(params), delta_(delta), q_(params, delta) {
    if (params.d != grid_->d) throw DomainError("FlowSampler: dimension mismatch");
    const FlowMatrix& m = cache.correction(params.alpha, delta);
    const std::size_t n = grid_->size();
    cum_.assign(n * n, 0.0);
    mass_.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        s += std::max(0.0, m(i, j));
        cum_[i * n + j] = s;
      }
      mass_[i] = s;
    }
    area_ = sphere_area(grid_->d);
  }

  double delta() const { return delta_; }
  const GridPtr& grid() const { return grid_; }
  // Correction mass at each grid node.
  const std::vector<double>& correction_mass() const { return mass_; }
  // Thinning ratios above one, which are clamped.
  std::size_t envelope_misses() const { return misses_; }

  SpacePoint heat_move(const SpacePoint& x, std::mt19937_64& rng) const {
    std::normal_distribution<double> g(0.0, std::sqrt(2.0 * delta_));
    for (;;) {
      SpacePoint y = x;
      for (int i = 0; i < x.dim; ++i) y.coords[i] += g(rng);
      if (y.norm() > 0.0) return y;
    }
  }

  // Correction density of x at node j, per unit of the node's quadrature mass.
  double node_density(double rx, std::size_t j) const {
    return std::max(0.0, q_(std::max(rx, grid_->r_min()), grid_->nodes[j])) * area_ * grid_->weights[j];
  }

  // Exact correction row of a radius: node masses and their sum.
  std::vector<double> row(double rx) const {
    std::vector<double> out(grid_->size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = node_density(rx, j);
    return out;
  }

  // Radii of the correction-part points of a Poisson process with intensity
  // `rate` times the correction measure of x: proposal from the two bracketing
  // node rows, thinned to the exact row.
  void correction_points(double rx, double rate, std::mt19937_64& rng, std::vector<double>& out) const {
    out.clear();
    const std::size_t n = grid_->size();
    if (rx >= grid_->r_max()) return;
    std::size_t a = std::upper_bound(grid_->nodes.begin(), grid_->nodes.end(), rx) - grid_->nodes.begin();
    a = a == 0 ? 0 : std::min(a - 1, n - 2);
    const std::size_t b = a + 1;
    const double env = kEnvelope * (mass_[a] + mass_[b]);
    const std::size_t N = detail::poisson(rate * env, rng);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (std::size_t k = 0; k < N; ++k) {
      const std::size_t row_index = uni(rng) * (mass_[a] + mass_[b]) < mass_[a] ? a : b;
      const double* c = &cum_[row_index * n];
      const double target = uni(rng) * mass_[row_index];
      std::size_t j = std::upper_bound(c, c + n, target) - c;
      j = std::min(j, n - 1);
      const double proposal = kEnvelope * (cum_at(a, j) + cum_at(b, j));
      const double ratio = node_density(rx, j) / proposal;
      if (ratio > 1.0) ++misses_;
      if (uni(rng) < ratio) out.push_back(grid_->nodes[j]);
    }
  }

  // One weighted move: new position and the total mass m^alpha(delta, x).
  std::pair<SpacePoint, double> move(const SpacePoint& x, std::mt19937_64& rng) const {
    const double rx = x.norm();
    std::vector<double> r;
    double q = 0.0;
    if (rx < grid_->r_max()) {
      r = cached_row(rx);
      for (double v : r) q += v;
    }
    const double total = 1.0 + q;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    if (uni(rng) * total < 1.0) return {heat_move(x, rng), total};
    double target = uni(rng) * q;
    std::size_t j = 0;
    for (; j + 1 < r.size() && target >= r[j]; ++j) target -= r[j];
    return {detail::random_direction(x.dim, grid_->nodes[j], rng), total};
  }

 private:
  static constexpr double kEnvelope = 1.25;

  double cum_at(std::size_t i, std::size_t j) const {
    const std::size_t n = grid_->size();
    return cum_[i * n + j] - (j == 0 ? 0.0 : cum_[i * n + j - 1]);
  }

  std::vector<double> cached_row(double rx) const {
    std::lock_guard<std::mutex> lock(row_mutex_);
    auto it = rows_.find(rx);
    if (it != rows_.end()) return it->second;
    if (rows_.size() > 64) rows_.clear();
    return rows_.emplace(rx, row(rx)).first->second;
  }

  GridPtr grid_;
  KernelParams params_;
  double delta_;
  CorrectionEvaluator q_;
  double area_ = 0.0;
  std::vector<double> cum_;
  std::vector<double> mass_;
  mutable std::size_t misses_ = 0;
  mutable std::mutex row_mutex_;
  mutable std::map<double, std::vector<double>> rows_;
};

// Moves every atom once by the normalized kernel and multiplies its mass by
// m^alpha(delta, x). Zero-mass atoms are dropped.
inline ParticleCloud flow_step(const ParticleCloud& cloud, const FlowSampler& sampler, std::mt19937_64& rng) {
  ParticleCloud out;
  out.d = cloud.d;
  out.time = cloud.time;
  for (const auto& p : cloud.particles) {
    if (!(p.mass > 0.0)) continue;
    const auto [y, total] = sampler.move(p.x, rng);
    out.particles.push_back({y, p.mass * total});
  }
  return out;
}

// Branching over delta of the measure S^alpha_delta(atoms), as a cluster
// sample. The result has no pending flow.
inline ParticleCloud branch_flowed(const ParticleCloud& cloud, const FlowSampler& sampler, double eta,
                                   const JumpLaw& law, std::mt19937_64& rng) {
  const double delta = sampler.delta();
  const double beta = law.beta();
  const double scale = std::pow(eta * beta * delta, 1.0 / beta);
  ParticleCloud out;
  out.d = cloud.d;
  out.time = cloud.time;
  std::vector<double> radii;
  std::exponential_distribution<double> expo(1.0);
  auto jump = [&] { return scale * (beta == 1.0 ? expo(rng) : law.sample(rng)); };
  for (const auto& p : cloud.particles) {
    const double rate = p.mass / scale;
    const std::size_t nh = detail::poisson(rate, rng);
    for (std::size_t k = 0; k < nh; ++k) out.particles.push_back({sampler.heat_move(p.x, rng), jump()});
    sampler.correction_points(p.x.norm(), rate, rng, radii);
    for (double r : radii) out.particles.push_back({detail::random_direction(cloud.d, r, rng), jump()});
  }
  return out;
}

// Branching of the atoms themselves (no pending flow): each atom keeps its place.
inline ParticleCloud branch_atoms(const ParticleCloud& cloud, double delta, double eta, const JumpLaw& law,
                                  std::mt19937_64& rng) {
  ParticleCloud out;
  out.d = cloud.d;
  out.time = cloud.time;
  for (const auto& p : cloud.particles) {
    const double m = csb_sample(p.mass, delta, eta, law, rng);
    if (m > 0.0) out.particles.push_back({p.x, m});
  }
  return out;
}

inline void split_heavy(ParticleCloud& cloud, double threshold) {
  if (!(threshold > 0.0)) return;
  std::vector<Particle> out;
  out.reserve(cloud.particles.size());
  for (const auto& p : cloud.particles) {
    if (p.mass <= threshold) {
      out.push_back(p);
      continue;
    }
    const auto k = static_cast<std::size_t>(std::ceil(p.mass / threshold));
    for (std::size_t i = 0; i < k; ++i) out.push_back({p.x, p.mass / k});
  }
  cloud.particles = std::move(out);
}

// Shared per-run state: the sampler for delta = 1/n and the jump law.
class PathSimulator {
 public:
  PathSimulator(OperatorCache& cache, const ModelParams& params, const SimConfig& config)
      : params_(params),
        config_(config),
        law_(params.beta),
        sampler_(cache, params.kernel(), 1.0 / config.trotter_n) {
    config.validate();
    const auto rep = validate_hypothesis(params);
    if (!rep.ok()) throw ConfigError("hypothesis violated: " + rep.summary());
  }

  const FlowSampler& sampler() const { return sampler_; }
  const JumpLaw& law() const { return law_; }
  const SimConfig& config() const { return config_; }

  // Cloud at time t (rounded down to the scheme grid k/n). `on_slice` sees the
  // cloud at every k/n.
  ParticleCloud run(const ParticleCloud& mu0, double t, std::mt19937_64& rng,
                    const std::function<void(const ParticleCloud&)>& on_slice = {}) const {
    if (t < 0.0) throw DomainError("simulate_path: t must be nonnegative");
    const int n = config_.trotter_n;
    const double delta = 1.0 / n;
    const int steps = static_cast<int>(std::floor(t * n + 1e-9));
    double threshold = config_.split_threshold;
    if (threshold == 0.0 && !mu0.particles.empty()) threshold = 4.0 * mu0.atom_mass() / mu0.size();
    for (const auto& p : mu0.particles)
      if (!(p.x.norm() > 0.0)) throw DomainError("simulate_path: atoms must sit off the origin");
    ParticleCloud cloud = mu0;
    cloud.time = 0.0;
    cloud.pending = config_.flow_first ? delta : 0.0;
    if (on_slice) on_slice(cloud);
    for (int k = 1; k <= steps; ++k) {
      if (params_.eta > 0.0) {
        if (cloud.pending > 0.0) {
          cloud = branch_flowed(cloud, sampler_, params_.eta, law_, rng);
        } else {
          cloud = branch_atoms(cloud, delta, params_.eta, law_, rng);
        }
        cloud.pending = delta;
      } else {
        cloud.pending += delta;
      }
      if (config_.splitting) split_heavy(cloud, threshold);
      cloud.time = k * delta;
      if (cloud.size() > config_.particle_cap)
        throw ParticleCapError("simulate_path: particle cap exceeded at t = " + std::to_string(cloud.time),
                               cloud.size());
      if (on_slice) on_slice(cloud);
    }
    return cloud;
  }

 private:
  ModelParams params_;
  SimConfig config_;
  JumpLaw law_;
  FlowSampler sampler_;
};

inline ParticleCloud simulate_path(OperatorCache& cache, const ParticleCloud& mu0, double t,
                                   const ModelParams& params, const SimConfig& config, std::mt19937_64& rng) {
  return PathSimulator(cache, params, config).run(mu0, t, rng);
}

// Runs independent replicates; replicate i uses replicate_rng(seed, i).
inline std::vector<ParticleCloud> simulate_replicates(const PathSimulator& sim, const ParticleCloud& mu0, double t) {
  const auto& cfg = sim.config();
  std::vector<ParticleCloud> out(cfg.replicates);
  parallel_for(out.size(), resolve_threads(cfg.threads), [&](std::size_t i) {
    auto rng = replicate_rng(cfg.seed, i);
    out[i] = sim.run(mu0, t, rng);
  });
  return out;
}

// Pairs clouds with a radial test function, flowing it by each cloud's
// pending time on the grid. Safe to share between threads.
class CloudPairing {
 public:
  CloudPairing(OperatorCache& cache, const KernelParams& params, TestFunction phi)
      : cache_(cache), params_(params), phi_(std::move(phi)) {}

  double operator()(const ParticleCloud& cloud) {
    if (cloud.particles.empty()) return 0.0;
    if (cloud.pending == 0.0) {
      double s = 0.0;
      for (const auto& p : cloud.particles) s += p.mass * phi_(p.x);
      return s;
    }
    const FieldSample& f = flowed(cloud.pending);
    double s = 0.0;
    for (const auto& p : cloud.particles) s += p.mass * f(p.x.norm());
    return s;
  }

  // Total mass of the represented measure.
  double total_mass(const ParticleCloud& cloud) {
    if (cloud.pending == 0.0) return cloud.atom_mass();
    const FieldSample& m = mass_field(cloud.pending);
    double s = 0.0;
    for (const auto& p : cloud.particles) {
      const double r = p.x.norm();
      s += p.mass * (1.0 + (r > cache_.grid()->r_max() ? 0.0 : m(r)));
    }
    return s;
  }

  const FieldSample& flowed(double t) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = flowed_.find(t);
    if (it != flowed_.end()) return it->second;
    FieldSample f = apply_palpha(cache_, params_, t, phi_);
    return flowed_.emplace(t, std::move(f)).first->second;
  }

 private:
  const FieldSample& mass_field(double t) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = mass_.find(t);
    if (it != mass_.end()) return it->second;
    FieldSample m(cache_.grid(), cache_.correction(params_.alpha, t).row_sums(), 0.0);
    return mass_.emplace(t, std::move(m)).first->second;
  }

  OperatorCache& cache_;
  KernelParams params_;
  TestFunction phi_;
  std::map<double, FieldSample> flowed_;
  std::map<double, FieldSample> mass_;
  std::mutex mutex_;
};

// Replicate mean and error of exp(-<X_t, phi>).
inline Estimate estimate_laplace(const std::vector<ParticleCloud>& clouds, CloudPairing& pairing) {
  std::vector<double> xs;
  xs.reserve(clouds.size());
  for (const auto& c : clouds) xs.push_back(std::exp(-pairing(c)));
  return estimate_from(xs);
}

// Replicate mean and error of <X_t, phi>.
inline Estimate estimate_mean(const std::vector<ParticleCloud>& clouds, CloudPairing& pairing) {
  std::vector<double> xs;
  xs.reserve(clouds.size());
  for (const auto& c : clouds) xs.push_back(pairing(c));
  return estimate_from(xs);
}

}  // namespace pointbirth
