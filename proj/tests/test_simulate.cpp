#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "pointbirth/simulate.hpp"

using namespace pointbirth;

namespace {

GridSpec small_grid() {
  GridSpec g;
  g.n = 128;
  return g;
}

// Estimate of E[f(X)] over n independent draws.
template <class Draw>
Estimate monte_carlo(std::size_t n, Draw&& draw) {
  std::vector<double> xs(n);
  for (auto& x : xs) x = draw();
  return estimate_from(xs);
}

}  // namespace

TEST(Estimate, SampleMoments) {
  const Estimate e = estimate_from({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(e.mean, 2.5);
  EXPECT_DOUBLE_EQ(e.variance, 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(e.se, std::sqrt(5.0 / 12.0));
  EXPECT_EQ(e.count, 4u);
  const Estimate one = estimate_from({7.0});
  EXPECT_EQ(one.mean, 7.0);
  EXPECT_EQ(one.se, 0.0);
  EXPECT_EQ(estimate_from({}).count, 0u);
}

TEST(ReplicateRng, StreamsAreReproducibleAndDistinct) {
  auto a = replicate_rng(5, 3), b = replicate_rng(5, 3), c = replicate_rng(5, 4), e = replicate_rng(6, 3);
  const auto x = a();
  EXPECT_EQ(x, b());
  EXPECT_NE(x, c());
  EXPECT_NE(x, e());
}

TEST(JumpLaw, ExponentialAtBetaOne) {
  const JumpLaw law(1.0);
  for (double y : {0.1, 1.0, 5.0}) {
    EXPECT_DOUBLE_EQ(law.cdf(y), 1.0 - std::exp(-y));
    EXPECT_NEAR(law.quantile(law.cdf(y)), y, 1e-12 * y);
  }
  EXPECT_DOUBLE_EQ(law.transform(2.0), 1.0 / 3.0);
  EXPECT_THROW(JumpLaw(1.5), DomainError);
  EXPECT_THROW(JumpLaw(0.0), DomainError);
}

TEST(JumpLaw, TabulatedLawMatchesItsTransform) {
  for (double beta : {0.3, 0.5, 0.8}) {
    const JumpLaw law(beta);
    EXPECT_LT(law.validation_error(), 1e-5) << "beta = " << beta;
    for (double y : {1e-3, 0.1, 1.0, 10.0, 1e3}) {
      EXPECT_NEAR(law.cdf(y) + law.survival(y), 1.0, 1e-9);
      EXPECT_NEAR(law.quantile(law.cdf(y)), y, 3e-5 * y) << "beta = " << beta << " y = " << y;
    }
    double prev = 0.0;
    for (double y = 0.01; y < 100.0; y *= 1.5) {
      const double c = law.cdf(y);
      EXPECT_GT(c, prev);
      prev = c;
    }
    // Laplace transform from the table by quadrature and by sampling.
    std::mt19937_64 rng(21);
    for (double s : {0.1, 1.0, 10.0}) {
      const double exact = law.transform(s);
      EXPECT_NEAR(law.expect([s](double g) { return std::exp(-s * g); }), exact, 1e-6);
      const Estimate mc = monte_carlo(50000, [&] { return std::exp(-s * law.sample(rng)); });
      EXPECT_NEAR(mc.mean, exact, 4.0 * mc.se) << "beta = " << beta << " s = " << s;
    }
  }
}

TEST(CsbSample, DegenerateCases) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(csb_sample(2.0, 0.5, 0.0, 0.5, rng), 2.0);
  EXPECT_EQ(csb_sample(0.0, 0.5, 1.0, 0.5, rng), 0.0);
  EXPECT_EQ(csb_sample(2.0, 0.0, 1.0, 0.5, rng), 2.0);
  EXPECT_THROW(csb_sample(-1.0, 0.5, 1.0, 0.5, rng), DomainError);
}

TEST(CsbSample, LaplaceTransformAndExtinction) {
  std::mt19937_64 rng(3);
  const double mass = 1.5, delta = 0.25, eta = 1.2;
  for (double beta : {0.5, 1.0}) {
    const JumpLaw law(beta);
    std::vector<double> zs(40000);
    for (auto& z : zs) z = csb_sample(mass, delta, eta, law, rng);
    for (double lambda : {0.3, 2.0}) {
      std::vector<double> xs;
      for (double z : zs) xs.push_back(std::exp(-lambda * z));
      const Estimate e = estimate_from(xs);
      const double exact = std::exp(-mass * csb_step(lambda, delta, eta, beta));
      EXPECT_NEAR(e.mean, exact, 4.0 * e.se) << "beta = " << beta << " lambda = " << lambda;
    }
    std::vector<double> dead;
    for (double z : zs) dead.push_back(z == 0.0 ? 1.0 : 0.0);
    const Estimate p = estimate_from(dead);
    const double exact = std::exp(-mass / std::pow(eta * beta * delta, 1.0 / beta));
    EXPECT_NEAR(p.mean, exact, 4.0 * p.se + 1e-12) << "beta = " << beta;
  }
  // Finite variance at beta = 1: the mean is preserved.
  const Estimate m = monte_carlo(40000, [&] { return csb_sample(mass, delta, eta, 1.0, rng); });
  EXPECT_NEAR(m.mean, mass, 4.0 * m.se);
  EXPECT_NEAR(m.variance, 2.0 * eta * delta * mass, 4.0 * m.variance_se);
}

TEST(FlowSampler, HeatMoveVariance) {
  for (int d : {2, 3}) {
    OperatorCache cache(RadialGrid::make(d, small_grid()));
    const double delta = 0.125;
    const FlowSampler sampler(cache, {d, 0.0}, delta);
    std::mt19937_64 rng(8);
    const SpacePoint x = SpacePoint::polar(d, 1.0);
    const Estimate e = monte_carlo(40000, [&] {
      const SpacePoint y = sampler.heat_move(x, rng);
      double s = 0.0;
      for (int i = 0; i < d; ++i) s += (y.coords[i] - x.coords[i]) * (y.coords[i] - x.coords[i]);
      return s;
    });
    EXPECT_NEAR(e.mean, 2.0 * d * delta, 4.0 * e.se) << "d = " << d;
  }
}

TEST(FlowSampler, WeightedMoveReproducesTheFlow) {
  for (int d : {2, 3}) {
    OperatorCache cache(RadialGrid::make(d, small_grid()));
    const KernelParams kp{d, 0.0};
    const double delta = 0.25;
    const FlowSampler sampler(cache, kp, delta);
    const TestFunction phi = TestFunction::gaussian(d);
    const double r = 0.7;
    const double exact = apply_palpha(cache, kp, delta, phi)(r);
    std::mt19937_64 rng(9);
    const SpacePoint x = SpacePoint::polar(d, r);
    const Estimate e = monte_carlo(40000, [&] {
      const auto [y, total] = sampler.move(x, rng);
      return total * phi(y);
    });
    EXPECT_NEAR(e.mean, exact, 4.0 * e.se + 1e-5 * exact) << "d = " << d;
    double correction = 0.0;
    for (double v : sampler.row(r)) correction += v;
    EXPECT_NEAR(1.0 + correction, palpha_total_mass(kp, delta, r), 1e-3) << "d = " << d;
  }
}

TEST(ParticleCloud, DiracAndEmptyClouds) {
  EXPECT_TRUE(ParticleCloud::dirac(2, 1.0, 0.0).particles.empty());
  EXPECT_THROW(ParticleCloud::dirac(2, 0.0), DomainError);
  const auto c = ParticleCloud::dirac(3, 2.0, 1.5);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_DOUBLE_EQ(c.particles[0].x.norm(), 2.0);
  EXPECT_DOUBLE_EQ(c.atom_mass(), 1.5);

  OperatorCache cache(RadialGrid::make(2, small_grid()));
  CloudPairing pairing(cache, {2, 0.0}, TestFunction::gaussian(2));
  const std::vector<ParticleCloud> empty(5, ParticleCloud::dirac(2, 1.0, 0.0));
  EXPECT_EQ(pairing(empty[0]), 0.0);
  const Estimate e = estimate_laplace(empty, pairing);
  EXPECT_EQ(e.mean, 1.0);
  EXPECT_EQ(e.se, 0.0);
}

TEST(FlowStep, DropsMasslessParticles) {
  OperatorCache cache(RadialGrid::make(2, small_grid()));
  const FlowSampler sampler(cache, {2, 0.0}, 0.25);
  ParticleCloud c = ParticleCloud::dirac(2, 1.0);
  c.particles.push_back({SpacePoint::polar(2, 0.5), 0.0});
  std::mt19937_64 rng(2);
  const ParticleCloud out = flow_step(c, sampler, rng);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_GE(out.particles[0].mass, 1.0);
}

TEST(PathSimulator, NoBranchingIsDeterministicFlow) {
  auto model = ModelParams::reference(3);
  model.eta = 0.0;
  OperatorCache cache(RadialGrid::make(3, small_grid()));
  SimConfig cfg;
  cfg.trotter_n = 8;
  cfg.replicates = 3;
  const PathSimulator sim(cache, model, cfg);
  const TestFunction phi = TestFunction::gaussian(3);
  CloudPairing pairing(cache, model.kernel(), phi);
  const auto clouds = simulate_replicates(sim, ParticleCloud::dirac(3, 1.0), 0.5);
  const double exact = apply_palpha(cache, model.kernel(), 5.0 / 8.0, phi)(1.0);
  for (const auto& c : clouds) {
    EXPECT_DOUBLE_EQ(c.pending, 5.0 / 8.0);
    EXPECT_NEAR(pairing(c), exact, 1e-12);
  }
  EXPECT_EQ(estimate_mean(clouds, pairing).se, 0.0);
}

TEST(PathSimulator, RejectsBadInput) {
  OperatorCache cache(RadialGrid::make(3, small_grid()));
  auto model = ModelParams::reference(3);
  model.beta = 1.0;
  EXPECT_THROW(PathSimulator(cache, model, SimConfig{}), ConfigError);
  const PathSimulator sim(cache, ModelParams::reference(3), SimConfig{});
  std::mt19937_64 rng(1);
  EXPECT_THROW(sim.run(ParticleCloud::dirac(3, 1.0), -1.0, rng), DomainError);
}

TEST(PathSimulator, SameSeedSamePath) {
  OperatorCache cache(RadialGrid::make(2, small_grid()));
  SimConfig cfg;
  cfg.trotter_n = 8;
  const PathSimulator sim(cache, ModelParams::reference(2), cfg);
  auto r1 = replicate_rng(7, 2), r2 = replicate_rng(7, 2);
  const auto a = sim.run(ParticleCloud::dirac(2, 1.0), 0.5, r1);
  const auto b = sim.run(ParticleCloud::dirac(2, 1.0), 0.5, r2);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.particles[i].mass, b.particles[i].mass);
    EXPECT_EQ(a.particles[i].x.coords, b.particles[i].x.coords);
  }
}

TEST(PathSimulator, LaplaceFunctionalMatchesTrotterScheme) {
  for (int d : {2, 3}) {
    const auto model = ModelParams::reference(d);
    OperatorCache cache(RadialGrid::make(d, small_grid()));
    SimConfig cfg;
    cfg.trotter_n = 4;
    cfg.replicates = 4000;
    cfg.seed = 17;
    const PathSimulator sim(cache, model, cfg);
    const TestFunction phi = TestFunction::gaussian(d);
    CloudPairing pairing(cache, model.kernel(), phi);
    const double r = 1.0;
    const auto clouds = simulate_replicates(sim, ParticleCloud::dirac(d, r), 0.5);
    const Estimate e = estimate_laplace(clouds, pairing);
    SolverConfig sc;
    LogLaplaceSolver solver(model, cache, sc);
    const Solution tr = solver.trotter(FieldSample::sample(cache.grid(), phi), 0.5, 4);
    const double oracle = std::exp(-tr.values.back()(r));
    EXPECT_NEAR(e.mean, oracle, 3.0 * e.se + 1e-6) << "d = " << d;
    EXPECT_GT(e.se, 0.0);
  }
}

TEST(PathSimulator, CriticalBranchingPreservesMeanMass) {
  const auto model = ModelParams::reference(2);
  OperatorCache cache(RadialGrid::make(2, small_grid()));
  SimConfig cfg;
  cfg.trotter_n = 4;
  cfg.replicates = 4000;
  cfg.seed = 5;
  const PathSimulator sim(cache, model, cfg);
  CloudPairing pairing(cache, model.kernel(), TestFunction::gaussian(2));
  const auto clouds = simulate_replicates(sim, ParticleCloud::dirac(2, 1.0), 0.5);
  std::vector<double> mass;
  for (const auto& c : clouds) mass.push_back(pairing.total_mass(c));
  const Estimate e = estimate_from(mass);
  const double exact = palpha_total_mass(model.kernel(), 0.75, 1.0);
  EXPECT_NEAR(e.mean, exact, 3.0 * e.se + 1e-3 * exact);
  const Estimate m = estimate_mean(clouds, pairing);
  const double flow = apply_palpha(cache, model.kernel(), 0.75, TestFunction::gaussian(2))(1.0);
  EXPECT_NEAR(m.mean, flow, 3.0 * m.se + 1e-6 * flow);
}
