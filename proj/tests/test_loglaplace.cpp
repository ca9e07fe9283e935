#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "pointbirth/loglaplace.hpp"
#include "pointbirth/quadrature.hpp"

using namespace pointbirth;

namespace {

GridSpec small_grid() {
  GridSpec g;
  g.n = 128;
  return g;
}

SolverConfig small_solver() {
  SolverConfig c;
  c.T = 0.5;
  c.panels_per_unit = 16;
  c.start_levels = 10;
  c.picard_tol = 1e-8;
  return c;
}

double sup_distance(const Solution& a, const Solution& b, double rho) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, h_distance(a.values[i], b.values[i], rho));
  return m;
}

}  // namespace

TEST(Hypothesis, ReferenceModelsAreAdmissible) {
  for (int d : {2, 3}) {
    const auto p = ModelParams::reference(d);
    EXPECT_TRUE(validate_hypothesis(p).ok()) << validate_hypothesis(p).summary();
    EXPECT_GT(p.kappa(), 0.0);
    EXPECT_LT(p.kappa() + p.lambda(), 1.0);
  }
  const auto p2 = ModelParams::reference(2);
  EXPECT_DOUBLE_EQ(p2.kappa(), 0.5 - 3.0 / 8.0);
  EXPECT_DOUBLE_EQ(p2.lambda(), 0.25);
}

TEST(Hypothesis, Violations) {
  auto p = ModelParams::reference(3);
  p.beta = 1.0;
  p.rho = 1.5;
  const auto rep = validate_hypothesis(p);
  ASSERT_FALSE(rep.ok());
  EXPECT_NE(rep.summary().find("infinite variance"), std::string::npos);

  auto q = ModelParams::reference(2);
  q.rho = 3.5;
  EXPECT_NE(validate_hypothesis(q).summary().find("must be below"), std::string::npos);
  q.rho = 1.4;
  EXPECT_NE(validate_hypothesis(q).summary().find("must exceed"), std::string::npos);
  q = ModelParams::reference(2);
  q.beta = 0.0;
  EXPECT_FALSE(validate_hypothesis(q).ok());
  q = ModelParams::reference(2);
  q.eta = -1.0;
  EXPECT_FALSE(validate_hypothesis(q).ok());
  q.d = 4;
  EXPECT_FALSE(validate_hypothesis(q).ok());

  OperatorCache cache(RadialGrid::make(3, small_grid()));
  EXPECT_THROW(LogLaplaceSolver(p, cache), ConfigError);
  EXPECT_THROW(LogLaplaceSolver(ModelParams::reference(2), cache), ConfigError);
}

TEST(CsbStep, ClosedFormValues) {
  EXPECT_DOUBLE_EQ(csb_step(1.0, 1.0, 1.0, 1.0), 0.5);
  EXPECT_NEAR(csb_step(1.0, 1.0, 1.0, 0.5), 4.0 / 9.0, 1e-15);
  EXPECT_EQ(csb_step(2.5, 3.0, 0.0, 0.5), 2.5);
  EXPECT_EQ(csb_step(0.0, 3.0, 1.0, 0.5), 0.0);
  EXPECT_THROW(csb_step(-1.0, 1.0, 1.0, 1.0), DomainError);
}

TEST(CsbStep, SolvesTheOde) {
  // v' = -eta v^{1+beta}: a fine RK4 integration is the oracle.
  const double eta = 0.7, beta = 0.4, v0 = 2.0, T = 1.3;
  auto rhs = [&](double v) { return -eta * std::pow(v, 1.0 + beta); };
  double v = v0;
  const int steps = 20000;
  const double h = T / steps;
  for (int i = 0; i < steps; ++i) {
    const double k1 = rhs(v), k2 = rhs(v + 0.5 * h * k1), k3 = rhs(v + 0.5 * h * k2), k4 = rhs(v + h * k3);
    v += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  EXPECT_NEAR(csb_step(v0, T, eta, beta), v, 1e-12);
  // Semigroup in time.
  EXPECT_NEAR(csb_step(csb_step(v0, 0.4, eta, beta), 0.9, eta, beta), csb_step(v0, 1.3, eta, beta), 1e-14);
}

TEST(ElementaryBound, HoldsOnExamplesAndRandomTriples) {
  const auto e = elementary_bound(1.0, 2.0, 1.0);
  EXPECT_DOUBLE_EQ(e.lhs, 3.0);
  EXPECT_DOUBLE_EQ(e.rhs, 6.0);
  const auto neg = elementary_bound(-1.0, 2.0, 0.5);
  EXPECT_NEAR(neg.lhs, 2.0 * std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(neg.rhs, 1.5 * std::sqrt(3.0) * 3.0, 1e-14);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-5.0, 5.0), b(0.01, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const auto r = elementary_bound(u(rng), u(rng), b(rng));
    EXPECT_LE(r.lhs, r.rhs * (1.0 + 1e-12));
  }
}

TEST(IIntegral, ClosedFormAgainstQuadrature) {
  const double kappa = 0.25, lambda = 0.25;
  EXPECT_NEAR(i_integral(1.0, kappa, lambda), 4.0 / 3.0 + specfun::beta_function(0.75, 0.75), 1e-14);
  // I(t) = int_0^t s^{-lambda} (1 + (t-s)^{-kappa}) ds, split at t/2 with w = u^4 near each endpoint.
  for (double t : {0.3, 1.0, 2.5}) {
    auto half = [&](double p, bool left) {
      auto g = [&](double u) {
        const double w = std::pow(u, 4.0);
        const double s = left ? w : t - w;
        return 4.0 * u * u * u * std::pow(s, -lambda) * (1.0 + std::pow(t - s, -kappa));
      };
      quad::Options o;
      o.rel_tol = 1e-13;
      return quad::integrate(g, 0.0, std::pow(p, 0.25), o).value;
    };
    const double oracle = half(0.5 * t, true) + half(0.5 * t, false);
    EXPECT_NEAR(i_integral(t, kappa, lambda), oracle, 1e-10 * oracle) << "t = " << t;
  }
  double prev = 0.0;
  for (double t = 0.1; t < 3.0; t += 0.1) {
    const double v = i_integral(t, 0.3, 0.2);
    EXPECT_GT(v, prev);
    prev = v;
  }
  EXPECT_EQ(i_integral(0.0, 0.3, 0.2), 0.0);
  EXPECT_THROW(i_integral(1.0, 0.6, 0.5), DomainError);
}

TEST(TimeMesh, GeometricStartAndUniformPanels) {
  const auto m = TimeMesh::make(1.0, 8, 4, 2.0);
  EXPECT_EQ(m.t.front(), 0.0);
  EXPECT_DOUBLE_EQ(m.back(), 1.0);
  for (std::size_t i = 1; i < m.size(); ++i) EXPECT_GT(m.t[i], m.t[i - 1]);
  EXPECT_NEAR(m.t[m.size() - 1] - m.t[m.size() - 2], 0.125, 1e-15);
}

class SolverTest : public ::testing::TestWithParam<int> {};

TEST_P(SolverTest, TrotterWithoutBranchingIsTheShiftedFlow) {
  const int d = GetParam();
  auto model = ModelParams::reference(d);
  model.eta = 0.0;
  OperatorCache cache(RadialGrid::make(d, small_grid()));
  LogLaplaceSolver solver(model, cache, small_solver());
  const FieldSample phi = FieldSample::sample(cache.grid(), TestFunction::gaussian(d));
  const int n = 8;
  const Solution tr = solver.trotter(phi, 0.5, n);
  const double rho = model.rho_value();
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    const FieldSample exact = apply_palpha(cache, model.kernel(), (k + 1.0) / n, phi);
    EXPECT_LT(h_distance(tr.values[k], exact, rho), 1e-5 * h_norm(phi, rho)) << "k = " << k;
  }
}

TEST_P(SolverTest, TrotterSingleStepComposesFlowAndBranching) {
  const int d = GetParam();
  const auto model = ModelParams::reference(d);
  OperatorCache cache(RadialGrid::make(d, small_grid()));
  LogLaplaceSolver solver(model, cache, small_solver());
  const FieldSample phi = FieldSample::sample(cache.grid(), TestFunction::gaussian(d));
  const Solution tr = solver.trotter(phi, 1.0, 1);
  const FlowMatrix& s = cache.palpha(model.alpha, 1.0);
  FieldSample v = s.apply(phi);
  for (double& x : v.values) x = csb_step(std::max(x, 0.0), 1.0, model.eta, model.beta);
  v = s.apply(v);
  ASSERT_EQ(tr.values.size(), 2u);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(tr.values[1].values[i], std::max(v.values[i], 0.0), 1e-14);
  EXPECT_THROW(solver.trotter(phi, 1.0, 0), DomainError);
}

TEST_P(SolverTest, LinearizedWithConstantPotentialIsDamping) {
  const int d = GetParam();
  const auto model = ModelParams::reference(d);
  OperatorCache cache(RadialGrid::make(d, small_grid()));
  LogLaplaceSolver solver(model, cache, small_solver());
  const FieldSample phi = FieldSample::sample(cache.grid(), TestFunction::gaussian(d));
  const double rho = model.rho_value();
  const Solution flow = solver.flow(phi, 0.5);
  const Solution none = solver.linearized(phi, 0.5, [&](double) { return FieldSample::zeros(cache.grid()); });
  EXPECT_LT(sup_distance(flow, none, rho), 1e-12 * h_norm(phi, rho));
  const double c = 0.8;
  std::vector<double> cv(cache.grid()->size(), c);
  const Solution damped = solver.linearized(phi, 0.5, [&](double) { return FieldSample(cache.grid(), cv, 0.0); });
  double worst = 0.0;
  for (std::size_t i = 0; i < flow.times.size(); ++i)
    worst = std::max(worst, h_distance(damped.values[i], std::exp(-c * flow.times[i]) * flow.values[i], rho));
  EXPECT_LT(worst, 1e-4 * h_norm(phi, rho));
}

TEST_P(SolverTest, LinearizedAgreesWithOnePicardStep) {
  const int d = GetParam();
  const auto model = ModelParams::reference(d);
  OperatorCache cache(RadialGrid::make(d, small_grid()));
  LogLaplaceSolver solver(model, cache, small_solver());
  const FieldSample phi = FieldSample::sample(cache.grid(), TestFunction::gaussian(d));
  const double rho = model.rho_value();
  const Solution flow = solver.flow(phi, 0.5);
  const Solution step = solver.picard_step(phi, flow);
  const Solution lin = solver.linearized(phi, 0.5, [&](double t) {
    FieldSample p = flow.at(t);
    for (double& x : p.values) x = model.eta * std::pow(std::max(x, 0.0), model.beta);
    return p;
  });
  EXPECT_LT(sup_distance(step, lin, rho), 1e-4 * h_norm(phi, rho));
  Solution off = flow;
  off.times[1] *= 1.5;
  EXPECT_THROW(solver.picard_step(phi, off), DomainError);
}

TEST_P(SolverTest, PicardWithoutBranchingIsTheFlow) {
  const int d = GetParam();
  auto model = ModelParams::reference(d);
  model.eta = 0.0;
  OperatorCache cache(RadialGrid::make(d, small_grid()));
  LogLaplaceSolver solver(model, cache, small_solver());
  const FieldSample phi = FieldSample::sample(cache.grid(), TestFunction::gaussian(d));
  const double rho = model.rho_value();
  EXPECT_LT(sup_distance(solver.picard(phi, 0.5), solver.flow(phi, 0.5), rho), 1e-10 * h_norm(phi, rho));
}

TEST_P(SolverTest, PicardSolutionBelowFlowAndIndependentOfStart) {
  const int d = GetParam();
  const auto model = ModelParams::reference(d);
  OperatorCache cache(RadialGrid::make(d, small_grid()));
  const SolverConfig cfg = small_solver();
  LogLaplaceSolver solver(model, cache, cfg);
  const FieldSample phi = FieldSample::sample(cache.grid(), TestFunction::gaussian(d));
  const double rho = model.rho_value();
  const Solution v = solver.picard(phi, 0.5);
  const Solution flow = solver.flow(phi, 0.5);
  ASSERT_EQ(v.times.size(), flow.times.size());
  for (std::size_t i = 1; i < v.times.size(); ++i)
    for (std::size_t q = 0; q < phi.size(); ++q) {
      EXPECT_GE(v.values[i].values[q], 0.0);
      EXPECT_LE(v.values[i].values[q], flow.values[i].values[q] * (1.0 + 1e-9));
    }
  EXPECT_LT(v.values.back().values[0], flow.values.back().values[0]);
  const Solution z = solver.picard(phi, 0.5, LogLaplaceSolver::Init::zero);
  const Solution s = solver.picard(phi, 0.5, LogLaplaceSolver::Init::datum);
  EXPECT_LT(sup_distance(v, z, rho), 10.0 * cfg.picard_tol);
  EXPECT_LT(sup_distance(v, s, rho), 10.0 * cfg.picard_tol);
}

TEST_P(SolverTest, ResidualOfPicardWithMatchingRule) {
  const int d = GetParam();
  const auto model = ModelParams::reference(d);
  OperatorCache cache(RadialGrid::make(d, small_grid()));
  SolverConfig cfg = small_solver();
  cfg.independent_residual = false;
  LogLaplaceSolver solver(model, cache, cfg);
  const FieldSample phi = FieldSample::sample(cache.grid(), TestFunction::gaussian(d));
  Solution v = solver.picard(phi, 0.5);
  solver.attach_residuals(v, phi);
  ASSERT_EQ(v.residuals.size(), v.times.size());
  EXPECT_EQ(v.residuals[0], 0.0);
  for (double r : v.residuals) EXPECT_LE(r, 5.0 * cfg.picard_tol);
}

TEST_P(SolverTest, TrotterResidualShrinksWithLevel) {
  const int d = GetParam();
  const auto model = ModelParams::reference(d);
  OperatorCache cache(RadialGrid::make(d, small_grid()));
  LogLaplaceSolver solver(model, cache, small_solver());
  const FieldSample phi = FieldSample::sample(cache.grid(), TestFunction::gaussian(d));
  const double rho = model.rho_value();
  const Solution v = solver.picard(phi, 0.5);
  double prev = INFINITY;
  for (int n : {4, 16, 64}) {
    const auto [t, res] = solver.residual(solver.trotter(phi, 0.5, n), phi);
    const double gap = h_distance(solver.trotter(phi, 0.5, n).values.back(), v.values.back(), rho);
    EXPECT_LT(res.back(), prev) << "n = " << n;
    EXPECT_LT(gap, 2.0 * h_norm(phi, rho) / n) << "n = " << n;
    prev = res.back();
  }
}

INSTANTIATE_TEST_SUITE_P(Dimensions, SolverTest, ::testing::Values(2, 3));
