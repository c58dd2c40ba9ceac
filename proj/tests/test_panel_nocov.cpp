#include <cmath>

#include <gtest/gtest.h>

#include "idid/bootstrap.hpp"
#include "idid/panel_nocov.hpp"
#include "idid/simulation.hpp"
#include "oracles.hpp"

using namespace idid;

namespace {

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an idid::Error";
  return ErrorCode::InvalidArgument;
}

PanelDataset rows(std::initializer_list<std::array<double, 5>> r) {
  std::vector<PanelObservation> obs;
  for (const auto& a : r) obs.push_back({a[0], {}, a[1], a[2], a[3], a[4]});
  return PanelDataset::from_observations(obs);
}

PanelDataset relabel_z(const PanelDataset& p) {
  return PanelDataset(Vec::Ones(p.n()) - p.z(), p.x(), p.d0(), p.y0(), p.d1(), p.y1());
}

double nearest(const std::vector<double>& roots, double v) {
  double best = roots.front();
  for (double r : roots)
    if (std::abs(r - v) < std::abs(best - v)) best = r;
  return best;
}

}  // namespace

// Columns: z, d0, y0, d1, y1.
TEST(Wald, WorkedExample) {
  const auto p = rows({{1, 0, 0, 1, 2}, {1, 0, 0, 1, 2}, {0, 0, 0, 1, 1}, {0, 0, 0, 0, 1}});
  const auto e = wald_additive(p);
  EXPECT_DOUBLE_EQ(e.beta_hat, 2.0);
  EXPECT_EQ(e.method, "wald");
}

TEST(Wald, WeakInstrument) {
  const auto p = rows({{1, 0, 0, 1, 2}, {1, 0, 1, 0, 2}, {0, 0, 0, 1, 1}, {0, 0, 3, 0, 1}});
  EXPECT_EQ(code_of([&] { wald_additive(p); }), ErrorCode::WeakInstrument);
}

// Setting 1 has identically distributed outcomes at both times, so the
// additive trend effect is 0 as well.
TEST(Wald, NullEffectLargeSample) {
  const auto p = generate(1, 100000, 77);
  const auto e = wald_additive(p);
  EXPECT_LT(std::abs(e.beta_hat), 3.0 * e.se);
  EXPECT_GT(e.se, 0.0);
}

TEST(Wald, Invariances) {
  const auto p = generate(1, 3000, 3);
  const auto base = wald_additive(p);
  EXPECT_NEAR(wald_additive(relabel_z(p)).beta_hat, base.beta_hat, 1e-12);
  EXPECT_NEAR(wald_additive(p.with_outcomes(p.y0() * 3.5, p.y1() * 3.5)).beta_hat, 3.5 * base.beta_hat, 1e-12);
  const Vec shift = Vec::Constant(p.n(), 7.0);
  EXPECT_NEAR(wald_additive(p.with_outcomes(p.y0() + shift, p.y1() + shift)).beta_hat, base.beta_hat, 1e-12);
}

TEST(Quadratic, ZeroEffectConstantVanishes) {
  // Only the Z=1 arm is treated at time 1; untreated outcomes move in parallel.
  const auto p = rows({{1, 0, 1, 1, 2}, {1, 0, 1, 1, 2}, {0, 0, 1, 0, 2}, {0, 0, 1, 0, 2}});
  const auto q = quadratic_coefficients(p);
  EXPECT_DOUBLE_EQ(q.c0, 0.0);
  const auto e = solve_multiplicative_nocov(p);
  EXPECT_NEAR(*e.theta_hat, 0.0, 1e-14);
  EXPECT_NEAR(e.beta_hat, 0.0, 1e-14);
}

TEST(Quadratic, AllZeroOutcomesDegenerate) {
  const auto p = rows({{1, 0, 0, 1, 0}, {1, 1, 0, 0, 0}, {0, 1, 0, 1, 0}, {0, 0, 0, 0, 0}});
  const auto q = quadratic_coefficients(p);
  EXPECT_TRUE(q.degenerate());
  EXPECT_EQ(code_of([&] { solve_multiplicative_nocov(p); }), ErrorCode::DegenerateQuadratic);
}

TEST(Quadratic, EmptyStratum) {
  const auto p = rows({{1, 0, 0, 1, 0}, {1, 1, 0, 0, 0}});
  EXPECT_EQ(code_of([&] { quadratic_coefficients(p); }), ErrorCode::EmptyStratum);
}

TEST(Quadratic, ComplexRootsHaveNoAdmissibleRoot) {
  QuadraticCoefficients q;
  q.c2 = 1.0;
  q.c1 = 0.0;
  q.c0 = 1.0;
  EXPECT_TRUE(quadratic_roots(q).admissible.empty());
  EXPECT_EQ(code_of([&] { choose_root(quadratic_roots(q).admissible, std::nullopt); }), ErrorCode::NoAdmissibleRoot);
}

TEST(Quadratic, CoefficientsMatchRawSums) {
  const auto p = generate(2, 10000, 13);
  const auto f0 = oracle::cell_means(p, 0.0), f1 = oracle::cell_means(p, 1.0);
  auto ed = [&](int t, int z) { return f1[t][z] - f0[t][z]; };
  const double c2 = ed(1, 1) * ed(0, 0) - ed(1, 0) * ed(0, 1);
  const double c1 = f0[1][1] * ed(0, 0) + ed(1, 1) * f0[0][0] - f0[1][0] * ed(0, 1) - ed(1, 0) * f0[0][1];
  const double c0 = f0[1][1] * f0[0][0] - f0[1][0] * f0[0][1];
  const auto q = quadratic_coefficients(p);
  EXPECT_NEAR(q.c2, c2, 1e-12 * std::abs(c2));
  EXPECT_NEAR(q.c1, c1, 1e-12 * std::abs(c1));
  EXPECT_NEAR(q.c0, c0, 1e-12 * std::abs(c0));
}

TEST(Quadratic, AgreesWithBruteForceRoot) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto p = generate(1, 10000, seed);
    const auto e = solve_multiplicative_nocov(p);
    const auto roots = oracle::brute_force_roots(p);
    ASSERT_FALSE(roots.empty());
    EXPECT_NEAR(*e.theta_hat, nearest(roots, *e.theta_hat), 1e-8);
    const double scale = std::abs(oracle::cell_means(p, *e.theta_hat)[1][1] * oracle::cell_means(p, *e.theta_hat)[0][0]);
    EXPECT_LE(std::abs(e.diagnostics["residual"].get<double>()), 1e-10 * scale);
  }
}

TEST(Quadratic, OutcomeScalingLeavesThetaUnchanged) {
  const auto p = generate(1, 5000, 9);
  const auto a = solve_multiplicative_nocov(p);
  const auto b = solve_multiplicative_nocov(p.with_outcomes(p.y0() * 4.0, p.y1() * 4.0));
  EXPECT_NEAR(*a.theta_hat, *b.theta_hat, 1e-12);
}

TEST(Quadratic, DeltaMethodSeIsPositiveAndCiContainsEstimate) {
  const auto e = solve_multiplicative_nocov(generate(2, 5000, 4));
  EXPECT_GT(e.se, 0.0);
  EXPECT_LT(e.ci_lo, e.beta_hat);
  EXPECT_GT(e.ci_hi, e.beta_hat);
  EXPECT_NEAR(e.ci_hi - e.ci_lo, 2.0 * 1.959963984540054 * e.se, 1e-10);
}

TEST(Bootstrap, ConstantEstimatorHasZeroSe) {
  const auto p = generate(1, 200, 1);
  const auto r = bootstrap_ci(p, [](const PanelDataset&) { return 1.5; }, 100, 3, 0.95);
  EXPECT_EQ(r.se, 0.0);
  EXPECT_EQ(r.ci_lo, 1.5);
  EXPECT_EQ(r.ci_hi, 1.5);
  EXPECT_EQ(code_of([&] { bootstrap_ci(p, [](const PanelDataset&) { return 1.0; }, 10, 3, 0.95); }),
            ErrorCode::InvalidArgument);
}

TEST(Bootstrap, DeterministicAndJobIndependent) {
  const auto p = generate(1, 2000, 8);
  auto est = [](const PanelDataset& b) { return solve_multiplicative_nocov(b).beta_hat; };
  const auto a = bootstrap_ci(p, est, 500, 21, 0.95, 1);
  const auto b = bootstrap_ci(p, est, 500, 21, 0.95, 1);
  const auto c = bootstrap_ci(p, est, 500, 21, 0.95, 3);
  EXPECT_EQ(a.se, b.se);
  EXPECT_EQ(a.ci_lo, b.ci_lo);
  EXPECT_EQ(a.draws, c.draws);
}

TEST(Bootstrap, AgreesWithDeltaMethod) {
  const auto p = generate(1, 5000, 5);
  const auto e = solve_multiplicative_nocov(p);
  const auto b = solve_multiplicative_nocov(p, 0.95, VarianceOptions{500, 17, 1});
  EXPECT_NEAR(b.se / e.se, 1.0, 0.15);
  EXPECT_EQ(b.diagnostics["variance_method"], "bootstrap");
}

TEST(Bootstrap, TooManyFailures) {
  const auto p = generate(1, 500, 2);
  int calls = 0;
  auto flaky = [&](const PanelDataset&) -> double {
    if (++calls % 3 == 0) throw Error(ErrorCode::NoRoot, "synthetic failure");
    return 0.0;
  };
  EXPECT_EQ(code_of([&] { bootstrap_ci(p, flaky, 60, 1, 0.95); }), ErrorCode::TooManyFailures);
}
