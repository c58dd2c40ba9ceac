#include <cmath>

#include <gtest/gtest.h>

#include "idid/panel_nocov.hpp"
#include "idid/repeated_cs.hpp"
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

// Columns: t, z, d, y.
RcsDataset rows(std::initializer_list<std::array<double, 4>> r) {
  std::vector<RcsObservation> obs;
  for (const auto& a : r) obs.push_back({a[1], {}, a[0], a[2], a[3]});
  return RcsDataset::from_observations(obs);
}

// P(T = 1 | Z) from cell counts.
Vec empirical_pT(const RcsDataset& r) {
  double n[2] = {0, 0}, t1[2] = {0, 0};
  for (Index i = 0; i < r.n(); ++i) {
    const int z = r.z()[i] > 0.5;
    n[z] += 1.0;
    t1[z] += r.t()[i];
  }
  Vec p(r.n());
  for (Index i = 0; i < r.n(); ++i) p[i] = t1[r.z()[i] > 0.5] / n[r.z()[i] > 0.5];
  return p;
}

const MSpec kInterceptOnly{Basis{"1"}, {}};
const MomentSpec kOneZ{Basis{"1", "z"}};

}  // namespace

TEST(RcsNocov, ZeroEffectCells) {
  // Cell means E(Y|T,Z): (1,1) 2, (0,1) 1, (1,0) 2, (0,0) 1; exposure only at T=1, Z=1.
  const auto r = rows({{1, 1, 1, 2}, {1, 1, 1, 2}, {0, 1, 0, 1}, {1, 0, 0, 2}, {0, 0, 0, 1}});
  const auto e = solve_rcs_nocov(r);
  EXPECT_NEAR(e.beta_hat, 0.0, 1e-14);
  EXPECT_EQ(e.diagnostics["design"], "rcs");
}

// With D identically 0 the ratio equation holds for every beta; the quadratic
// is identically zero and reported as degenerate rather than returning 0.
TEST(RcsNocov, NoExposureIsDegenerate) {
  const auto r = rows({{1, 1, 0, 2}, {0, 1, 0, 1}, {1, 0, 0, 2}, {0, 0, 0, 1}});
  EXPECT_EQ(code_of([&] { solve_rcs_nocov(r); }), ErrorCode::DegenerateQuadratic);
}

TEST(RcsNocov, EmptyCell) {
  const auto r = rows({{1, 1, 1, 2}, {0, 1, 0, 1}, {1, 0, 0, 2}, {1, 0, 1, 1}});
  EXPECT_EQ(code_of([&] { solve_rcs_nocov(r); }), ErrorCode::EmptyCell);
}

TEST(RcsNocov, AgreesWithBruteForceRoot) {
  const auto r = panel_to_rcs(generate(2, 20000, 6), 0.5, 7);
  const auto e = solve_rcs_nocov(r);
  const auto roots = oracle::brute_force_roots(r);
  ASSERT_FALSE(roots.empty());
  double best = roots.front();
  for (double v : roots)
    if (std::abs(v - *e.theta_hat) < std::abs(best - *e.theta_hat)) best = v;
  EXPECT_NEAR(*e.theta_hat, best, 1e-8);
}

TEST(RcsNocov, PlantedTruthIsCovered) {
  PlantedTable table;
  const auto r = generate_rcs_planted(PublishedMarginals{}, -1.27, 1656, 15234, 2024, &table);
  EXPECT_NEAR(table.ratio_residual(-1.27), 0.0, 1e-12);
  const auto e = solve_rcs_nocov(r);
  EXPECT_LT(std::abs(e.beta_hat + 1.27), 3.0 * e.se);
}

TEST(RcsNocov, OutcomeScalingInvariance) {
  const auto r = panel_to_rcs(generate(1, 8000, 3), 0.4, 3);
  const auto a = solve_rcs_nocov(r);
  const auto b = solve_rcs_nocov(r.with_outcomes(r.y() * 2.5));
  EXPECT_NEAR(a.beta_hat, b.beta_hat, 1e-12);
}

TEST(RcsNocov, BootstrapIsDeterministic) {
  const auto r = panel_to_rcs(generate(1, 3000, 3), 0.5, 3);
  const auto a = solve_rcs_nocov(r, 0.95, VarianceOptions{100, 9, 1});
  const auto b = solve_rcs_nocov(r, 0.95, VarianceOptions{100, 9, 2});
  EXPECT_EQ(a.se, b.se);
  EXPECT_EQ(a.diagnostics["variance_method"], "bootstrap");
}

// Paired and pooled analyses of the same subjects estimate the same beta when
// the period is assigned independently of everything else.
TEST(RcsNocov, AgreesWithPanelUnderRandomPeriods) {
  const auto p = generate(1, 40000, 11);
  const auto pe = solve_multiplicative_nocov(p);
  const auto re = solve_rcs_nocov(panel_to_rcs(p, 0.5, 12));
  EXPECT_LT(std::abs(pe.beta_hat - re.beta_hat), 3.0 * std::hypot(pe.se, re.se));
}

TEST(PiResidual, WorkedCases) {
  PiResidualContext ctx{Vec::Zero(1), MSpec{Basis{"1"}, Vec::Zero(1)}, 0.5};
  EXPECT_DOUBLE_EQ(residual_pi({1, {}, 1, 1, 3}, ctx), 6.0);
  EXPECT_DOUBLE_EQ(residual_pi({1, {}, 0, 1, 3}, ctx), -6.0);
  ctx.beta[0] = std::log(3.0);
  EXPECT_NEAR(residual_pi({1, {}, 1, 1, 3}, ctx), 2.0, 1e-14);
}

TEST(RcsParam, EmpiricalPropensityMatchesQuadratic) {
  for (int setting : {1, 2}) {
    const auto r = panel_to_rcs(generate(setting, 20000, 40 + setting), 0.45, 5);
    const auto q = solve_rcs_nocov(r);
    RcsParamOptions opt;
    opt.pT_override = empirical_pT(r);
    const auto e = estimate_rcs_param(r, kInterceptOnly, kOneZ, opt);
    EXPECT_NEAR(e.beta_hat, q.beta_hat, 1e-8) << "setting " << setting;
    // A logistic fit on (1, Z) reproduces the cell frequencies.
    const auto s = estimate_rcs_param(r, kInterceptOnly, kOneZ, RcsParamOptions{});
    EXPECT_NEAR(s.beta_hat, q.beta_hat, 1e-8) << "setting " << setting;
  }
}

TEST(RcsParam, PiMomentCertificate) {
  const auto r = panel_to_rcs(generate(3, 20000, 8), 0.5, 9);
  const auto e = estimate_rcs_param(r, MSpec{Basis{"1", "x1", "sin(x1)"}, {}},
                                    MomentSpec{Basis{"1", "x1", "z", "sin(x1)"}});
  EXPECT_LE(e.diagnostics["moment_residual"].get<double>(), 1e-8);
  EXPECT_GT(e.se, 0.0);
  EXPECT_EQ(e.coefficients.size(), 4u + 3u);
}

TEST(RcsParam, ExtremePropensity) {
  const auto r = panel_to_rcs(generate(1, 2000, 8), 0.5, 9);
  RcsParamOptions opt;
  opt.pT_override = Vec::Constant(r.n(), 0.999);
  EXPECT_EQ(code_of([&] { estimate_rcs_param(r, kInterceptOnly, kOneZ, opt); }), ErrorCode::ExtremePropensity);
}

TEST(RcsParam, OutcomeScalingInvariance) {
  const auto r = panel_to_rcs(generate(3, 10000, 4), 0.5, 5);
  const MSpec m{Basis{"1", "x1"}, {}};
  const auto a = estimate_rcs_param(r, m, MomentSpec{});
  const auto b = estimate_rcs_param(r.with_outcomes(r.y() * 3.0), m, MomentSpec{});
  EXPECT_NEAR(a.beta_hat, b.beta_hat, 1e-9);
}
