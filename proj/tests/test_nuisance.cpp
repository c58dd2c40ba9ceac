#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "idid/nuisance.hpp"
#include "idid/simulation.hpp"

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

Mat column(const Vec& v) {
  Mat m(v.size(), 1);
  m.col(0) = v;
  return m;
}

}  // namespace

TEST(Folds, BalancedSizes) {
  auto s10 = make_folds(10, 5, 1).sizes();
  EXPECT_EQ(s10, (std::vector<std::size_t>{2, 2, 2, 2, 2}));
  auto s11 = make_folds(11, 5, 1).sizes();
  std::sort(s11.begin(), s11.end());
  EXPECT_EQ(s11, (std::vector<std::size_t>{2, 2, 2, 2, 3}));
  EXPECT_EQ(code_of([] { make_folds(3, 5, 1); }), ErrorCode::TooFewRows);
}

TEST(Folds, Deterministic) {
  EXPECT_EQ(make_folds(1000, 5, 9).fold_of, make_folds(1000, 5, 9).fold_of);
  EXPECT_NE(make_folds(1000, 5, 9).fold_of, make_folds(1000, 5, 10).fold_of);
  const auto f = make_folds(100, 4, 3);
  for (int q = 0; q < 4; ++q) EXPECT_EQ(f.members(q).size() + f.complement(q).size(), 100u);
}

TEST(Learners, ConstantTargetIdentityGlm) {
  Mat x = Mat::Random(50, 2);
  const auto fit = fit_conditional_mean(x, Vec::Constant(50, 3.25), LearnerSpec::glm_identity());
  const Vec p = fit.predict(Mat::Random(7, 2) * 10.0);
  for (Index i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], 3.25, 1e-12);
}

TEST(Learners, BasisDegreeOneInterpolatesLine) {
  const Index n = 40;
  Vec xv = Vec::LinSpaced(n, -2.0, 3.0);
  Vec y = (2.0 + 3.0 * xv.array()).matrix();
  const auto fit = fit_conditional_mean(column(xv), y, LearnerSpec::basis(1, false));
  ASSERT_EQ(fit.coefficients.size(), 2);
  EXPECT_NEAR(fit.coefficients[0], 2.0, 1e-8);
  EXPECT_NEAR(fit.coefficients[1], 3.0, 1e-8);
}

// Setting 3 has three distinct X values, so the degree-2 + sine expansion is
// collinear and the fit goes through the fallback.
TEST(Learners, BasisResidualsOrthogonalToColumns) {
  const auto p = generate(3, 2000, 4);
  const Mat xz = append_column(p.x(), p.z());
  const auto fit = fit_conditional_mean(xz, p.y1(), LearnerSpec::basis(2, true));
  const Mat a = detail::BasisExpansion::learn(xz, 2, true)(xz);
  const Vec resid = p.y1() - fit.predict(xz);
  const Vec normal = a.transpose() * resid;
  const Vec scale = a.cwiseAbs().transpose() * p.y1().cwiseAbs();
  for (Index j = 0; j < a.cols(); ++j) EXPECT_LE(std::abs(normal[j]), 1e-8 * scale[j]) << "column " << j;
  EXPECT_TRUE(fit.ridge_fallback);
  EXPECT_LT(fit.coefficients.cwiseAbs().maxCoeff(), 1e3);
}

TEST(Learners, RidgeFallbackOnCollinearDesign) {
  Mat x(30, 2);
  x.col(0) = Vec::LinSpaced(30, 0.0, 1.0);
  x.col(1) = x.col(0);
  const auto fit = fit_conditional_mean(x, x.col(0) * 2.0, LearnerSpec::glm_identity());
  EXPECT_TRUE(fit.ridge_fallback);
  EXPECT_NEAR(fit.predict(x)(10), 2.0 * x(10, 0), 1e-4);
}

TEST(Learners, LinkRangesRespected) {
  const auto p = generate(3, 3000, 2);
  const Mat xz = append_column(p.x(), p.z());
  const auto flog = fit_conditional_mean(xz, p.y0(), LearnerSpec::glm_log());
  const auto flogit = fit_conditional_mean(xz, p.d0(), LearnerSpec::glm_logit());
  const Mat wild = Mat::Random(200, 2) * 1e3;
  const Vec a = flog.predict(wild), b = flogit.predict(wild);
  EXPECT_TRUE((a.array() >= 0.0).all());
  EXPECT_TRUE((b.array() >= 0.0).all() && (b.array() <= 1.0).all());
  EXPECT_EQ(code_of([&] { fit_conditional_mean(xz, p.y0() * 3.0, LearnerSpec::glm_logit()); }),
            ErrorCode::InvalidTarget);
}

TEST(Learners, KnnAveragesNeighbours) {
  Vec xv(5);
  xv << 0, 1, 2, 3, 4;
  Vec y(5);
  y << 0, 10, 20, 30, 40;
  const auto fit = fit_conditional_mean(column(xv), y, LearnerSpec::knn(3));
  Mat q(1, 1);
  q(0, 0) = 2.1;
  EXPECT_NEAR(fit.predict(q)[0], 20.0, 1e-12);
}

// Out-of-fold MSE of basis_ls for Y0 in setting 3 against the analytic mean
//   E(Y0 | X, Z) = exp(-1 + 0.5 Z + 0.25 X + 0.15 sin X) * exp(0.25 + 0.125).
TEST(Learners, SettingThreeBasisNearOracle) {
  const auto p = generate(3, 10000, 17);
  const Mat xz = append_column(p.x(), p.z());
  const auto folds = make_folds(p.n(), 2, 5);
  double mse = 0.0, mse_oracle = 0.0;
  for (int q = 0; q < 2; ++q) {
    const auto tr = folds.complement(q), te = folds.members(q);
    Mat xtr(static_cast<Index>(tr.size()), 2), xte(static_cast<Index>(te.size()), 2);
    Vec ytr(static_cast<Index>(tr.size()));
    for (std::size_t r = 0; r < tr.size(); ++r) {
      xtr.row(static_cast<Index>(r)) = xz.row(tr[r]);
      ytr[static_cast<Index>(r)] = p.y0()[tr[r]];
    }
    for (std::size_t r = 0; r < te.size(); ++r) xte.row(static_cast<Index>(r)) = xz.row(te[r]);
    const Vec pred = fit_conditional_mean(xtr, ytr, LearnerSpec::basis(2, true)).predict(xte);
    for (std::size_t r = 0; r < te.size(); ++r) {
      const double x = xz(te[r], 0), z = xz(te[r], 1), y = p.y0()[te[r]];
      const double truth = std::exp(-1.0 + 0.5 * z + 0.25 * x + 0.15 * std::sin(x)) * std::exp(0.375);
      mse += std::pow(y - pred[static_cast<Index>(r)], 2);
      mse_oracle += std::pow(y - truth, 2);
    }
  }
  EXPECT_LE(mse, 1.05 * mse_oracle);
}

TEST(Stacking, ExactLearnerGetsZeroLoss) {
  Vec xv = Vec::LinSpaced(60, -1.0, 2.0);
  Vec y = (1.0 - 0.5 * xv.array()).matrix();
  const auto fit = fit_stacked(column(xv), y, {LearnerSpec::glm_identity(), LearnerSpec::basis(2, false)},
                               make_folds(60, 5, 1));
  EXPECT_NEAR(fit.weights.sum(), 1.0, 1e-12);
  EXPECT_TRUE((fit.weights.array() >= 0.0).all());
  EXPECT_NEAR(fit.cv_loss, 0.0, 1e-10);
}

TEST(Stacking, SingleSurvivorGetsAllWeight) {
  Vec xv = Vec::LinSpaced(40, 0.0, 1.0);
  Vec y = (3.0 * xv.array() + 2.0).matrix();  // outside (0,1): the logit candidate fails
  const auto fit = fit_stacked(column(xv), y, {LearnerSpec::glm_logit(), LearnerSpec::glm_identity()},
                               make_folds(40, 4, 2));
  ASSERT_EQ(fit.weights.size(), 1);
  EXPECT_DOUBLE_EQ(fit.weights[0], 1.0);
  EXPECT_FALSE(fit.warnings.empty());
  EXPECT_EQ(code_of([&] {
              fit_stacked(column(xv), y, {LearnerSpec::glm_logit(), LearnerSpec::glm_logit()}, make_folds(40, 4, 2));
            }),
            ErrorCode::AllCandidatesFailed);
}

TEST(Stacking, NeverWorseThanBestCandidate) {
  const auto p = generate(3, 4000, 23);
  const Mat xz = append_column(p.x(), p.z());
  const auto fit = fit_stacked(xz, p.y0(), LearnerSpec::default_stack().candidates, make_folds(p.n(), 5, 3));
  ASSERT_GT(fit.candidate_cv_loss.size(), 0);
  EXPECT_LE(fit.cv_loss, fit.candidate_cv_loss.minCoeff() + 1e-6);
  EXPECT_NEAR(fit.weights.sum(), 1.0, 1e-12);
}

TEST(LearnerJson, RoundTrip) {
  const LearnerSpec s = LearnerSpec::default_stack();
  const nlohmann::json j = s;
  const auto back = j.get<LearnerSpec>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(nlohmann::json::parse(R"({"kind":"knn","k":7})").get<LearnerSpec>().k, 7);
  EXPECT_EQ(nlohmann::json("basis_ls").get<LearnerSpec>().kind, LearnerKind::basis_ls);
}

TEST(NuisanceSet, EmptyCovariatesGiveTrainingMeans) {
  const auto p = generate(1, 1000, 6);
  const auto folds = make_folds(p.n(), 5, 4);
  const auto sets = fit_nuisance_set(p, 0.0, Basis{"z"}, LearnerSpec::basis(2, true), folds);
  ASSERT_EQ(sets.size(), 5u);
  const auto rows = folds.complement(2);
  double y0 = 0, y0z = 0, y1d1 = 0;
  for (Index i : rows) {
    y0 += p.y0()[i];
    y0z += p.y0()[i] * p.z()[i];
    y1d1 += p.y1()[i] * p.d1()[i];
  }
  const double m = static_cast<double>(rows.size());
  const auto v = sets[2].evaluate(Mat(3, 0), Vec::Zero(3));
  EXPECT_NEAR(v.a4[1], y0 / m, 1e-12);
  EXPECT_NEAR(v.a2(0, 0), y0z / m, 1e-12);
  EXPECT_NEAR(v.a5[2], y1d1 / m, 1e-12);
}

TEST(NuisanceSet, ConstantGCollapses) {
  const auto p = generate(3, 3000, 12);
  const auto ev = evaluate_nuisance(p, 0.0, Basis{"1"}, LearnerSpec::basis(2, true), nullptr);
  EXPECT_LE((ev.values.a1.col(0) - ev.values.a3).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((ev.values.a2.col(0) - ev.values.a4).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_FALSE(ev.crossfit);
  EXPECT_FALSE(ev.warnings.empty());
}

// E(Y0) = exp(-1) exp(0.25 + 0.125) (1 + exp(0.5)) / 2 for setting 1.
TEST(NuisanceSet, SettingOneA4MatchesPopulationMean) {
  const auto p = generate(1, 100000, 31);
  const auto folds = make_folds(p.n(), 5, 2);
  const auto ev = evaluate_nuisance(p, 0.0, Basis{"z"}, LearnerSpec::basis(2, true), &folds);
  const double truth = std::exp(-1.0 + 0.375) * (1.0 + std::exp(0.5)) / 2.0;
  const double se = std::sqrt(p.y0().array().square().mean() - std::pow(p.y0().mean(), 2)) / std::sqrt(1e5);
  EXPECT_LT(std::abs(ev.values.a4.mean() - truth), 3.0 * se);
  EXPECT_TRUE(ev.crossfit);
}

TEST(NuisanceSet, DegenerateDenominator) {
  const auto p = generate(1, 400, 3);
  const auto zero = p.with_outcomes(Vec::Zero(p.n()), p.y1());
  const auto folds = make_folds(zero.n(), 5, 1);
  EXPECT_EQ(code_of([&] { evaluate_nuisance(zero, 0.0, Basis{"z"}, LearnerSpec::basis(2, true), &folds); }),
            ErrorCode::DegenerateDenominator);
}
