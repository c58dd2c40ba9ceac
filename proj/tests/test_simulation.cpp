#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "idid/repeated_cs.hpp"
#include "idid/report.hpp"
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

double mean_where(const Vec& v, const Vec& z, int zval, double* sd = nullptr) {
  double s = 0, s2 = 0, c = 0;
  for (Index i = 0; i < v.size(); ++i) {
    if ((z[i] > 0.5) != (zval == 1)) continue;
    s += v[i];
    s2 += v[i] * v[i];
    c += 1;
  }
  const double m = s / c;
  if (sd) *sd = std::sqrt((s2 / c - m * m) / c);
  return m;
}

RepRecord record(double beta, double se, double lo, double hi) {
  RepRecord r;
  r.ok = true;
  r.beta_hat = beta;
  r.se = se;
  r.ci_lo = lo;
  r.ci_hi = hi;
  return r;
}

}  // namespace

TEST(Generate, InstrumentIsFair) {
  const auto p = generate(1, 1000000, 1);
  EXPECT_NEAR(p.z().mean(), 0.5, 0.002);
  EXPECT_EQ(p.p(), 0);
}

TEST(Generate, CovariateCaps) {
  EXPECT_EQ(generate(3, 1000000, 2).x().maxCoeff(), 2.5);
  EXPECT_EQ(generate(4, 1000000, 2).x().maxCoeff(), 3.5);
  EXPECT_EQ(generate(3, 10, 2).covariate_names(), std::vector<std::string>{"x1"});
}

// Under the tabulated coefficients setting 2's outcome frequency is
// e^-3.9 (e - 1)(1 + e) / 2, about 6.5%; the oracle integrates it directly.
TEST(Generate, SettingTwoOutcomeFrequency) {
  const auto s = SimulationSetting::get(2);
  const auto p = generate(s, 1000000, 3);
  const double analytic = std::exp(-3.9) * (std::exp(1.0) - 1.0) * (1.0 + std::exp(1.0)) / 2.0;
  const double pz1 = oracle::prob_z1(s);
  const double oracle_py1 = pz1 * oracle::moments_given_z(s, 1).y1 + (1 - pz1) * oracle::moments_given_z(s, 0).y1;
  EXPECT_NEAR(oracle_py1, analytic, 1e-9);
  const double sd = std::sqrt(analytic * (1 - analytic) / 1e6);
  EXPECT_NEAR(p.y1().mean(), analytic, 4 * sd);
  GenerationInfo info;
  generate(s, 10000, 3, &info);
  EXPECT_EQ(info.clipped_probabilities, 0);
}

// 52 comparisons; 5 sd keeps the family-wise false alarm rate near 3e-5.
TEST(Generate, MomentsMatchNumericalIntegration) {
  for (int id : {1, 2, 3, 4}) {
    const auto s = SimulationSetting::get(id);
    const auto p = generate(s, 200000, 10 + static_cast<std::uint64_t>(id));
    EXPECT_NEAR(p.z().mean(), oracle::prob_z1(s), 5 * std::sqrt(0.25 / 200000.0)) << "setting " << id;
    for (int z : {0, 1}) {
      const auto m = oracle::moments_given_z(s, z);
      const std::pair<Vec, double> checks[] = {{p.d0(), m.d0},
                                               {p.y0(), m.y0},
                                               {p.y0().cwiseProduct(p.d0()), m.y0d0},
                                               {p.d1(), m.d1},
                                               {p.y1(), m.y1},
                                               {p.y1().cwiseProduct(p.d1()), m.y1d1}};
      for (int k = 0; k < 6; ++k) {
        double sd = 0;
        const double got = mean_where(checks[k].first, p.z(), z, &sd);
        EXPECT_NEAR(got, checks[k].second, 5 * sd) << "setting " << id << " z " << z << " moment " << k;
      }
    }
  }
}

TEST(Generate, DeterministicPerSeed) {
  const auto a = generate(4, 3000, 77), b = generate(4, 3000, 77), c = generate(4, 3000, 78);
  EXPECT_EQ(a.y1(), b.y1());
  EXPECT_EQ(a.x(), b.x());
  EXPECT_NE(a.y1(), c.y1());
}

TEST(Generate, Errors) {
  EXPECT_EQ(code_of([] { generate(5, 10, 1); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { generate(1, 0, 1); }), ErrorCode::InvalidArgument);
  auto s = SimulationSetting::get(2);
  s.y1_c = 0.5;
  EXPECT_EQ(code_of([&] { generate(s, 5000, 1); }), ErrorCode::InvalidProbability);
}

TEST(PanelToRcs, KeepsOneTimePointPerSubject) {
  const auto p = generate(1, 20000, 4);
  const auto r = panel_to_rcs(p, 0.3, 5);
  ASSERT_EQ(r.n(), p.n());
  EXPECT_NEAR(r.t().mean(), 0.3, 4 * std::sqrt(0.21 / 20000));
  for (Index i = 0; i < r.n(); i += 101) {
    EXPECT_EQ(r.y()[i], r.t()[i] > 0.5 ? p.y1()[i] : p.y0()[i]);
    EXPECT_EQ(r.d()[i], r.t()[i] > 0.5 ? p.d1()[i] : p.d0()[i]);
  }
}

TEST(Planted, TableSatisfiesRatioEquationAndMarginals) {
  const PublishedMarginals m;
  const auto tab = solve_planted_table(m, -1.27);
  EXPECT_NEAR(tab.ratio_residual(-1.27), 0.0, 1e-14);
  for (int t = 0; t < 2; ++t) {
    EXPECT_NEAR(m.pZ[t] * tab.q[t][1] + (1 - m.pZ[t]) * tab.q[t][0], m.pD[t], 1e-14);
    const double w1 = m.pZ[t] * tab.q[t][1] / m.pD[t];
    EXPECT_NEAR(w1 * tab.r[t][1][1] + (1 - w1) * tab.r[t][0][1], m.pY_D1[t], 1e-14);
    const double v1 = m.pZ[t] * (1 - tab.q[t][1]) / (1 - m.pD[t]);
    EXPECT_NEAR(v1 * tab.r[t][1][0] + (1 - v1) * tab.r[t][0][0], m.pY_D0[t], 1e-14);
  }
  EXPECT_GT(tab.tilt, 0.0);
}

TEST(Planted, GeneratedMarginalsMatchTable) {
  const PublishedMarginals m;
  const auto r = generate_rcs_planted(m, -1.27, 100000, 100000, 8);
  for (int t = 0; t < 2; ++t) {
    double nd = 0, nt = 0, nz = 0;
    for (Index i = 0; i < r.n(); ++i) {
      if ((r.t()[i] > 0.5) != (t == 1)) continue;
      nt += 1;
      nd += r.d()[i];
      nz += r.z()[i];
    }
    EXPECT_NEAR(nd / nt, m.pD[t], 4 * std::sqrt(m.pD[t] * (1 - m.pD[t]) / nt));
    EXPECT_NEAR(nz / nt, m.pZ[t], 4 * std::sqrt(m.pZ[t] * (1 - m.pZ[t]) / nt));
  }
}

TEST(Planted, NullEffectWithSymmetricMarginals) {
  PublishedMarginals m;
  m.pD[0] = m.pD[1] = 0.5;
  m.pZ[0] = m.pZ[1] = 0.5;
  m.pY_D1[0] = m.pY_D1[1] = 0.1;
  m.pY_D0[0] = m.pY_D0[1] = 0.1;
  PlantedDesign design;
  design.q_z1[0] = 0.3;
  design.q_z1[1] = 0.7;
  const auto r = generate_rcs_planted(m, 0.0, 20000, 20000, 3, nullptr, design);
  const auto e = solve_rcs_nocov(r);
  EXPECT_TRUE(e.covers(0.0));
}

TEST(Planted, InfeasibleMarginals) {
  PublishedMarginals m;
  m.pY_D1[1] = 1.2;
  EXPECT_EQ(code_of([&] { solve_planted_table(m, -1.27); }), ErrorCode::InfeasibleMarginals);
  PublishedMarginals q;
  q.pD[0] = 0.99;
  EXPECT_EQ(code_of([&] { solve_planted_table(q, -1.27); }), ErrorCode::InfeasibleMarginals);
}

TEST(Metrics, ExactEstimates) {
  std::vector<RepRecord> recs(5, record(0.3, 0.1, 0.1, 0.5));
  const auto m = metrics(recs, 0.3, 100);
  for (double b : m.root_n_bias) EXPECT_EQ(b, 0.0);
  EXPECT_EQ(m.coverage, 1.0);
  EXPECT_EQ(m.empirical_variance, 0.0);
  EXPECT_FALSE(m.variance_ratio.has_value());
  EXPECT_NEAR(m.mean_variance_estimate, 0.01, 1e-15);
}

TEST(Metrics, TwoRepsAndTooFew) {
  std::vector<RepRecord> recs{record(0.1, 0.2, -0.3, 0.5), record(0.3, 0.2, 0.2, 0.4)};
  const auto m = metrics(recs, 0.0, 400);
  EXPECT_NEAR(m.mean_root_n_bias, 4.0, 1e-12);
  EXPECT_NEAR(m.empirical_variance, 0.02, 1e-15);
  EXPECT_NEAR(*m.variance_ratio, 2.0, 1e-12);
  EXPECT_EQ(m.coverage, 0.5);
  recs[1].ok = false;
  EXPECT_EQ(code_of([&] { metrics(recs, 0.0, 400); }), ErrorCode::TooFewReps);
}

TEST(Study, DeterministicAndIndependentOfJobs) {
  StudyConfig c;
  c.setting = 3;
  c.n_list = {1500, 3000};
  c.reps = 6;
  c.approaches = {Approach::nocov, Approach::A2, Approach::A3};
  c.master_seed = 31;
  const auto a = run_study(c);
  const auto b = run_study(c);
  c.jobs = 3;
  const auto d = run_study(c);
  ASSERT_EQ(a.records.size(), 2u * 6u * 3u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].beta_hat, b.records[i].beta_hat);
    EXPECT_EQ(a.records[i].beta_hat, d.records[i].beta_hat);
    EXPECT_EQ(a.records[i].se, d.records[i].se);
  }
  auto ja = to_json(a), jd = to_json(d);
  ja["config"].erase("jobs");
  jd["config"].erase("jobs");
  EXPECT_EQ(ja, jd);
  EXPECT_EQ(a.records[3].n, 1500);
  EXPECT_EQ(a.records[3].rep, 1u);
  EXPECT_EQ(a.records[4].approach, Approach::A2);
  EXPECT_EQ(a.cells.size(), 6u);
}

TEST(Study, RejectsCovariateApproachWithoutCovariate) {
  StudyConfig c;
  c.approaches = {Approach::A3};
  EXPECT_EQ(code_of([&] { run_study(c); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { approach_from_string("A9"); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(approach_from_string("A1"), Approach::A1);
}

TEST(Study, CsvAndSvgOutputs) {
  StudyConfig c;
  c.n_list = {2000};
  c.reps = 5;
  const auto r = run_study(c);
  std::ostringstream csv;
  write_study_csv(r, csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "setting,n,approach,rep,status,beta_hat,se,ci_lo,ci_hi,covered,error");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 5);
  const std::string svg = render_study_svg(r);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("root-n bias"), std::string::npos);
  EXPECT_NE(svg.find("variance ratio"), std::string::npos);
  EXPECT_NE(svg.find("coverage"), std::string::npos);
  const auto j = to_json(r);
  EXPECT_EQ(j["status"], "ok");
  EXPECT_EQ(j["cells"][0]["successes"], 5);
  EXPECT_EQ(csv_escape("a,b"), "\"a,b\"");
}
