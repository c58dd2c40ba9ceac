#pragma once

// Data generation for the four simulation settings, a planted-truth
// repeated cross-section generator, and the Monte Carlo study driver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idid/data.hpp"
#include "idid/error.hpp"
#include "idid/estimate.hpp"
#include "idid/nuisance.hpp"
#include "idid/numerics.hpp"
#include "idid/panel_nocov.hpp"
#include "idid/panel_nonparam.hpp"
#include "idid/panel_param.hpp"
#include "idid/parallel.hpp"
#include "idid/repeated_cs.hpp"
#include "idid/rng.hpp"

namespace idid {

enum class OutcomeKind { count, rare_binary };

// Linear predictors of one setting:
//   X  = min(Poisson(0.5) + 0.5, x_cap)                  (covariate settings)
//   Z  ~ Bernoulli(0.5) or Bernoulli(expit(z_c + z_x X))
//   U_t ~ Normal(0.5, 1) or Uniform(0, 1)
//   D0 ~ Bernoulli(expit(d0_c + d0_z Z + d0_u U0 + d0_x X))
//   Y0 ~ Poisson or Bernoulli with mean exp(y0_c + y0_u U0 + y0_z Z + y0_x X + y0_s sin X)
//   D1 ~ Bernoulli(expit(d1_c + d1_z Z + d1_u U1 + d1_y Y0 + d1_x X))
//   Y1 ~ as Y0 with the y1_* coefficients.
struct SimulationSetting {
  int id = 1;
  OutcomeKind outcome = OutcomeKind::count;
  bool has_covariate = false;
  double x_cap = 0.0;
  double z_c = 0.0, z_x = 0.0;
  bool u_normal = true;
  double d0_c = 0, d0_z = 0, d0_u = 0, d0_x = 0;
  double y0_c = 0, y0_u = 0, y0_z = 0, y0_x = 0, y0_s = 0;
  double d1_c = 0, d1_z = 0, d1_u = 0, d1_y = 0, d1_x = 0;
  double y1_c = 0, y1_u = 0, y1_z = 0, y1_x = 0, y1_s = 0;
  double beta_true = 0.0;

  static SimulationSetting get(int id) {
    SimulationSetting s;
    s.id = id;
    switch (id) {
      case 1:
        s.d0_c = 1, s.d0_z = -1, s.d0_u = 1;
        s.y0_c = -1, s.y0_u = 0.5, s.y0_z = 0.5;
        s.d1_c = -1, s.d1_z = 1, s.d1_u = 1, s.d1_y = 1;
        s.y1_c = -1, s.y1_u = 0.5, s.y1_z = 0.5;
        break;
      case 2:
        s.outcome = OutcomeKind::rare_binary;
        s.u_normal = false;
        s.d0_c = -0.85, s.d0_z = -1, s.d0_u = 1;
        s.y0_c = -3.7, s.y0_u = 1, s.y0_z = 1;
        s.d1_c = 0.272, s.d1_z = 1, s.d1_u = 1, s.d1_y = 1;
        s.y1_c = -3.9, s.y1_u = 1, s.y1_z = 1;
        break;
      case 3:
        s.has_covariate = true;
        s.x_cap = 2.5;
        s.z_c = -0.5, s.z_x = 1;
        s.d0_c = 1, s.d0_z = -1, s.d0_u = 1, s.d0_x = 1;
        s.y0_c = -1, s.y0_u = 0.5, s.y0_z = 0.5, s.y0_x = 0.25, s.y0_s = 0.15;
        s.d1_c = -1, s.d1_z = 1, s.d1_u = 1, s.d1_y = 1, s.d1_x = 1;
        s.y1_c = -1, s.y1_u = 0.5, s.y1_z = 0.5, s.y1_x = 0.35, s.y1_s = 1.70;
        break;
      case 4:
        s.outcome = OutcomeKind::rare_binary;
        s.has_covariate = true;
        s.x_cap = 3.5;
        s.z_c = -0.8, s.z_x = 1;
        s.u_normal = false;
        s.d0_c = -0.85, s.d0_z = -1, s.d0_u = 1, s.d0_x = 1;
        s.y0_c = -1.8, s.y0_u = -1.5, s.y0_z = -0.25, s.y0_x = 0.15, s.y0_s = 0.15;
        s.d1_c = 0.272, s.d1_z = 0.5, s.d1_u = 0.5, s.d1_y = 1, s.d1_x = 0.5;
        s.y1_c = -3, s.y1_u = -1.5, s.y1_z = -0.25, s.y1_x = 0.35, s.y1_s = 1.70;
        break;
      default: throw Error(ErrorCode::InvalidArgument, "simulation setting must be 1, 2, 3 or 4");
    }
    return s;
  }

  double z_prob(double x) const { return has_covariate ? expit(z_c + z_x * x) : 0.5; }
  double d0_prob(double z, double u0, double x) const { return expit(d0_c + d0_z * z + d0_u * u0 + d0_x * x); }
  double y0_mean(double z, double u0, double x) const {
    return std::exp(y0_c + y0_u * u0 + y0_z * z + y0_x * x + y0_s * std::sin(x));
  }
  double d1_prob(double z, double u1, double y0, double x) const {
    return expit(d1_c + d1_z * z + d1_u * u1 + d1_y * y0 + d1_x * x);
  }
  double y1_mean(double z, double u1, double x) const {
    return std::exp(y1_c + y1_u * u1 + y1_z * z + y1_x * x + y1_s * std::sin(x));
  }
};

struct GenerationInfo {
  Index clipped_probabilities = 0;
};

inline PanelDataset generate(const SimulationSetting& s, Index n, std::uint64_t seed, GenerationInfo* info = nullptr) {
  if (n < 1) throw Error(ErrorCode::InvalidArgument, "n must be at least 1");
  const RngStream rs(seed);
  auto ex = rs.engine(0, Stream::X), ez = rs.engine(0, Stream::Z);
  auto eu0 = rs.engine(0, Stream::U0), ed0 = rs.engine(0, Stream::D0), ey0 = rs.engine(0, Stream::Y0);
  auto eu1 = rs.engine(0, Stream::U1), ed1 = rs.engine(0, Stream::D1), ey1 = rs.engine(0, Stream::Y1);
  std::poisson_distribution<int> pois_x(0.5);
  std::normal_distribution<double> normal(0.5, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Vec z(n), d0(n), y0(n), d1(n), y1(n);
  Mat x(n, s.has_covariate ? 1 : 0);
  Index clipped = 0;
  auto bern = [](std::mt19937_64& e, double p) { return std::bernoulli_distribution(p)(e) ? 1.0 : 0.0; };
  auto outcome = [&](std::mt19937_64& e, double mean) {
    if (s.outcome == OutcomeKind::count) return static_cast<double>(std::poisson_distribution<long>(mean)(e));
    if (mean > 1.0) {
      ++clipped;
      mean = 1.0;
    }
    return bern(e, mean);
  };
  auto draw_u = [&](std::mt19937_64& e) { return s.u_normal ? normal(e) : unif(e); };

  for (Index i = 0; i < n; ++i) {
    double xi = 0.0;
    if (s.has_covariate) {
      xi = std::min(pois_x(ex) + 0.5, s.x_cap);
      x(i, 0) = xi;
    }
    z[i] = bern(ez, s.z_prob(xi));
    const double u0 = draw_u(eu0);
    d0[i] = bern(ed0, s.d0_prob(z[i], u0, xi));
    y0[i] = outcome(ey0, s.y0_mean(z[i], u0, xi));
    const double u1 = draw_u(eu1);
    d1[i] = bern(ed1, s.d1_prob(z[i], u1, y0[i], xi));
    y1[i] = outcome(ey1, s.y1_mean(z[i], u1, xi));
  }
  if (info) info->clipped_probabilities = clipped;
  if (static_cast<double>(clipped) > 0.001 * 2.0 * static_cast<double>(n)) {
    throw Error(ErrorCode::InvalidProbability,
                std::to_string(clipped) + " outcome probabilities exceeded 1 (more than 0.1% of draws)");
  }
  return PanelDataset(z, x, d0, y0, d1, y1, s.has_covariate ? std::vector<std::string>{"x1"} : std::vector<std::string>{});
}

inline PanelDataset generate(int setting, Index n, std::uint64_t seed, GenerationInfo* info = nullptr) {
  return generate(SimulationSetting::get(setting), n, seed, info);
}

// Keeps each subject at one randomly drawn time point (T ~ Bernoulli(p1)).
inline RcsDataset panel_to_rcs(const PanelDataset& panel, double p1, std::uint64_t seed) {
  auto e = RngStream(seed).engine(0, Stream::T);
  std::bernoulli_distribution bt(p1);
  const Index n = panel.n();
  Vec t(n), d(n), y(n);
  for (Index i = 0; i < n; ++i) {
    t[i] = bt(e) ? 1.0 : 0.0;
    d[i] = t[i] == 1.0 ? panel.d1()[i] : panel.d0()[i];
    y[i] = t[i] == 1.0 ? panel.y1()[i] : panel.y0()[i];
  }
  return RcsDataset(panel.z(), panel.x(), t, d, y, panel.covariate_names());
}

// ---------------------------------------------------------------------------
// Planted-truth repeated cross-sections
// ---------------------------------------------------------------------------

// Index 0 is time 0 and index 1 is time 1.
struct PublishedMarginals {
  double pD[2] = {0.46, 0.86};     // P(D_t = 1)
  double pZ[2] = {0.58, 0.53};     // P(Z = 1 | T = t)
  double pY_D1[2] = {0.03, 0.04};  // P(Y_t = 1 | D_t = 1)
  double pY_D0[2] = {0.10, 0.12};  // P(Y_t = 1 | D_t = 0)
};

// Free choices of the construction: P(D=1 | Z=1, T=t).
struct PlantedDesign {
  double q_z1[2] = {0.3, 0.97};
};

// Cell probabilities q[t][z] = P(D=1 | T=t, Z=z) and r[t][z][d] = P(Y=1 | T=t, Z=z, D=d).
// Outcome risks equal the published values except r[1][z][1], which is tilted
// across Z by a factor chosen so that the ratio equation holds at beta while
// P(Y=1 | D=1, T=1) is preserved.
struct PlantedTable {
  double beta = 0.0;
  double q[2][2] = {};
  double r[2][2][2] = {};
  double tilt = 1.0;
  PublishedMarginals marginals;

  double cell_mean(int t, int z, double b) const {
    return (1.0 - q[t][z]) * r[t][z][0] + q[t][z] * r[t][z][1] * std::exp(-b);
  }
  // F11 F00 - F01 F10 for F_tz = E(Y exp(-b D) | T=t, Z=z) in the population.
  double ratio_residual(double b) const {
    return cell_mean(1, 1, b) * cell_mean(0, 0, b) - cell_mean(0, 1, b) * cell_mean(1, 0, b);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["beta"] = beta;
    j["tilt"] = tilt;
    nlohmann::json cells = nlohmann::json::array();
    for (int t = 0; t < 2; ++t)
      for (int z = 0; z < 2; ++z)
        cells.push_back({{"t", t}, {"z", z}, {"p_d1", q[t][z]}, {"p_y1_d0", r[t][z][0]}, {"p_y1_d1", r[t][z][1]}});
    j["cells"] = cells;
    j["marginals"] = {{"p_d", {marginals.pD[0], marginals.pD[1]}},
                      {"p_z", {marginals.pZ[0], marginals.pZ[1]}},
                      {"p_y_given_d1", {marginals.pY_D1[0], marginals.pY_D1[1]}},
                      {"p_y_given_d0", {marginals.pY_D0[0], marginals.pY_D0[1]}}};
    return j;
  }
};

inline PlantedTable solve_planted_table(const PublishedMarginals& m, double beta, const PlantedDesign& design = {}) {
  auto prob = [](double v) { return v >= 0.0 && v <= 1.0; };
  for (int t = 0; t < 2; ++t) {
    if (!prob(m.pD[t]) || !prob(m.pZ[t]) || !prob(m.pY_D1[t]) || !prob(m.pY_D0[t]) || !prob(design.q_z1[t])) {
      throw Error(ErrorCode::InfeasibleMarginals, "marginal probabilities must lie in [0,1]");
    }
    if (m.pZ[t] <= 0.0 || m.pZ[t] >= 1.0) throw Error(ErrorCode::InfeasibleMarginals, "P(Z=1|T) must lie in (0,1)");
  }
  PlantedTable tab;
  tab.beta = beta;
  tab.marginals = m;
  for (int t = 0; t < 2; ++t) {
    tab.q[t][1] = design.q_z1[t];
    tab.q[t][0] = (m.pD[t] - m.pZ[t] * design.q_z1[t]) / (1.0 - m.pZ[t]);
    if (!prob(tab.q[t][0])) throw Error(ErrorCode::InfeasibleMarginals, "no P(D=1|Z=0,T) matches P(D=1)");
    for (int z = 0; z < 2; ++z) {
      tab.r[t][z][0] = m.pY_D0[t];
      tab.r[t][z][1] = m.pY_D1[t];
    }
  }
  const double w1 = m.pZ[1] * tab.q[1][1] / m.pD[1];  // P(Z=1 | D=1, T=1)
  const double w0 = 1.0 - w1;
  if (!(w1 > 0.0 && w0 > 0.0)) throw Error(ErrorCode::InfeasibleMarginals, "degenerate P(Z | D=1, T=1)");
  auto apply = [&](double x) {
    PlantedTable c = tab;
    c.tilt = x;
    c.r[1][1][1] = m.pY_D1[1] * x;
    c.r[1][0][1] = m.pY_D1[1] * (1.0 - w1 * x) / w0;
    return c;
  };
  double x_hi = 1.0 / w1;
  if (m.pY_D1[1] > 0.0) x_hi = std::min(x_hi, 1.0 / m.pY_D1[1]);
  const double x_lo_bound = m.pY_D1[1] > 0.0 ? std::max(0.0, (1.0 - w0 / m.pY_D1[1]) / w1) : 0.0;
  auto g = [&](double x) { return apply(x).ratio_residual(beta); };
  std::vector<double> grid(2001);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid[i] = x_lo_bound + (x_hi - x_lo_bound) * static_cast<double>(i) / static_cast<double>(grid.size() - 1);
  }
  const auto roots = roots_on_grid(g, grid);
  if (roots.empty()) throw Error(ErrorCode::InfeasibleMarginals, "no joint distribution satisfies the ratio equation");
  double best = roots.front();
  for (double r : roots)
    if (std::abs(r - 1.0) < std::abs(best - 1.0)) best = r;
  PlantedTable out = apply(best);
  for (int t = 0; t < 2; ++t)
    for (int z = 0; z < 2; ++z)
      for (int d = 0; d < 2; ++d)
        if (!prob(out.r[t][z][d])) throw Error(ErrorCode::InfeasibleMarginals, "outcome risk outside [0,1]");
  return out;
}

inline RcsDataset generate_rcs_planted(const PublishedMarginals& m, double beta, Index n0, Index n1, std::uint64_t seed,
                                       PlantedTable* table_out = nullptr, const PlantedDesign& design = {}) {
  if (n0 < 1 || n1 < 1) throw Error(ErrorCode::InvalidArgument, "both time strata need at least one subject");
  const PlantedTable tab = solve_planted_table(m, beta, design);
  if (table_out) *table_out = tab;
  const RngStream rs(seed);
  auto ez = rs.engine(0, Stream::Z), ed = rs.engine(0, Stream::D), ey = rs.engine(0, Stream::Y);
  const Index n = n0 + n1;
  Vec z(n), t(n), d(n), y(n);
  for (Index i = 0; i < n; ++i) {
    const int ti = i < n0 ? 0 : 1;
    t[i] = ti;
    const int zi = std::bernoulli_distribution(m.pZ[ti])(ez) ? 1 : 0;
    const int di = std::bernoulli_distribution(tab.q[ti][zi])(ed) ? 1 : 0;
    z[i] = zi;
    d[i] = di;
    y[i] = std::bernoulli_distribution(tab.r[ti][zi][di])(ey) ? 1.0 : 0.0;
  }
  return RcsDataset(z, Mat(n, 0), t, d, y);
}

// ---------------------------------------------------------------------------
// Monte Carlo study
// ---------------------------------------------------------------------------

enum class Approach { nocov, A1, A2, A3 };

inline std::string_view to_string(Approach a) {
  switch (a) {
    case Approach::nocov: return "nocov";
    case Approach::A1: return "A1";
    case Approach::A2: return "A2";
    case Approach::A3: return "A3";
  }
  return "unknown";
}

inline Approach approach_from_string(std::string_view s) {
  for (auto a : {Approach::nocov, Approach::A1, Approach::A2, Approach::A3})
    if (to_string(a) == s) return a;
  throw Error(ErrorCode::InvalidArgument, "unknown approach '" + std::string(s) + "'");
}

struct StudyConfig {
  int setting = 1;
  std::vector<Index> n_list{5000};
  std::size_t reps = 200;
  std::vector<Approach> approaches{Approach::nocov};
  std::uint64_t master_seed = 1;
  unsigned jobs = 1;
  LearnerSpec learner = LearnerSpec::basis(2, true);
  bool crossfit = true;
  int folds = 5;
  double level = 0.95;
};

struct RepRecord {
  Index n = 0;
  Approach approach = Approach::nocov;
  std::size_t rep = 0;
  bool ok = false;
  double beta_hat = 0.0, se = 0.0, ci_lo = 0.0, ci_hi = 0.0;
  bool covered = false;
  std::string error;
};

struct Metrics {
  std::vector<double> root_n_bias;
  double mean_root_n_bias = 0.0;
  double se_mean_root_n_bias = 0.0;
  double mean_variance_estimate = 0.0;
  double empirical_variance = 0.0;
  std::optional<double> variance_ratio;  // absent when the empirical variance is zero
  double coverage = 0.0;
  std::size_t successes = 0;
};

// Root-n bias sample, mean(se^2) / Var(beta-hat) and coverage of the CIs.
inline Metrics metrics(const std::vector<RepRecord>& records, double beta_true, Index n) {
  std::vector<const RepRecord*> ok;
  for (const auto& r : records)
    if (r.ok) ok.push_back(&r);
  if (ok.size() < 2) throw Error(ErrorCode::TooFewReps, "metrics need at least 2 successful replications");
  Metrics m;
  m.successes = ok.size();
  const double rn = std::sqrt(static_cast<double>(n));
  Vec b(static_cast<Index>(ok.size())), v(static_cast<Index>(ok.size()));
  std::size_t covered = 0;
  for (std::size_t k = 0; k < ok.size(); ++k) {
    const auto& r = *ok[k];
    m.root_n_bias.push_back(rn * (r.beta_hat - beta_true));
    b[static_cast<Index>(k)] = r.beta_hat;
    v[static_cast<Index>(k)] = r.se * r.se;
    covered += (r.ci_lo <= beta_true && beta_true <= r.ci_hi) ? 1 : 0;
  }
  const Vec rb = Eigen::Map<const Vec>(m.root_n_bias.data(), static_cast<Index>(m.root_n_bias.size()));
  m.mean_root_n_bias = rb.mean();
  m.se_mean_root_n_bias = sample_sd(rb) / std::sqrt(static_cast<double>(ok.size()));
  m.mean_variance_estimate = v.mean();
  m.empirical_variance = sample_variance(b);
  if (m.empirical_variance > 0.0) m.variance_ratio = m.mean_variance_estimate / m.empirical_variance;
  m.coverage = static_cast<double>(covered) / static_cast<double>(ok.size());
  return m;
}

struct CellSummary {
  Index n = 0;
  Approach approach = Approach::nocov;
  std::size_t failures = 0;
  std::optional<Metrics> metrics;
  std::string status = "ok";  // ok | too-many-failures | too-few-reps
};

struct StudyReport {
  StudyConfig config;
  double beta_true = 0.0;
  std::vector<RepRecord> records;  // ordered by (n, rep, approach)
  std::vector<CellSummary> cells;

  const CellSummary& cell(Index n, Approach a) const {
    for (const auto& c : cells)
      if (c.n == n && c.approach == a) return c;
    throw Error(ErrorCode::InvalidArgument, "no such study cell");
  }
  bool all_cells_ok() const {
    return std::all_of(cells.begin(), cells.end(), [](const CellSummary& c) { return c.status == "ok"; });
  }
};

inline std::uint64_t rep_seed(std::uint64_t master, Index n, std::size_t rep) {
  return derive_seed(master, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(rep));
}

inline Estimate run_approach(Approach a, const PanelDataset& data, const StudyConfig& cfg, std::uint64_t seed) {
  switch (a) {
    case Approach::nocov: return solve_multiplicative_nocov(data.without_covariates(), cfg.level);
    case Approach::A1: return misspecified_fit_a1(data, cfg.level);
    case Approach::A2: return correct_fit_a2(data, cfg.level);
    case Approach::A3: {
      NonparamOptions opt;
      opt.learner = cfg.learner;
      opt.Q = cfg.folds;
      opt.seed = derive_seed(seed, 0, static_cast<std::uint64_t>(Stream::Folds));
      opt.level = cfg.level;
      opt.crossfit = cfg.crossfit;
      return estimate_nonparam(data, opt);
    }
  }
  throw Error(ErrorCode::InvalidArgument, "unknown approach");
}

inline StudyReport run_study(const StudyConfig& cfg) {
  const auto setting = SimulationSetting::get(cfg.setting);
  if (cfg.reps < 1) throw Error(ErrorCode::InvalidArgument, "reps must be positive");
  if (cfg.n_list.empty() || cfg.approaches.empty()) throw Error(ErrorCode::InvalidArgument, "empty study design");
  for (auto a : cfg.approaches) {
    if (a != Approach::nocov && !setting.has_covariate) {
      throw Error(ErrorCode::InvalidArgument,
                  "approach " + std::string(to_string(a)) + " needs a setting with a covariate (3 or 4)");
    }
  }
  z_critical(cfg.level);

  StudyReport report;
  report.config = cfg;
  report.beta_true = setting.beta_true;
  const std::size_t n_a = cfg.approaches.size();
  const std::size_t per_n = cfg.reps * n_a;
  report.records.resize(cfg.n_list.size() * per_n);

  parallel_for(cfg.n_list.size() * cfg.reps, cfg.jobs, [&](std::size_t job) {
    const std::size_t ni = job / cfg.reps, rep = job % cfg.reps;
    const Index n = cfg.n_list[ni];
    const std::uint64_t seed = rep_seed(cfg.master_seed, n, rep);
    std::optional<PanelDataset> data;
    std::string gen_error;
    try {
      data.emplace(generate(setting, n, seed));
    } catch (const Error& e) {
      gen_error = e.what();
    }
    for (std::size_t k = 0; k < n_a; ++k) {
      RepRecord& r = report.records[ni * per_n + rep * n_a + k];
      r.n = n;
      r.approach = cfg.approaches[k];
      r.rep = rep;
      if (!data) {
        r.error = gen_error;
        continue;
      }
      try {
        const Estimate e = run_approach(cfg.approaches[k], *data, cfg, seed);
        r.beta_hat = e.beta_hat;
        r.se = e.se;
        r.ci_lo = e.ci_lo;
        r.ci_hi = e.ci_hi;
        r.ok = std::isfinite(e.beta_hat) && std::isfinite(e.se);
        if (!r.ok) r.error = "non-finite estimate or standard error";
        r.covered = r.ok && e.covers(setting.beta_true);
      } catch (const Error& e) {
        r.error = e.what();
      }
    }
  });

  for (Index n : cfg.n_list) {
    for (auto a : cfg.approaches) {
      CellSummary c;
      c.n = n;
      c.approach = a;
      std::vector<RepRecord> recs;
      for (const auto& r : report.records) {
        if (r.n == n && r.approach == a) {
          recs.push_back(r);
          if (!r.ok) ++c.failures;
        }
      }
      try {
        c.metrics = metrics(recs, setting.beta_true, n);
      } catch (const Error&) {
        c.status = "too-few-reps";
      }
      if (static_cast<double>(c.failures) > 0.1 * static_cast<double>(cfg.reps)) c.status = "too-many-failures";
      report.cells.push_back(std::move(c));
    }
  }
  return report;
}

}  // namespace idid
