#pragma once

// Estimators without covariates: the additive Wald ratio and the
// multiplicative estimator obtained from a quadratic in theta = exp(-beta) - 1.
//
// The quadratic machinery works on a "cell design": four membership masks
// indexed by (t, z) together with the outcome and exposure seen at time t.
// For panels the mask of cell (t, z) is 1{Z=z} and the outcome is Y_t; for
// repeated cross-sections it is 1{T=t, Z=z} and the outcome is Y. Everything
// downstream (coefficients, roots, influence functions) is shared.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "idid/bootstrap.hpp"
#include "idid/data.hpp"
#include "idid/error.hpp"
#include "idid/estimate.hpp"
#include "idid/numerics.hpp"

namespace idid {

struct VarianceOptions {
  std::size_t bootstrap_B = 0;  // 0 selects the analytic (M-estimation) variance
  std::uint64_t seed = 1;
  unsigned jobs = 1;
};

struct CellDesign {
  std::array<std::array<Vec, 2>, 2> mask;  // [t][z]
  std::array<Vec, 2> y, d;                 // [t]
  Index n = 0;
  bool repeated_cross_section = false;

  static CellDesign panel(const PanelDataset& p) {
    CellDesign c;
    c.n = p.n();
    const Vec one = Vec::Ones(c.n);
    for (int t = 0; t < 2; ++t) {
      c.mask[t][1] = p.z();
      c.mask[t][0] = one - p.z();
    }
    c.y = {p.y0(), p.y1()};
    c.d = {p.d0(), p.d1()};
    return c;
  }

  static CellDesign rcs(const RcsDataset& r) {
    CellDesign c;
    c.n = r.n();
    c.repeated_cross_section = true;
    const Vec one = Vec::Ones(c.n);
    for (int t = 0; t < 2; ++t) {
      const Vec tm = t == 1 ? r.t() : Vec(one - r.t());
      c.mask[t][1] = tm.cwiseProduct(r.z());
      c.mask[t][0] = tm.cwiseProduct(one - r.z());
      c.y[t] = r.y();
      c.d[t] = r.d();
    }
    return c;
  }

  double count(int t, int z) const { return mask[t][z].sum(); }
};

// Cell means E_tz = E(Y_t | cell) and E_ttz = E(Y_t D_t | cell), with the
// coefficients of  Q(theta) = F11 F00 - F10 F01,  F_tz = E_tz + theta E_ttz.
struct QuadraticCoefficients {
  double c2 = 0.0, c1 = 0.0, c0 = 0.0;
  std::array<std::array<double, 2>, 2> e_y{};   // E_tz
  std::array<std::array<double, 2>, 2> e_yd{};  // E_ttz

  double E(int t, int z) const { return e_y[t][z]; }
  double Ed(int t, int z) const { return e_yd[t][z]; }
  double F(int t, int z, double theta) const { return e_y[t][z] + theta * e_yd[t][z]; }

  double lhs(double theta) const { return F(1, 1, theta) * F(0, 0, theta); }
  double rhs(double theta) const { return F(1, 0, theta) * F(0, 1, theta); }
  double value(double theta) const { return (c2 * theta + c1) * theta + c0; }
  double slope(double theta) const { return 2.0 * c2 * theta + c1; }
  bool degenerate() const { return c2 == 0.0 && c1 == 0.0 && c0 == 0.0; }
};

inline QuadraticCoefficients quadratic_from_means(const std::array<std::array<double, 2>, 2>& e_y,
                                                  const std::array<std::array<double, 2>, 2>& e_yd) {
  QuadraticCoefficients q;
  q.e_y = e_y;
  q.e_yd = e_yd;
  const double E11 = e_y[1][1], E00 = e_y[0][0], E10 = e_y[1][0], E01 = e_y[0][1];
  const double E111 = e_yd[1][1], E000 = e_yd[0][0], E110 = e_yd[1][0], E001 = e_yd[0][1];
  q.c2 = E111 * E000 - E110 * E001;
  q.c1 = E11 * E000 + E111 * E00 - E10 * E001 - E110 * E01;
  q.c0 = E11 * E00 - E10 * E01;
  return q;
}

inline QuadraticCoefficients quadratic_coefficients(const CellDesign& c) {
  std::array<std::array<double, 2>, 2> e_y{}, e_yd{};
  for (int t = 0; t < 2; ++t) {
    for (int z = 0; z < 2; ++z) {
      const double cnt = c.count(t, z);
      if (cnt == 0.0) {
        if (c.repeated_cross_section) {
          throw Error(ErrorCode::EmptyCell,
                      "no observations with T=" + std::to_string(t) + ", Z=" + std::to_string(z));
        }
        throw Error(ErrorCode::EmptyStratum, "no observations with Z=" + std::to_string(z));
      }
      e_y[t][z] = c.mask[t][z].dot(c.y[t]) / cnt;
      e_yd[t][z] = c.mask[t][z].dot(c.y[t].cwiseProduct(c.d[t])) / cnt;
    }
  }
  return quadratic_from_means(e_y, e_yd);
}

inline QuadraticCoefficients quadratic_coefficients(const PanelDataset& panel) {
  return quadratic_coefficients(CellDesign::panel(panel));
}

struct QuadraticRoots {
  std::vector<double> all;         // real roots
  std::vector<double> admissible;  // roots with theta > -1
  bool linear = false;
};

inline QuadraticRoots quadratic_roots(const QuadraticCoefficients& q) {
  if (q.degenerate()) throw Error(ErrorCode::DegenerateQuadratic, "all quadratic coefficients are zero");
  QuadraticRoots out;
  if (std::abs(q.c2) < 1e-12 * (std::abs(q.c1) + std::abs(q.c0))) {
    out.linear = true;
    if (q.c1 != 0.0) out.all.push_back(-q.c0 / q.c1);
  } else {
    const double disc = q.c1 * q.c1 - 4.0 * q.c2 * q.c0;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      const double qq = -0.5 * (q.c1 + (q.c1 >= 0.0 ? sq : -sq));
      if (qq == 0.0) {
        out.all.push_back(0.0);
      } else {
        out.all.push_back(qq / q.c2);
        out.all.push_back(q.c0 / qq);
      }
    }
  }
  for (double& r : out.all) {
    // One Newton polish on the unexpanded product form.
    const double s = q.slope(r);
    if (s != 0.0) {
      const double cand = r - q.value(r) / s;
      if (std::abs(q.value(cand)) < std::abs(q.value(r))) r = cand;
    }
  }
  std::sort(out.all.begin(), out.all.end());
  for (double r : out.all)
    if (r > -1.0) out.admissible.push_back(r);
  return out;
}

inline double theta_to_beta(double theta) { return -std::log1p(theta); }
inline double beta_to_theta(double beta) { return std::expm1(-beta); }

// Additive Wald ratio applied to log(1 + Y), used only to choose between two
// admissible roots. Returns nullopt when its denominator vanishes.
inline std::optional<double> log_trend_pilot(const CellDesign& c) {
  double ly[2][2], dd[2][2];
  for (int t = 0; t < 2; ++t) {
    for (int z = 0; z < 2; ++z) {
      const double cnt = c.count(t, z);
      if (cnt == 0.0) return std::nullopt;
      ly[t][z] = c.mask[t][z].dot(c.y[t].array().log1p().matrix()) / cnt;
      dd[t][z] = c.mask[t][z].dot(c.d[t]) / cnt;
    }
  }
  const double num = (ly[1][1] - ly[0][1]) - (ly[1][0] - ly[0][0]);
  const double den = (dd[1][1] - dd[0][1]) - (dd[1][0] - dd[0][0]);
  if (!(std::abs(den) >= 1e-12)) return std::nullopt;
  return num / den;
}

struct RootChoice {
  double theta = 0.0;
  std::string rule;
};

inline RootChoice choose_root(const std::vector<double>& admissible, std::optional<double> pilot_beta) {
  if (admissible.empty()) throw Error(ErrorCode::NoAdmissibleRoot, "no real root with theta > -1");
  if (admissible.size() == 1) return {admissible[0], "unique-admissible"};
  const double target = pilot_beta.value_or(0.0);
  double best = admissible[0];
  for (double r : admissible)
    if (std::abs(theta_to_beta(r) - target) < std::abs(theta_to_beta(best) - target)) best = r;
  return {best, pilot_beta ? "closest-to-pilot" : "closest-to-zero"};
}

// Influence function of theta-hat at theta for the cell design (length n).
inline Vec quadratic_influence(const CellDesign& c, const QuadraticCoefficients& q, double theta) {
  const double nn = static_cast<double>(c.n);
  std::array<std::array<Vec, 2>, 2> inf_f;
  for (int t = 0; t < 2; ++t) {
    for (int z = 0; z < 2; ++z) {
      const double p = c.count(t, z) / nn;
      const Vec contrib = c.y[t].array() * (1.0 + theta * c.d[t].array()) - q.F(t, z, theta);
      inf_f[t][z] = c.mask[t][z].cwiseProduct(contrib) / p;
    }
  }
  const Vec inf_q = q.F(0, 0, theta) * inf_f[1][1] + q.F(1, 1, theta) * inf_f[0][0] -
                    q.F(0, 1, theta) * inf_f[1][0] - q.F(1, 0, theta) * inf_f[0][1];
  return -inf_q / q.slope(theta);
}

inline Estimate solve_quadratic_design(const CellDesign& c, double level, const std::string& method) {
  const auto q = quadratic_coefficients(c);
  const auto roots = quadratic_roots(q);
  const auto pilot = log_trend_pilot(c);
  const auto choice = choose_root(roots.admissible, pilot);

  Estimate e;
  e.method = method;
  e.level = level;
  e.n = c.n;
  e.theta_hat = choice.theta;
  e.beta_hat = theta_to_beta(choice.theta);

  const double slope = q.slope(choice.theta);
  if (std::abs(slope) <= 1e-14 * (std::abs(q.c2) + std::abs(q.c1) + std::abs(q.c0))) {
    e.se = std::numeric_limits<double>::infinity();
    e.warnings.emplace_back("double root: delta-method variance is undefined");
  } else {
    const Vec inf = quadratic_influence(c, q, choice.theta);
    const double se_theta = std::sqrt(inf.squaredNorm()) / static_cast<double>(c.n);
    e.se = se_theta / (1.0 + choice.theta);
  }
  e.set_wald_ci();

  auto& dg = e.diagnostics;
  dg["variance_method"] = "m-estimation";
  dg["coefficients"] = {{"c2", q.c2}, {"c1", q.c1}, {"c0", q.c0}};
  dg["roots"] = roots.all;
  dg["admissible_roots"] = roots.admissible;
  dg["root_rule"] = choice.rule;
  dg["linear_case"] = roots.linear;
  dg["pilot_beta"] = pilot ? json_number(*pilot) : nlohmann::json(nullptr);
  dg["residual"] = q.lhs(choice.theta) - q.rhs(choice.theta);
  nlohmann::json cells = nlohmann::json::object();
  for (int t = 0; t < 2; ++t) {
    for (int z = 0; z < 2; ++z) {
      const std::string key = std::to_string(t) + std::to_string(z);
      cells["E" + key] = q.E(t, z);
      cells["E" + std::to_string(t) + key] = q.Ed(t, z);
      cells["n" + key] = c.count(t, z);
    }
  }
  dg["cell_means"] = cells;
  return e;
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

inline Estimate wald_additive(const PanelDataset& panel, double level = 0.95, const VarianceOptions& vopt = {},
                              Target target = Target::population) {
  const Index n = panel.n();
  const Vec& z = panel.z();
  const double n1 = z.sum();
  const double n0 = static_cast<double>(n) - n1;
  if (n1 == 0.0 || n0 == 0.0) throw Error(ErrorCode::EmptyStratum, "both Z strata must be nonempty");
  const Vec dy = panel.y1() - panel.y0();
  const Vec dd = panel.d1() - panel.d0();
  const Vec zc = Vec::Ones(n) - z;
  const double my1 = z.dot(dy) / n1, my0 = zc.dot(dy) / n0;
  const double md1 = z.dot(dd) / n1, md0 = zc.dot(dd) / n0;
  const double num = my1 - my0;
  const double den = md1 - md0;
  if (!(std::abs(den) >= 1e-12)) {
    throw Error(ErrorCode::WeakInstrument, "exposure trend does not differ between Z strata");
  }

  Estimate e;
  e.method = "wald";
  e.spec = {Scale::additive, target, BetaForm::constant};
  e.level = level;
  e.n = n;
  e.beta_hat = num / den;

  const double p1 = n1 / static_cast<double>(n), p0 = n0 / static_cast<double>(n);
  const Vec inf_num = (z.array() * (dy.array() - my1) / p1 - zc.array() * (dy.array() - my0) / p0).matrix();
  const Vec inf_den = (z.array() * (dd.array() - md1) / p1 - zc.array() * (dd.array() - md0) / p0).matrix();
  const Vec inf = (inf_num - e.beta_hat * inf_den) / den;
  e.se = std::sqrt(inf.squaredNorm()) / static_cast<double>(n);
  e.set_wald_ci();
  e.diagnostics["variance_method"] = "m-estimation";
  e.diagnostics["numerator"] = num;
  e.diagnostics["denominator"] = den;
  e.diagnostics["n_by_stratum"] = {{"Z=0", n0}, {"Z=1", n1}};

  if (vopt.bootstrap_B > 0) {
    const auto r = bootstrap_ci(
        panel, [&](const PanelDataset& b) { return wald_additive(b, level, {}, target).beta_hat; },
        vopt.bootstrap_B, vopt.seed, level, vopt.jobs);
    apply_bootstrap(e, r);
  }
  return e;
}

inline Estimate solve_multiplicative_nocov(const PanelDataset& panel, double level = 0.95,
                                           const VarianceOptions& vopt = {}, Target target = Target::population) {
  Estimate e = solve_quadratic_design(CellDesign::panel(panel), level, "quadratic");
  e.spec = {Scale::multiplicative, target, BetaForm::constant};
  if (vopt.bootstrap_B > 0) {
    const auto r = bootstrap_ci(
        panel, [&](const PanelDataset& b) { return solve_multiplicative_nocov(b, level).beta_hat; },
        vopt.bootstrap_B, vopt.seed, level, vopt.jobs);
    apply_bootstrap(e, r);
  }
  return e;
}

}  // namespace idid
