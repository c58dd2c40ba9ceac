#pragma once

// Influence-function estimator of theta = exp(-beta) - 1 with m(X) left
// unspecified. With den = theta a3 + a4,
//   A    = d - (theta a1 + a2) / den
//   B    = (Y1 D1 - Y0 D0) theta + Y1 - Y0
//   E(B|X) = theta (a5 - a3) + a6 - a4
//   corr = (theta Y0 D0 d - theta a1 + Y0 d - a2) / den
//          - (theta a1 + a2)(theta Y0 D0 - theta a3 + Y0 - a4) / den^2
//   C    = mean{ (a2 a3 - a1 a4) / den^2 * B + A (Y1 D1 - Y0 D0) }
//   phi  = (corr * E(B|X) - A * B) / C.
// The estimator solves mean(phi) = 0 through its C-free numerator.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "idid/basis.hpp"
#include "idid/bootstrap.hpp"
#include "idid/data.hpp"
#include "idid/error.hpp"
#include "idid/estimate.hpp"
#include "idid/nuisance.hpp"
#include "idid/numerics.hpp"
#include "idid/panel_nocov.hpp"

namespace idid {

struct NuisancePoint {
  double a1 = 0.0, a2 = 0.0, a3 = 0.0, a4 = 0.0, a5 = 0.0, a6 = 0.0;
};

struct ABPair {
  double A = 0.0;
  double B = 0.0;
};

struct PhiValue {
  double phi = 0.0;
  double ab_term = 0.0;          // A * B
  double correction_term = 0.0;  // corr * E(B|X)
  double C = 0.0;
};

inline double floored_denominator(double theta, const NuisancePoint& a) {
  const double den = theta * a.a3 + a.a4;
  if (!(den >= kDenominatorFloor)) {
    throw Error(ErrorCode::DegenerateDenominator, "theta*a3 + a4 is below the denominator floor");
  }
  return den;
}

inline ABPair compute_ab(const PanelObservation& o, double theta, const NuisancePoint& a, double d_value) {
  if (!(theta > -1.0)) throw Error(ErrorCode::InvalidArgument, "theta must exceed -1");
  const double den = floored_denominator(theta, a);
  ABPair ab;
  ab.A = d_value - (theta * a.a1 + a.a2) / den;
  ab.B = (o.y1 * o.d1 - o.y0 * o.d0) * theta + o.y1 - o.y0;
  return ab;
}

inline NuisancePoint nuisance_at(const NuisanceSet& s, const PanelObservation& o, Index component = 0) {
  Mat x(1, static_cast<Index>(o.x.size()));
  for (std::size_t k = 0; k < o.x.size(); ++k) x(0, static_cast<Index>(k)) = o.x[k];
  Vec z(1);
  z[0] = o.z;
  const auto v = s.evaluate(x, z);
  return {v.a1(0, component), v.a2(0, component), v.a3[0], v.a4[0], v.a5[0], v.a6[0]};
}

inline ABPair compute_ab(const PanelObservation& o, double theta, const NuisanceSet& s, double d_value) {
  return compute_ab(o, theta, nuisance_at(s, o), d_value);
}

// Per-observation contribution to C for a single observation.
inline double c_contribution(const PanelObservation& o, double theta, const NuisancePoint& a, double d_value) {
  const double den = floored_denominator(theta, a);
  const auto ab = compute_ab(o, theta, a, d_value);
  return (a.a2 * a.a3 - a.a1 * a.a4) / (den * den) * ab.B + ab.A * (o.y1 * o.d1 - o.y0 * o.d0);
}

inline PhiValue influence_phi(const PanelObservation& o, double theta, const NuisancePoint& a, double d_value,
                              double c_hat) {
  if (!(std::abs(c_hat) >= 1e-10)) throw Error(ErrorCode::DegenerateC, "|C| below 1e-10");
  const double den = floored_denominator(theta, a);
  const auto ab = compute_ab(o, theta, a, d_value);
  const double eb = theta * (a.a5 - a.a3) + a.a6 - a.a4;
  const double corr = (theta * o.y0 * o.d0 * d_value - theta * a.a1 + o.y0 * d_value - a.a2) / den -
                      (theta * a.a1 + a.a2) * (theta * o.y0 * o.d0 - theta * a.a3 + o.y0 - a.a4) / (den * den);
  PhiValue p;
  p.ab_term = ab.A * ab.B;
  p.correction_term = corr * eb;
  p.C = c_hat;
  p.phi = (p.correction_term - p.ab_term) / c_hat;
  return p;
}

inline PhiValue influence_phi(const PanelObservation& o, double theta, const NuisanceSet& s, double c_hat) {
  Mat x(1, static_cast<Index>(o.x.size()));
  for (std::size_t k = 0; k < o.x.size(); ++k) x(0, static_cast<Index>(k)) = o.x[k];
  Vec z(1);
  z[0] = o.z;
  const double d_value = s.g.evaluate(x, z)(0, 0);
  return influence_phi(o, theta, nuisance_at(s, o), d_value, c_hat);
}

// ---------------------------------------------------------------------------
// Vectorized evaluation over a dataset
// ---------------------------------------------------------------------------

struct IfTerms {
  Mat num;    // n x K: corr * E(B|X) - A * B
  Mat cterm;  // n x K: per-observation integrand of C
  Mat ab;     // n x K: A * B
  Index floored = 0;
};

// theta may vary by observation (effect modifiers); g has K columns.
inline IfTerms if_terms(const PanelDataset& panel, const Vec& theta, const Mat& g, const NuisanceValues& v) {
  const Index n = panel.n(), k = g.cols();
  IfTerms t;
  t.num.resize(n, k);
  t.cterm.resize(n, k);
  t.ab.resize(n, k);
  const Vec& y0 = panel.y0();
  const Vec& d0 = panel.d0();
  const Vec& y1 = panel.y1();
  const Vec& d1 = panel.d1();
  for (Index i = 0; i < n; ++i) {
    const double th = theta[i];
    double den = th * v.a3[i] + v.a4[i];
    if (!(den >= kDenominatorFloor)) {
      den = kDenominatorFloor;
      ++t.floored;
    }
    const double dyd = y1[i] * d1[i] - y0[i] * d0[i];
    const double b = dyd * th + y1[i] - y0[i];
    const double eb = th * (v.a5[i] - v.a3[i]) + v.a6[i] - v.a4[i];
    const double base = th * y0[i] * d0[i] - th * v.a3[i] + y0[i] - v.a4[i];
    for (Index c = 0; c < k; ++c) {
      const double a1 = v.a1(i, c), a2 = v.a2(i, c), d = g(i, c);
      const double ratio = (th * a1 + a2) / den;
      const double a = d - ratio;
      const double corr = (th * y0[i] * d0[i] * d - th * a1 + y0[i] * d - a2) / den - ratio * base / den;
      t.ab(i, c) = a * b;
      t.num(i, c) = corr * eb - a * b;
      t.cterm(i, c) = (a2 * v.a3[i] - a1 * v.a4[i]) / (den * den) * b + a * dyd;
    }
  }
  return t;
}

inline double mean_numerator(const PanelDataset& panel, double theta, const Mat& g, const NuisanceValues& v) {
  const Vec th = Vec::Constant(panel.n(), theta);
  return if_terms(panel, th, g, v).num.col(0).mean();
}

// ---------------------------------------------------------------------------
// Root search on theta
// ---------------------------------------------------------------------------

struct ThetaRoots {
  std::vector<double> roots;
  double lower = 0.0, upper = 0.0;
  int expansions = 0;
};

// Scans log(1 + theta) on an even grid over (-1 + 1e-9, theta_max], widening
// the upper end tenfold up to twice when no sign change appears.
template <class F>
ThetaRoots theta_roots(F&& f, double theta_max = 1e3, int points = 400) {
  ThetaRoots out;
  const double lo = -1.0 + 1e-9;
  out.lower = lo;
  auto g = [&](double u) { return f(std::expm1(u)); };
  for (int attempt = 0; attempt <= 2; ++attempt) {
    const double hi = theta_max * std::pow(10.0, attempt);
    out.upper = hi;
    out.expansions = attempt;
    std::vector<double> grid(static_cast<std::size_t>(points));
    const double ulo = std::log1p(lo), uhi = std::log1p(hi);
    for (int i = 0; i < points; ++i) grid[static_cast<std::size_t>(i)] = ulo + (uhi - ulo) * i / (points - 1);
    const auto roots_u = roots_on_grid(g, grid);
    if (!roots_u.empty()) {
      for (double u : roots_u) out.roots.push_back(std::expm1(u));
      return out;
    }
  }
  return out;
}

inline double closest_in_beta(const std::vector<double>& thetas, double pilot_beta) {
  double best = thetas.front();
  for (double t : thetas)
    if (std::abs(theta_to_beta(t) - pilot_beta) < std::abs(theta_to_beta(best) - pilot_beta)) best = t;
  return best;
}

// ---------------------------------------------------------------------------
// Scalar estimator
// ---------------------------------------------------------------------------

struct NonparamOptions {
  LearnerSpec learner = LearnerSpec::basis(2, true);
  int Q = 5;
  std::uint64_t seed = 1;
  double level = 0.95;
  bool crossfit = true;
  Basis g{"z"};
  unsigned jobs = 1;
  VarianceOptions variance;
  Target target = Target::population;
  double theta_max = 1e3;
  int grid_points = 400;
};

struct Pilot {
  double theta = 0.0;
  std::string source;
};

inline Pilot pilot_theta(const PanelDataset& panel) {
  try {
    return {*solve_multiplicative_nocov(panel.without_covariates()).theta_hat, "quadratic"};
  } catch (const Error&) {
    return {0.0, "zero (quadratic pilot failed)"};
  }
}

inline void require_nonnegative(const PanelDataset& panel) {
  if (panel.y0().minCoeff() < 0.0 || panel.y1().minCoeff() < 0.0) {
    throw Error(ErrorCode::NegativeOutcome, "multiplicative model needs nonnegative outcomes");
  }
}

inline Estimate estimate_nonparam(const PanelDataset& panel, const NonparamOptions& opt) {
  require_nonnegative(panel);
  if (opt.g.size() != 1) throw Error(ErrorCode::InvalidArgument, "the scalar estimator takes a single g function");
  const Pilot pilot = pilot_theta(panel);
  std::optional<FoldAssignment> folds;
  if (opt.crossfit) folds = make_folds(panel.n(), opt.Q, opt.seed);
  const auto ev = evaluate_nuisance(panel, pilot.theta, opt.g, opt.learner, folds ? &*folds : nullptr, opt.jobs);
  const Mat g = opt.g.evaluate(panel.x(), panel.z());

  auto f = [&](double theta) { return mean_numerator(panel, theta, g, ev.values); };
  const auto found = theta_roots(f, opt.theta_max, opt.grid_points);
  if (found.roots.empty()) {
    throw Error(ErrorCode::NoRoot, "mean influence function keeps one sign on (-1, " +
                                       std::to_string(found.upper) + "]");
  }
  const double pilot_beta = theta_to_beta(pilot.theta);
  const double theta = closest_in_beta(found.roots, pilot_beta);

  const Vec th = Vec::Constant(panel.n(), theta);
  const IfTerms t = if_terms(panel, th, g, ev.values);
  const double c_hat = t.cterm.col(0).mean();
  if (!(std::abs(c_hat) >= 1e-10)) throw Error(ErrorCode::DegenerateC, "|C| below 1e-10 at the root");
  const Vec phi = t.num.col(0) / c_hat;
  const double se_theta = sample_sd(phi) / std::sqrt(static_cast<double>(panel.n()));

  Estimate e;
  e.method = "nonparam";
  e.spec = {Scale::multiplicative, opt.target, BetaForm::constant};
  e.level = opt.level;
  e.n = panel.n();
  e.theta_hat = theta;
  e.beta_hat = theta_to_beta(theta);
  e.se = se_theta / (1.0 + theta);
  e.set_wald_ci();
  e.warnings = ev.warnings;
  if (found.roots.size() > 1) e.warnings.emplace_back("multiple roots of the mean influence function");

  auto& dg = e.diagnostics;
  dg["variance_method"] = "influence-function";
  dg["crossfit"] = opt.crossfit;
  dg["folds"] = opt.crossfit ? opt.Q : 1;
  dg["seed"] = opt.seed;
  dg["learner"] = opt.learner;
  dg["g"] = opt.g.names();
  dg["bracket"] = {found.lower, found.upper};
  dg["bracket_expansions"] = found.expansions;
  std::vector<double> root_betas;
  for (double r : found.roots) root_betas.push_back(theta_to_beta(r));
  dg["roots_theta"] = found.roots;
  dg["roots_beta"] = root_betas;
  dg["root_rule"] = found.roots.size() > 1 ? "closest-to-pilot" : "unique";
  dg["pilot_theta"] = pilot.theta;
  dg["pilot_source"] = pilot.source;
  dg["C_hat"] = c_hat;
  dg["mean_phi"] = phi.mean();
  dg["clipped_a4"] = ev.values.clipped_a4;
  dg["repaired_nuisance_values"] = ev.values.repaired;
  dg["floored_denominators"] = t.floored;

  if (opt.variance.bootstrap_B > 0) {
    NonparamOptions inner = opt;
    inner.variance = {};
    inner.jobs = 1;
    const auto r = bootstrap_ci(
        panel, [&](const PanelDataset& b) { return estimate_nonparam(b, inner).beta_hat; },
        opt.variance.bootstrap_B, opt.variance.seed, opt.level, opt.variance.jobs);
    apply_bootstrap(e, r);
  }
  return e;
}

inline Estimate estimate_nonparam(const PanelDataset& panel, const LearnerSpec& learner, int Q, std::uint64_t seed,
                                  double level = 0.95, bool crossfit = true) {
  NonparamOptions opt;
  opt.learner = learner;
  opt.Q = Q;
  opt.seed = seed;
  opt.level = level;
  opt.crossfit = crossfit;
  return estimate_nonparam(panel, opt);
}

// ---------------------------------------------------------------------------
// Effect modifiers: beta(X) = beta0 + beta1'X
// ---------------------------------------------------------------------------

struct EffectModifierEstimate {
  std::vector<std::string> names;
  Vec beta;
  Mat covariance;
  double level = 0.95;
  Index n = 0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> trace;
  double residual = 0.0;
  std::vector<std::string> warnings;
  nlohmann::json diagnostics = nlohmann::json::object();

  Vec se() const { return covariance.diagonal().cwiseSqrt(); }

  // Repackaged as an Estimate with beta0 as the headline number.
  Estimate as_estimate(Target target = Target::population) const {
    Estimate e;
    e.method = "nonparam";
    e.spec = {Scale::multiplicative, target, beta.size() > 1 ? BetaForm::linear_in_x : BetaForm::constant};
    e.level = level;
    e.n = n;
    e.beta_hat = beta[0];
    e.theta_hat = std::expm1(-beta[0]);
    e.se = std::sqrt(covariance(0, 0));
    e.set_wald_ci();
    for (Index j = 0; j < beta.size(); ++j) {
      e.coefficients.push_back({names[static_cast<std::size_t>(j)], beta[j], std::sqrt(covariance(j, j))});
    }
    e.covariance = covariance;
    e.warnings = warnings;
    e.diagnostics = diagnostics;
    return e;
  }
};

struct ModifierOptions {
  LearnerSpec learner = LearnerSpec::basis(2, true);
  int Q = 5;
  std::uint64_t seed = 1;
  double level = 0.95;
  bool crossfit = true;
  bool slopes = true;  // false keeps beta constant (K = 1)
  unsigned jobs = 1;
};

inline EffectModifierEstimate estimate_nonparam_modifiers(const PanelDataset& panel, const ModifierOptions& opt) {
  require_nonnegative(panel);
  if (opt.slopes && panel.p() < 1) throw Error(ErrorCode::InvalidArgument, "effect modifiers need covariates");
  const Basis xb = beta_basis(opt.slopes ? BetaForm::linear_in_x : BetaForm::constant, panel.p());
  std::vector<std::string> gnames{"z"};
  if (opt.slopes)
    for (Index k = 0; k < panel.p(); ++k) gnames.push_back("z*x" + std::to_string(k + 1));
  const Basis gb(gnames);
  const Index K = xb.size();

  const Pilot pilot = pilot_theta(panel);
  std::optional<FoldAssignment> folds;
  if (opt.crossfit) folds = make_folds(panel.n(), opt.Q, opt.seed);
  const auto ev = evaluate_nuisance(panel, pilot.theta, gb, opt.learner, folds ? &*folds : nullptr, opt.jobs);
  const Mat g = gb.evaluate(panel.x(), panel.z());
  const Mat xstar = xb.evaluate(panel.x(), panel.z());

  auto theta_of = [&](const Vec& beta) -> Vec {
    const Vec bx = xstar * beta;
    return (-bx.array()).exp() - 1.0;
  };
  auto f = [&](const Vec& beta) -> Vec {
    const Vec bx = xstar * beta;
    if (!(bx.cwiseAbs().maxCoeff() <= kExponentLimit)) return Vec::Constant(K, std::numeric_limits<double>::quiet_NaN());
    return if_terms(panel, theta_of(beta), g, ev.values).num.colwise().mean().transpose();
  };
  auto jac = [&](const Vec& beta, const Vec& fx) { return numeric_jacobian(f, beta, &fx); };
  auto scale = [&](const Vec& beta) {
    const Vec bx = xstar * beta;
    if (!(bx.cwiseAbs().maxCoeff() <= kExponentLimit)) return 0.0;
    return if_terms(panel, theta_of(beta), g, ev.values).num.cwiseAbs().colwise().mean().maxCoeff();
  };

  Vec start = Vec::Zero(K);
  start[0] = theta_to_beta(pilot.theta);
  SolveOptions so;
  so.tol = 1e-12;
  SolveResult r = damped_newton(f, jac, start, scale, so);
  if (!r.converged && start[0] != 0.0) {
    SolveResult r0 = damped_newton(f, jac, Vec::Zero(K), scale, so);
    if (r0.converged || (r0.residual.allFinite() && r0.residual.norm() < r.residual.norm())) r = r0;
  }
  if (!r.converged) {
    if (r.rank_deficient) throw Error(ErrorCode::RankDeficientJacobian, "Jacobian of the modifier system is singular");
    throw Error(ErrorCode::NonConvergence, "damped Newton did not solve the modifier system");
  }

  const Vec theta = theta_of(r.x);
  const IfTerms t = if_terms(panel, theta, g, ev.values);
  // M_kj = mean_i cterm_ik * d theta_i / d beta_j with d theta/d beta = -(1 + theta) X*.
  const Mat dtheta = -(xstar.array().colwise() * (1.0 + theta.array())).matrix();
  const Mat m = t.cterm.transpose() * dtheta / static_cast<double>(panel.n());
  Eigen::FullPivLU<Mat> lu(m);
  if (!lu.isInvertible()) throw Error(ErrorCode::DegenerateC, "C matrix of the modifier system is singular");
  const Mat mi = lu.inverse();
  const Mat cov = mi * sample_covariance(t.num) * mi.transpose() / static_cast<double>(panel.n());

  EffectModifierEstimate out;
  for (const auto& nme : xb.names()) out.names.push_back(nme == "1" ? "beta0" : "beta[" + nme + "]");
  out.beta = r.x;
  out.covariance = cov;
  out.level = opt.level;
  out.n = panel.n();
  out.converged = r.converged;
  out.iterations = r.iterations;
  out.trace = r.trace;
  out.residual = r.residual.cwiseAbs().maxCoeff();
  out.warnings = ev.warnings;
  out.diagnostics["variance_method"] = "influence-function";
  out.diagnostics["crossfit"] = opt.crossfit;
  out.diagnostics["folds"] = opt.crossfit ? opt.Q : 1;
  out.diagnostics["seed"] = opt.seed;
  out.diagnostics["learner"] = opt.learner;
  out.diagnostics["g"] = gb.names();
  out.diagnostics["iterations"] = r.iterations;
  out.diagnostics["moment_residual"] = out.residual;
  out.diagnostics["pilot_theta"] = pilot.theta;
  out.diagnostics["clipped_a4"] = ev.values.clipped_a4;
  return out;
}

// ---------------------------------------------------------------------------
// Second-order remainder
// ---------------------------------------------------------------------------

// Plug-in functional theta(eta): root closest to `near` of
//   M(theta) = theta (mean d Y1 D1 - mean a1) + (mean d Y1 - mean a2)
//              - mean{ (theta a1 + a2)/(theta a3 + a4) [theta (a5 - a3) + a6 - a4] }.
inline double plugin_theta(const PanelDataset& panel, const NuisanceValues& v, const Mat& g, double near) {
  const Vec gd = g.col(0);
  const double m_y1d1 = gd.cwiseProduct(panel.y1()).cwiseProduct(panel.d1()).mean();
  const double m_y1 = gd.cwiseProduct(panel.y1()).mean();
  const double m_a1 = v.a1.col(0).mean(), m_a2 = v.a2.col(0).mean();
  auto mfun = [&](double theta) {
    double s = 0.0;
    for (Index i = 0; i < v.n(); ++i) {
      const double den = std::max(theta * v.a3[i] + v.a4[i], kDenominatorFloor);
      s += (theta * v.a1(i, 0) + v.a2(i, 0)) / den * (theta * (v.a5[i] - v.a3[i]) + v.a6[i] - v.a4[i]);
    }
    return theta * (m_y1d1 - m_a1) + (m_y1 - m_a2) - s / static_cast<double>(v.n());
  };
  const auto found = theta_roots(mfun);
  if (found.roots.empty()) throw Error(ErrorCode::NoRoot, "plug-in functional has no root");
  return closest_in_beta(found.roots, theta_to_beta(near));
}

inline double mean_phi(const PanelDataset& panel, double theta, const Mat& g, const NuisanceValues& v) {
  const Vec th = Vec::Constant(panel.n(), theta);
  const IfTerms t = if_terms(panel, th, g, v);
  const double c = t.cterm.col(0).mean();
  if (!(std::abs(c) >= 1e-10)) throw Error(ErrorCode::DegenerateC, "|C| below 1e-10");
  return t.num.col(0).mean() / c;
}

inline NuisanceValues perturb(const NuisanceValues& eta, const NuisanceValues& delta, double eps) {
  NuisanceValues out = eta;
  out.a1 += eps * delta.a1;
  out.a2 += eps * delta.a2;
  out.a3 += eps * delta.a3;
  out.a4 += eps * delta.a4;
  out.a5 += eps * delta.a5;
  out.a6 += eps * delta.a6;
  if (delta.lambda.size() == out.lambda.size()) out.lambda += eps * delta.lambda;
  return out;
}

// Nuisances with X empty: each a_j is the sample mean of its target.
inline NuisanceValues empirical_nuisance(const PanelDataset& panel, const Basis& g = Basis{"z"}) {
  const Index n = panel.n();
  const Mat gv = g.evaluate(panel.x(), panel.z());
  const Vec y0d0 = panel.y0().cwiseProduct(panel.d0());
  NuisanceValues v;
  v.a1.resize(n, gv.cols());
  v.a2.resize(n, gv.cols());
  for (Index c = 0; c < gv.cols(); ++c) {
    v.a1.col(c).setConstant(y0d0.cwiseProduct(gv.col(c)).mean());
    v.a2.col(c).setConstant(panel.y0().cwiseProduct(gv.col(c)).mean());
  }
  v.a3 = Vec::Constant(n, y0d0.mean());
  v.a4 = Vec::Constant(n, panel.y0().mean());
  v.a5 = Vec::Constant(n, panel.y1().cwiseProduct(panel.d1()).mean());
  v.a6 = Vec::Constant(n, panel.y1().mean());
  v.lambda = Vec::Ones(n);
  return v;
}

struct RemainderRow {
  double eps = 0.0;
  double theta_perturbed = 0.0;
  double mean_phi = 0.0;
  double R = 0.0;
};

// R(eta, eta') = theta(eta') - theta(eta) + mean phi(O, theta(eta'), eta') for
// eta' = eta + eps * delta, with theta(eta) = theta_true.
inline std::vector<RemainderRow> remainder_second_order(const PanelDataset& panel, double theta_true,
                                                        const NuisanceValues& oracle, const NuisanceValues& delta,
                                                        const std::vector<double>& eps_list,
                                                        const Basis& g = Basis{"z"}) {
  const Mat gv = g.evaluate(panel.x(), panel.z());
  std::vector<RemainderRow> rows;
  for (double eps : eps_list) {
    const NuisanceValues eta = perturb(oracle, delta, eps);
    RemainderRow r;
    r.eps = eps;
    r.theta_perturbed = plugin_theta(panel, eta, gv, theta_true);
    r.mean_phi = mean_phi(panel, r.theta_perturbed, gv, eta);
    r.R = r.theta_perturbed - theta_true + r.mean_phi;
    rows.push_back(r);
  }
  return rows;
}

}  // namespace idid
