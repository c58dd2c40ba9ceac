#pragma once

// Multiplicative model with a parametric baseline trend m(X, gamma) and
// beta(X) = beta0 + beta1'X, estimated from E{d(X,Z) eps} = 0 where
//   eps = Y1 exp(-beta(X) D1) - Y0 exp(-beta(X) D0 + m(X, gamma)).

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "idid/basis.hpp"
#include "idid/bootstrap.hpp"
#include "idid/data.hpp"
#include "idid/error.hpp"
#include "idid/estimate.hpp"
#include "idid/numerics.hpp"
#include "idid/panel_nocov.hpp"

namespace idid {

// m(X, gamma) = sum_j gamma_j basis_j(X).
struct MSpec {
  Basis basis{"1"};
  Vec gamma;
};

// Stack of functions forming d(X, Z). Empty selects the default.
struct MomentSpec {
  Basis d_basis;
};

struct ResidualContext {
  Vec beta;  // (beta0) or (beta0, beta1')
  MSpec m;
};

inline double residual_epsilon(const PanelObservation& o, const ResidualContext& ctx) {
  if (ctx.beta.size() < 1) throw Error(ErrorCode::InvalidArgument, "beta must have at least one component");
  if (ctx.beta.size() > 1 && static_cast<std::size_t>(ctx.beta.size() - 1) != o.x.size()) {
    throw Error(ErrorCode::InvalidArgument, "beta(X) slope dimension does not match the covariates");
  }
  if (ctx.m.gamma.size() != ctx.m.basis.size()) {
    throw Error(ErrorCode::InvalidArgument, "gamma and m basis differ in length");
  }
  Mat x(1, static_cast<Index>(o.x.size()));
  for (std::size_t k = 0; k < o.x.size(); ++k) x(0, static_cast<Index>(k)) = o.x[k];
  double bx = ctx.beta[0];
  for (Index k = 1; k < ctx.beta.size(); ++k) bx += ctx.beta[k] * x(0, k - 1);
  double m = 0.0;
  for (Index j = 0; j < ctx.m.basis.size(); ++j) m += ctx.m.gamma[j] * ctx.m.basis[j].eval(x, 0, o.z);
  if (!(std::abs(bx) <= kExponentLimit) || !(std::abs(m) <= kExponentLimit)) {
    throw Error(ErrorCode::Overflow, "exponent beyond +-700 in the moment residual");
  }
  return o.y1 * std::exp(-bx * o.d1) - o.y0 * std::exp(-bx * o.d0 + m);
}

// Default d(X,Z): (1, X, Z), then m-basis terms, then Z*X terms, truncated to
// the number of parameters so the system is just identified.
inline Basis default_moment_basis(Index n_params, const Basis& m_basis, Index p) {
  std::vector<std::string> names{"1"};
  for (Index k = 0; k < p; ++k) names.push_back("x" + std::to_string(k + 1));
  names.push_back("z");
  auto add = [&](const std::string& t) {
    if (std::find(names.begin(), names.end(), t) == names.end()) names.push_back(t);
  };
  for (const auto& t : m_basis.names()) add(t);
  for (Index k = 0; k < p; ++k) add("z*x" + std::to_string(k + 1));
  for (Index k = 0; k < p; ++k) add("z*sin(x" + std::to_string(k + 1) + ")");
  if (static_cast<Index>(names.size()) < n_params) {
    throw Error(ErrorCode::InvalidArgument, "cannot build a default d(X,Z) with enough functions; supply d_spec");
  }
  names.resize(static_cast<std::size_t>(n_params));
  return Basis(names);
}

// Vectorized pieces of the moment system for one dataset.
struct ParamSystem {
  Mat xstar;  // n x kb, beta(X) design
  Mat mb;     // n x km, m basis
  Mat dmat;   // n x q, d(X,Z)
  Vec y0, d0, y1, d1;

  Index kb() const { return xstar.cols(); }
  Index km() const { return mb.cols(); }
  Index n_params() const { return kb() + km(); }

  static ParamSystem build(const PanelDataset& panel, const Basis& beta_b, const Basis& m_b, const Basis& d_b) {
    if (m_b.uses_z()) throw Error(ErrorCode::InvalidArgument, "m(X) may not depend on Z");
    ParamSystem s;
    s.xstar = beta_b.evaluate(panel.x(), panel.z());
    s.mb = m_b.evaluate(panel.x(), panel.z());
    s.dmat = d_b.evaluate(panel.x(), panel.z());
    s.y0 = panel.y0();
    s.d0 = panel.d0();
    s.y1 = panel.y1();
    s.d1 = panel.d1();
    return s;
  }

  struct Pieces {
    Vec eps, e1, e0;  // e1 = Y1 exp(-bD1), e0 = Y0 exp(-bD0 + m)
  };

  Pieces pieces(const Vec& par) const {
    const Vec bx = xstar * par.head(kb());
    const Vec m = mb * par.tail(km());
    if (bx.size() > 0 && (!(bx.cwiseAbs().maxCoeff() <= kExponentLimit) ||
                          (m.size() > 0 && !(m.cwiseAbs().maxCoeff() <= kExponentLimit)))) {
      throw Error(ErrorCode::Overflow, "exponent beyond +-700 in the moment residual");
    }
    Pieces p;
    p.e1 = y1.array() * (-bx.array() * d1.array()).exp();
    p.e0 = y0.array() * (-bx.array() * d0.array() + m.array()).exp();
    p.eps = p.e1 - p.e0;
    return p;
  }

  // Per-observation moment contributions d_i * eps_i (n x q).
  Mat contributions(const Vec& par) const { return dmat.array().colwise() * pieces(par).eps.array(); }

  Vec moments(const Vec& par) const { return contributions(par).colwise().mean(); }

  // d eps_i / d par (n x n_params).
  Mat eps_gradient(const Vec& par) const {
    const auto p = pieces(par);
    Mat g(y0.size(), n_params());
    const Vec inner = p.e1.cwiseProduct(d1) - p.e0.cwiseProduct(d0);
    for (Index j = 0; j < kb(); ++j) g.col(j) = -xstar.col(j).cwiseProduct(inner);
    for (Index j = 0; j < km(); ++j) g.col(kb() + j) = -p.e0.cwiseProduct(mb.col(j));
    return g;
  }

  Mat jacobian(const Vec& par) const {
    return dmat.transpose() * eps_gradient(par) / static_cast<double>(y0.size());
  }

  double scale(const Vec& par) const {
    try {
      return contributions(par).cwiseAbs().colwise().mean().maxCoeff();
    } catch (const Error&) {
      return 0.0;
    }
  }
};

// Sandwich covariance of an M-estimator from per-observation contributions f
// (n x q) and the mean Jacobian B (q x k). Over-identified systems use the
// least-squares form (B'B)^-1 B' S B (B'B)^-1.
inline Mat sandwich(const Mat& f, const Mat& b) {
  const double n = static_cast<double>(f.rows());
  const Mat s = outer_mean(f);
  if (b.rows() == b.cols()) {
    Eigen::FullPivLU<Mat> lu(b);
    if (!lu.isInvertible()) throw Error(ErrorCode::RankDeficientJacobian, "singular moment Jacobian");
    const Mat bi = lu.inverse();
    return bi * s * bi.transpose() / n;
  }
  const Mat btb = b.transpose() * b;
  Eigen::FullPivLU<Mat> lu(btb);
  if (!lu.isInvertible()) throw Error(ErrorCode::RankDeficientJacobian, "singular moment Jacobian");
  const Mat bi = lu.inverse();
  return bi * b.transpose() * s * b * bi / n;
}

struct ParamOptions {
  double level = 0.95;
  VarianceOptions variance;
  Target target = Target::population;
  std::string method = "param";
};

inline std::vector<std::string> param_names(const Basis& beta_b, const Basis& m_b) {
  std::vector<std::string> names;
  for (const auto& t : beta_b.names()) names.push_back(t == "1" ? "beta0" : "beta[" + t + "]");
  for (const auto& t : m_b.names()) names.push_back("gamma[" + t + "]");
  return names;
}

inline Estimate estimate_param(const PanelDataset& panel, const MSpec& m_spec, BetaForm beta_form,
                               const MomentSpec& d_spec, const ParamOptions& opt = {}) {
  const Basis beta_b = beta_basis(beta_form, panel.p());
  const Basis& m_b = m_spec.basis;
  m_b.check(panel.p());
  const Index n_params = beta_b.size() + m_b.size();
  const Basis d_b = d_spec.d_basis.empty() ? default_moment_basis(n_params, m_b, panel.p()) : d_spec.d_basis;
  if (d_b.size() < n_params) {
    throw Error(ErrorCode::InvalidArgument, "d(X,Z) has " + std::to_string(d_b.size()) + " functions for " +
                                                std::to_string(n_params) + " parameters");
  }
  if (panel.y0().minCoeff() < 0.0 || panel.y1().minCoeff() < 0.0) {
    throw Error(ErrorCode::NegativeOutcome, "multiplicative model needs nonnegative outcomes");
  }
  const ParamSystem sys = ParamSystem::build(panel, beta_b, m_b, d_b);

  Estimate e;
  e.method = opt.method;
  e.spec = {Scale::multiplicative, opt.target, beta_form};
  e.level = opt.level;
  e.n = panel.n();
  if (d_b.size() > n_params) e.warnings.emplace_back("over-identified moment system solved by least squares");

  // Starting points: beta = 0 and the no-covariate quadratic estimate, each
  // with the m intercept (when present) at log(sum Y1 / sum Y0).
  std::vector<std::pair<std::string, Vec>> starts;
  Vec base = Vec::Zero(n_params);
  const double s0 = panel.y0().sum(), s1 = panel.y1().sum();
  for (Index j = 0; j < m_b.size(); ++j) {
    if (m_b[j].name() == "1" && s0 > 0 && s1 > 0) base[beta_b.size() + j] = std::log(s1 / s0);
  }
  starts.emplace_back("beta=0", base);
  try {
    const double pilot = solve_multiplicative_nocov(panel.without_covariates()).beta_hat;
    Vec v = base;
    v[0] = pilot;
    starts.emplace_back("pilot", v);
  } catch (const Error&) {
  }

  auto f = [&](const Vec& par) -> Vec {
    try {
      return sys.moments(par);
    } catch (const Error&) {
      return Vec::Constant(d_b.size(), std::numeric_limits<double>::quiet_NaN());
    }
  };
  auto jac = [&](const Vec& par, const Vec&) { return sys.jacobian(par); };
  auto scale = [&](const Vec& par) { return sys.scale(par); };

  std::optional<SolveResult> best;
  std::string used;
  nlohmann::json attempts = nlohmann::json::array();
  bool rank_deficient = false;
  for (const auto& [label, x0] : starts) {
    if (!f(x0).allFinite()) continue;
    SolveResult r = damped_newton(f, jac, x0, scale);
    rank_deficient = rank_deficient || r.rank_deficient;
    attempts.push_back({{"start", label},
                        {"converged", r.converged},
                        {"iterations", r.iterations},
                        {"residual", json_number(r.residual.size() ? r.residual.cwiseAbs().maxCoeff() : NAN)}});
    const bool better = !best || (!best->converged && (r.converged || (r.residual.allFinite() &&
                                                                        r.residual.norm() < best->residual.norm())));
    if (better) {
      best = r;
      used = label;
    }
    if (r.converged) break;
  }
  e.diagnostics["solver"] = {{"starts", attempts}, {"start_used", used}};
  if (!best || !best->converged) {
    if (rank_deficient && (!best || !best->residual.allFinite() || best->iterations == 0)) {
      throw Error(ErrorCode::RankDeficientJacobian, "moment Jacobian is rank deficient");
    }
    std::string msg = "damped Newton did not converge";
    if (best && best->residual.allFinite()) {
      msg += "; best residual max-norm " + std::to_string(best->residual.cwiseAbs().maxCoeff());
    }
    throw Error(ErrorCode::NonConvergence, msg);
  }

  const Vec par = best->x;
  const Mat b = sys.jacobian(par);
  const Mat cov = sandwich(sys.contributions(par), b);
  const auto names = param_names(beta_b, m_b);
  for (Index j = 0; j < n_params; ++j) {
    e.coefficients.push_back({names[static_cast<std::size_t>(j)], par[j], std::sqrt(cov(j, j))});
  }
  e.covariance = cov;
  e.beta_hat = par[0];
  e.theta_hat = std::expm1(-par[0]);
  e.se = std::sqrt(cov(0, 0));
  e.set_wald_ci();
  e.diagnostics["variance_method"] = "sandwich";
  e.diagnostics["m_basis"] = m_b.names();
  e.diagnostics["d_basis"] = d_b.names();
  e.diagnostics["iterations"] = best->iterations;
  e.diagnostics["trace"] = best->trace;
  e.diagnostics["moment_residual"] = best->residual.cwiseAbs().maxCoeff();

  if (opt.variance.bootstrap_B > 0) {
    ParamOptions inner = opt;
    inner.variance = {};
    const auto r = bootstrap_ci(
        panel, [&](const PanelDataset& bs) { return estimate_param(bs, m_spec, beta_form, d_spec, inner).beta_hat; },
        opt.variance.bootstrap_B, opt.variance.seed, opt.level, opt.variance.jobs);
    apply_bootstrap(e, r);
  }
  return e;
}

// Approach A1: m(X) linear in X, d = (1, X, Z).
inline Estimate misspecified_fit_a1(const PanelDataset& panel, double level = 0.95, const VarianceOptions& v = {}) {
  std::vector<std::string> m{"1"}, d{"1"};
  for (Index k = 0; k < panel.p(); ++k) {
    m.push_back("x" + std::to_string(k + 1));
    d.push_back("x" + std::to_string(k + 1));
  }
  d.push_back("z");
  ParamOptions opt;
  opt.level = level;
  opt.variance = v;
  opt.method = "A1";
  return estimate_param(panel, MSpec{Basis(m), {}}, BetaForm::constant, MomentSpec{Basis(d)}, opt);
}

// Approach A2: m(X) = d0 + d1 X + d2 sin(X), d = (1, X, Z, sin X); the correctly specified
// model for the covariate settings of the simulation study.
inline Estimate correct_fit_a2(const PanelDataset& panel, double level = 0.95, const VarianceOptions& v = {}) {
  std::vector<std::string> m{"1"}, d{"1"};
  for (Index k = 0; k < panel.p(); ++k) {
    m.push_back("x" + std::to_string(k + 1));
    d.push_back("x" + std::to_string(k + 1));
  }
  d.push_back("z");
  for (Index k = 0; k < panel.p(); ++k) {
    m.push_back("sin(x" + std::to_string(k + 1) + ")");
    d.push_back("sin(x" + std::to_string(k + 1) + ")");
  }
  ParamOptions opt;
  opt.level = level;
  opt.variance = v;
  opt.method = "A2";
  return estimate_param(panel, MSpec{Basis(m), {}}, BetaForm::constant, MomentSpec{Basis(d)}, opt);
}

}  // namespace idid
