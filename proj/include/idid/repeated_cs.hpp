#pragma once

// Repeated cross-sections: each subject is seen once, at T = 0 or T = 1.
//   pi = T Y exp(-beta(X) D) / pT - (1 - T) Y exp(-beta(X) D + m(X)) / (1 - pT)
// with pT = P(T=1 | Z, X). The parametric estimator stacks E{d pi} = 0 with
// the logistic score E{s (T - pT)} = 0 and reports the joint sandwich.

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
#include "idid/panel_param.hpp"

namespace idid {

inline constexpr double kPropensityClip = 1e-3;

inline Estimate solve_rcs_nocov(const RcsDataset& rcs, double level = 0.95, const VarianceOptions& vopt = {},
                                Target target = Target::population) {
  Estimate e = solve_quadratic_design(CellDesign::rcs(rcs), level, "quadratic");
  e.spec = {Scale::multiplicative, target, BetaForm::constant};
  e.diagnostics["design"] = "rcs";
  if (vopt.bootstrap_B > 0) {
    const auto r = bootstrap_ci(
        rcs, [&](const RcsDataset& b) { return solve_rcs_nocov(b, level).beta_hat; }, vopt.bootstrap_B, vopt.seed,
        level, vopt.jobs);
    apply_bootstrap(e, r);
  }
  return e;
}

struct PiResidualContext {
  Vec beta;
  MSpec m;
  double pT = 0.5;
};

inline double residual_pi(const RcsObservation& o, const PiResidualContext& ctx) {
  Mat x(1, static_cast<Index>(o.x.size()));
  for (std::size_t k = 0; k < o.x.size(); ++k) x(0, static_cast<Index>(k)) = o.x[k];
  double bx = ctx.beta[0];
  for (Index k = 1; k < ctx.beta.size(); ++k) bx += ctx.beta[k] * x(0, k - 1);
  double m = 0.0;
  for (Index j = 0; j < ctx.m.basis.size(); ++j) m += ctx.m.gamma[j] * ctx.m.basis[j].eval(x, 0, o.z);
  if (!(std::abs(bx) <= kExponentLimit) || !(std::abs(m) <= kExponentLimit)) {
    throw Error(ErrorCode::Overflow, "exponent beyond +-700 in the pi residual");
  }
  return o.t * o.y * std::exp(-bx * o.d) / ctx.pT - (1.0 - o.t) * o.y * std::exp(-bx * o.d + m) / (1.0 - ctx.pT);
}

struct RcsParamOptions {
  double level = 0.95;
  BetaForm beta_form = BetaForm::constant;
  Basis s_basis;                           // empty: (1, X, Z)
  std::optional<LearnerSpec> pT_learner;   // replaces the stacked logistic block
  std::optional<Vec> pT_override;          // fixed propensities, no estimation
  VarianceOptions variance;
  Target target = Target::population;
};

namespace detail {

struct RcsSystem {
  Mat xstar, mb, dmat, smat;
  Vec t, d, y;
  bool stacked_pT = true;
  Vec fixed_pT;

  Index kb() const { return xstar.cols(); }
  Index km() const { return mb.cols(); }
  Index ka() const { return stacked_pT ? smat.cols() : 0; }
  Index n_params() const { return kb() + km() + ka(); }
  Index n() const { return y.size(); }

  // Unclipped and clipped propensities.
  Vec raw_pT(const Vec& par) const {
    if (!stacked_pT) return fixed_pT;
    const Vec eta = smat * par.tail(ka());
    Vec p(n());
    for (Index i = 0; i < n(); ++i) p[i] = expit(eta[i]);
    return p;
  }

  static Vec clip(const Vec& p) { return p.cwiseMax(kPropensityClip).cwiseMin(1.0 - kPropensityClip); }

  struct Pieces {
    Vec pT, pi, e1, e0;  // e1 = T Y exp(-bD), e0 = (1-T) Y exp(-bD + m)
    std::vector<bool> clipped;
  };

  Pieces pieces(const Vec& par) const {
    const Vec bx = xstar * par.head(kb());
    const Vec m = mb * par.segment(kb(), km());
    if (!(bx.cwiseAbs().maxCoeff() <= kExponentLimit) || (m.size() > 0 && !(m.cwiseAbs().maxCoeff() <= kExponentLimit))) {
      throw Error(ErrorCode::Overflow, "exponent beyond +-700 in the pi residual");
    }
    Pieces p;
    const Vec raw = raw_pT(par);
    p.pT = clip(raw);
    p.clipped.resize(static_cast<std::size_t>(n()));
    for (Index i = 0; i < n(); ++i) p.clipped[static_cast<std::size_t>(i)] = p.pT[i] != raw[i];
    p.e1 = t.array() * y.array() * (-bx.array() * d.array()).exp();
    p.e0 = (1.0 - t.array()) * y.array() * (-bx.array() * d.array() + m.array()).exp();
    p.pi = p.e1.cwiseQuotient(p.pT) - p.e0.cwiseQuotient((1.0 - p.pT.array()).matrix());
    return p;
  }

  // Per-observation stacked contributions (n x (q + ka)).
  Mat contributions(const Vec& par) const {
    const auto p = pieces(par);
    Mat f(n(), dmat.cols() + ka());
    f.leftCols(dmat.cols()) = dmat.array().colwise() * p.pi.array();
    if (stacked_pT) {
      const Vec raw = raw_pT(par);
      f.rightCols(ka()) = smat.array().colwise() * (t - raw).array();
    }
    return f;
  }

  Mat pi_contributions(const Vec& par) const {
    return dmat.array().colwise() * pieces(par).pi.array();
  }

  Mat jacobian(const Vec& par) const {
    const auto p = pieces(par);
    const double nn = static_cast<double>(n());
    const Vec one_m = (1.0 - p.pT.array()).matrix();
    Mat g(n(), n_params());
    const Vec inner = (p.e1.cwiseProduct(d)).cwiseQuotient(p.pT) - (p.e0.cwiseProduct(d)).cwiseQuotient(one_m);
    for (Index j = 0; j < kb(); ++j) g.col(j) = -xstar.col(j).cwiseProduct(inner);
    const Vec base0 = -p.e0.cwiseQuotient(one_m);
    for (Index j = 0; j < km(); ++j) g.col(kb() + j) = base0.cwiseProduct(mb.col(j));
    Mat jac = Mat::Zero(dmat.cols() + ka(), n_params());
    if (stacked_pT) {
      const Vec raw = raw_pT(par);
      Vec dpi_dp(n());
      for (Index i = 0; i < n(); ++i) {
        const double pt = p.pT[i];
        const double w = raw[i] * (1.0 - raw[i]);
        dpi_dp[i] = p.clipped[static_cast<std::size_t>(i)]
                        ? 0.0
                        : (-p.e1[i] / (pt * pt) - p.e0[i] / ((1.0 - pt) * (1.0 - pt))) * w;
      }
      for (Index j = 0; j < ka(); ++j) g.col(kb() + km() + j) = dpi_dp.cwiseProduct(smat.col(j));
      const Vec w = (raw.array() * (1.0 - raw.array())).matrix();
      jac.bottomRightCorner(ka(), ka()) = -(smat.transpose() * (smat.array().colwise() * w.array()).matrix()) / nn;
    }
    jac.topRows(dmat.cols()) = dmat.transpose() * g / nn;
    return jac;
  }
};

}  // namespace detail

inline Estimate estimate_rcs_param(const RcsDataset& rcs, const MSpec& m_spec, const MomentSpec& d_spec,
                                   const RcsParamOptions& opt = {}) {
  if (rcs.y().minCoeff() < 0.0) throw Error(ErrorCode::NegativeOutcome, "multiplicative model needs nonnegative outcomes");
  const Basis beta_b = beta_basis(opt.beta_form, rcs.p());
  const Basis& m_b = m_spec.basis;
  if (m_b.uses_z()) throw Error(ErrorCode::InvalidArgument, "m(X) may not depend on Z");
  m_b.check(rcs.p());
  const Index n_bg = beta_b.size() + m_b.size();
  const Basis d_b = d_spec.d_basis.empty() ? default_moment_basis(n_bg, m_b, rcs.p()) : d_spec.d_basis;
  if (d_b.size() != n_bg) {
    throw Error(ErrorCode::InvalidArgument, "d(X,Z) must have exactly one function per (beta, gamma) parameter");
  }
  Basis s_b = opt.s_basis;
  if (s_b.empty()) {
    std::vector<std::string> names{"1"};
    for (Index k = 0; k < rcs.p(); ++k) names.push_back("x" + std::to_string(k + 1));
    names.push_back("z");
    s_b = Basis(names);
  }

  detail::RcsSystem sys;
  sys.xstar = beta_b.evaluate(rcs.x(), rcs.z());
  sys.mb = m_b.evaluate(rcs.x(), rcs.z());
  sys.dmat = d_b.evaluate(rcs.x(), rcs.z());
  sys.smat = s_b.evaluate(rcs.x(), rcs.z());
  sys.t = rcs.t();
  sys.d = rcs.d();
  sys.y = rcs.y();

  Estimate e;
  e.method = "param";
  e.spec = {Scale::multiplicative, opt.target, opt.beta_form};
  e.level = opt.level;
  e.n = rcs.n();
  auto& dg = e.diagnostics;
  dg["design"] = "rcs";

  // Propensity block.
  Vec alpha;
  if (opt.pT_override) {
    if (opt.pT_override->size() != rcs.n()) throw Error(ErrorCode::InvalidArgument, "pT override has wrong length");
    sys.stacked_pT = false;
    sys.fixed_pT = *opt.pT_override;
    dg["pT_model"] = "fixed";
    e.warnings.emplace_back("propensities supplied: their estimation is not reflected in the variance");
  } else if (opt.pT_learner) {
    sys.stacked_pT = false;
    const auto fit = fit_conditional_mean(append_column(rcs.x(), rcs.z()), rcs.t(), *opt.pT_learner);
    sys.fixed_pT = fit.predict(append_column(rcs.x(), rcs.z()));
    dg["pT_model"] = *opt.pT_learner;
    e.warnings.emplace_back("pT from a plug-in learner: its estimation is not reflected in the variance");
  } else {
    sys.stacked_pT = true;
    const Mat& s = sys.smat;
    auto score = [&](const Vec& a) -> Vec {
      const Vec eta = s * a;
      Vec r(s.rows());
      for (Index i = 0; i < s.rows(); ++i) r[i] = rcs.t()[i] - expit(eta[i]);
      return s.transpose() * r / static_cast<double>(s.rows());
    };
    auto score_jac = [&](const Vec& a, const Vec&) -> Mat {
      const Vec eta = s * a;
      Vec w(s.rows());
      for (Index i = 0; i < s.rows(); ++i) {
        const double p = expit(eta[i]);
        w[i] = p * (1.0 - p);
      }
      return -(s.transpose() * (s.array().colwise() * w.array()).matrix()) / static_cast<double>(s.rows());
    };
    auto unit = [](const Vec&) { return 1.0; };
    Vec a0 = Vec::Zero(s.cols());
    const auto r = damped_newton(score, score_jac, a0, unit);
    if (!r.converged) throw Error(ErrorCode::NonConvergence, "logistic model for P(T=1|Z,X) did not converge");
    alpha = r.x;
    dg["pT_model"] = {{"kind", "logistic"}, {"s_basis", s_b.names()}};
  }

  {
    Vec probe = Vec::Zero(sys.n_params());
    if (sys.stacked_pT) probe.tail(sys.ka()) = alpha;
    const Vec raw = sys.raw_pT(probe);
    Index clipped = 0;
    for (Index i = 0; i < raw.size(); ++i) {
      if (!(raw[i] > kPropensityClip && raw[i] < 1.0 - kPropensityClip - 1e-15)) ++clipped;
    }
    dg["clipped_propensities"] = clipped;
    if (clipped > 0) {
      e.warnings.push_back("propensities clipped to [0.001, 0.999] for " + std::to_string(clipped) + " observations");
    }
    if (static_cast<double>(clipped) > 0.01 * static_cast<double>(rcs.n())) {
      throw Error(ErrorCode::ExtremePropensity, "more than 1% of P(T=1|Z,X) values at the clipping bounds");
    }
  }

  // Solve the pi block for (beta, gamma) with the propensity parameters fixed.
  const Index kbg = n_bg;
  auto full = [&](const Vec& bg) {
    Vec par(sys.n_params());
    par.head(kbg) = bg;
    if (sys.stacked_pT) par.tail(sys.ka()) = alpha;
    return par;
  };
  auto f = [&](const Vec& bg) -> Vec {
    try {
      return sys.pi_contributions(full(bg)).colwise().mean().transpose();
    } catch (const Error&) {
      return Vec::Constant(d_b.size(), std::numeric_limits<double>::quiet_NaN());
    }
  };
  auto jac = [&](const Vec& bg, const Vec&) -> Mat { return sys.jacobian(full(bg)).topLeftCorner(d_b.size(), kbg); };
  auto scale = [&](const Vec& bg) {
    try {
      return sys.pi_contributions(full(bg)).cwiseAbs().colwise().mean().maxCoeff();
    } catch (const Error&) {
      return 0.0;
    }
  };

  std::vector<std::pair<std::string, Vec>> starts;
  Vec base = Vec::Zero(kbg);
  {
    const auto p = sys.pieces(full(base));
    const double s1 = p.e1.cwiseQuotient(p.pT).sum();
    const double s0 = p.e0.cwiseQuotient((1.0 - p.pT.array()).matrix()).sum();
    for (Index j = 0; j < m_b.size(); ++j)
      if (m_b[j].name() == "1" && s0 > 0 && s1 > 0) base[beta_b.size() + j] = std::log(s1 / s0);
  }
  starts.emplace_back("beta=0", base);
  try {
    Vec v = base;
    v[0] = solve_rcs_nocov(rcs.without_covariates()).beta_hat;
    starts.emplace_back("pilot", v);
  } catch (const Error&) {
  }

  std::optional<SolveResult> best;
  std::string used;
  nlohmann::json attempts = nlohmann::json::array();
  for (const auto& [label, x0] : starts) {
    if (!f(x0).allFinite()) continue;
    SolveResult r = damped_newton(f, jac, x0, scale);
    attempts.push_back({{"start", label}, {"converged", r.converged}, {"iterations", r.iterations}});
    if (!best || (r.converged && !best->converged)) {
      best = r;
      used = label;
    }
    if (r.converged) break;
  }
  dg["solver"] = {{"starts", attempts}, {"start_used", used}};
  if (!best || !best->converged) {
    if (best && best->rank_deficient) throw Error(ErrorCode::RankDeficientJacobian, "pi-moment Jacobian is singular");
    throw Error(ErrorCode::NonConvergence, "damped Newton did not solve the pi moments");
  }

  const Vec par = full(best->x);
  const Mat b = sys.jacobian(par);
  const Mat cov = sandwich(sys.contributions(par), b);

  std::vector<std::string> names = param_names(beta_b, m_b);
  if (sys.stacked_pT)
    for (const auto& t : s_b.names()) names.push_back("alpha[" + t + "]");
  for (Index j = 0; j < sys.n_params(); ++j) {
    e.coefficients.push_back({names[static_cast<std::size_t>(j)], par[j], std::sqrt(cov(j, j))});
  }
  e.covariance = cov;
  e.beta_hat = par[0];
  e.theta_hat = std::expm1(-par[0]);
  e.se = std::sqrt(cov(0, 0));
  e.set_wald_ci();
  dg["variance_method"] = "sandwich";
  dg["m_basis"] = m_b.names();
  dg["d_basis"] = d_b.names();
  dg["iterations"] = best->iterations;
  dg["moment_residual"] = best->residual.cwiseAbs().maxCoeff();

  if (opt.variance.bootstrap_B > 0) {
    RcsParamOptions inner = opt;
    inner.variance = {};
    const auto r = bootstrap_ci(
        rcs, [&](const RcsDataset& bs) { return estimate_rcs_param(bs, m_spec, d_spec, inner).beta_hat; },
        opt.variance.bootstrap_B, opt.variance.seed, opt.level, opt.variance.jobs);
    apply_bootstrap(e, r);
  }
  return e;
}

}  // namespace idid
