#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/tools/roots.hpp>

#include "idid/data.hpp"
#include "idid/error.hpp"

namespace idid {

// Largest exponent accepted before exp() is considered to overflow.
inline constexpr double kExponentLimit = 700.0;

inline double normal_quantile(double p) {
  static const boost::math::normal_distribution<double> std_normal(0.0, 1.0);
  return boost::math::quantile(std_normal, p);
}

// Two-sided critical value for a confidence level such as 0.95.
inline double z_critical(double level) {
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorCode::InvalidArgument, "level must lie in (0,1)");
  return normal_quantile(0.5 + level / 2.0);
}

inline double expit(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline double sample_variance(const Vec& v) {
  const Index n = v.size();
  if (n < 2) return 0.0;
  const double m = v.mean();
  return (v.array() - m).square().sum() / static_cast<double>(n - 1);
}

inline double sample_sd(const Vec& v) { return std::sqrt(sample_variance(v)); }

// Columns are variables; rows are observations. Divides by n.
inline Mat outer_mean(const Mat& f) {
  return (f.transpose() * f) / static_cast<double>(f.rows());
}

inline Mat sample_covariance(const Mat& f) {
  const Index n = f.rows();
  Mat c = f.rowwise() - f.colwise().mean();
  return (c.transpose() * c) / static_cast<double>(std::max<Index>(n - 1, 1));
}

// Percentile with linear interpolation between order statistics.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double h = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// ---------------------------------------------------------------------------
// Root finding in one dimension
// ---------------------------------------------------------------------------

// Refines a sign change of f on [a, b] to near machine precision.
template <class F>
double refine_root(F&& f, double a, double b, double fa, double fb) {
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  boost::math::tools::eps_tolerance<double> tol(std::numeric_limits<double>::digits - 3);
  std::uintmax_t max_iter = 200;
  const auto r = boost::math::tools::toms748_solve(f, a, b, fa, fb, tol, max_iter);
  return 0.5 * (r.first + r.second);
}

// Evaluates f on an increasing grid and refines every sign change. The values
// on the grid are returned so callers can report how the function behaved.
template <class F>
std::vector<double> roots_on_grid(F&& f, const std::vector<double>& grid, std::vector<double>* values = nullptr) {
  std::vector<double> fv(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) fv[i] = f(grid[i]);
  std::vector<double> roots;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    if (!std::isfinite(fv[i]) || !std::isfinite(fv[i + 1])) continue;
    if (fv[i] == 0.0) {
      roots.push_back(grid[i]);
    } else if ((fv[i] < 0.0) != (fv[i + 1] < 0.0) && fv[i + 1] != 0.0) {
      roots.push_back(refine_root(f, grid[i], grid[i + 1], fv[i], fv[i + 1]));
    }
  }
  if (!grid.empty() && fv.back() == 0.0) roots.push_back(grid.back());
  if (values) *values = std::move(fv);
  return roots;
}

// ---------------------------------------------------------------------------
// Multivariate estimating equations
// ---------------------------------------------------------------------------

template <class F>
Mat numeric_jacobian(F&& f, const Vec& x, const Vec* fx = nullptr) {
  const Vec f0 = fx ? *fx : f(x);
  Mat j(f0.size(), x.size());
  for (Index k = 0; k < x.size(); ++k) {
    const double h = 1e-6 * std::max(1.0, std::abs(x[k]));
    Vec xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    j.col(k) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return j;
}

struct SolveOptions {
  double tol = 1e-10;      // converged when max|f| <= tol * (1 + scale(x))
  int max_iter = 200;
  int max_halvings = 40;
  int polish_steps = 3;  // full Newton steps after certification, kept while they reduce |f|
};

struct SolveResult {
  Vec x;
  Vec residual;
  int iterations = 0;
  bool converged = false;
  bool least_squares = false;
  bool rank_deficient = false;
  std::vector<double> trace;  // residual max-norm per iteration
};

// Damped Newton for square systems and Gauss-Newton for over-identified ones.
// Each step is halved until the Euclidean residual norm decreases.
template <class F, class J, class S>
SolveResult damped_newton(F&& f, J&& jacobian, const Vec& x0, S&& scale, const SolveOptions& opt = {}) {
  SolveResult out;
  out.x = x0;
  Vec r = f(out.x);
  out.least_squares = r.size() > x0.size();
  auto certified = [&](const Vec& res, const Vec& x) {
    return res.allFinite() && res.cwiseAbs().maxCoeff() <= opt.tol * (1.0 + scale(x));
  };
  out.trace.push_back(r.cwiseAbs().maxCoeff());
  for (int it = 0; it < opt.max_iter; ++it) {
    out.iterations = it;
    if (!r.allFinite()) break;
    if (!out.least_squares && certified(r, out.x)) {
      out.converged = true;
      for (int k = 0; k < opt.polish_steps; ++k) {
        const Eigen::ColPivHouseholderQR<Mat> pq(jacobian(out.x, r));
        if (pq.rank() < x0.size()) break;
        const Vec x_new = out.x + pq.solve(-r);
        const Vec r_new = f(x_new);
        if (!r_new.allFinite() || r_new.norm() >= r.norm()) break;
        out.x = x_new;
        r = r_new;
        out.trace.push_back(r.cwiseAbs().maxCoeff());
      }
      break;
    }
    const Mat jac = jacobian(out.x, r);
    Eigen::ColPivHouseholderQR<Mat> qr(jac);
    if (qr.rank() < x0.size()) {
      out.rank_deficient = true;
      break;
    }
    const Vec step = qr.solve(-r);
    if (out.least_squares) {
      const double grad = (jac.transpose() * r).cwiseAbs().maxCoeff();
      if (grad <= opt.tol * (1.0 + scale(out.x)) * std::max(1.0, jac.cwiseAbs().maxCoeff())) {
        out.converged = true;
        break;
      }
    }
    const double norm0 = r.norm();
    double t = 1.0;
    bool improved = false;
    Vec x_new, r_new;
    for (int h = 0; h <= opt.max_halvings; ++h, t *= 0.5) {
      x_new = out.x + t * step;
      r_new = f(x_new);
      if (r_new.allFinite() && r_new.norm() < norm0) {
        improved = true;
        break;
      }
    }
    if (!improved) {
      // No decrease along the Newton direction: we are at a stationary point of
      // the residual norm, which is the answer for least-squares systems.
      if (out.least_squares) out.converged = true;
      else out.converged = certified(r, out.x);
      break;
    }
    const double move = (x_new - out.x).cwiseAbs().maxCoeff();
    out.x = x_new;
    r = r_new;
    out.trace.push_back(r.cwiseAbs().maxCoeff());
    if (out.least_squares && move <= 1e-14 * (1.0 + out.x.cwiseAbs().maxCoeff())) {
      out.converged = true;
      break;
    }
  }
  if (!out.converged && !out.least_squares) out.converged = certified(r, out.x);
  out.residual = r;
  return out;
}

// ---------------------------------------------------------------------------
// Nonnegative least squares (Lawson and Hanson active-set method)
// ---------------------------------------------------------------------------

inline Vec nnls(const Mat& a, const Vec& b, int max_iter = 500) {
  const Index k = a.cols();
  Vec x = Vec::Zero(k);
  std::vector<bool> passive(static_cast<std::size_t>(k), false);
  const double tol = 1e-12 * std::max(1.0, a.cwiseAbs().maxCoeff()) * std::max(1.0, b.cwiseAbs().maxCoeff()) *
                     static_cast<double>(std::max<Index>(a.rows(), 1));

  auto solve_passive = [&](Vec& z) {
    std::vector<Index> idx;
    for (Index j = 0; j < k; ++j)
      if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
    z = Vec::Zero(k);
    if (idx.empty()) return;
    Mat sub(a.rows(), static_cast<Index>(idx.size()));
    for (std::size_t c = 0; c < idx.size(); ++c) sub.col(static_cast<Index>(c)) = a.col(idx[c]);
    const Vec s = sub.colPivHouseholderQr().solve(b);
    for (std::size_t c = 0; c < idx.size(); ++c) z[idx[c]] = s[static_cast<Index>(c)];
  };

  for (int outer = 0; outer < max_iter; ++outer) {
    const Vec w = a.transpose() * (b - a * x);
    Index best = -1;
    double best_w = tol;
    for (Index j = 0; j < k; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && w[j] > best_w) {
        best_w = w[j];
        best = j;
      }
    }
    if (best < 0) break;
    passive[static_cast<std::size_t>(best)] = true;
    for (int inner = 0; inner < max_iter; ++inner) {
      Vec z;
      solve_passive(z);
      bool feasible = true;
      for (Index j = 0; j < k; ++j)
        if (passive[static_cast<std::size_t>(j)] && z[j] <= 0.0) feasible = false;
      if (feasible) {
        x = z;
        break;
      }
      double alpha = 1.0;
      for (Index j = 0; j < k; ++j) {
        if (passive[static_cast<std::size_t>(j)] && z[j] <= 0.0) alpha = std::min(alpha, x[j] / (x[j] - z[j]));
      }
      x += alpha * (z - x);
      for (Index j = 0; j < k; ++j) {
        if (passive[static_cast<std::size_t>(j)] && std::abs(x[j]) <= 1e-15) {
          passive[static_cast<std::size_t>(j)] = false;
          x[j] = 0.0;
        }
      }
    }
  }
  return x;
}

}  // namespace idid
