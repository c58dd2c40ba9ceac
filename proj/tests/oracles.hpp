#pragma once

// Independent reference computations for the tests. Nothing here calls the
// estimators; the cell means are raw loops, the ratio-equation root is a
// plain grid scan plus bisection, and population moments of the simulation
// designs come from numerical integration.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "idid/data.hpp"
#include "idid/simulation.hpp"

namespace oracle {

using idid::Index;

// mean[t][z] of Y_t * (1 + theta D_t) among rows with Z = z.
inline std::array<std::array<double, 2>, 2> cell_means(const idid::PanelDataset& p, double theta) {
  std::array<std::array<double, 2>, 2> sum{}, cnt{};
  for (Index i = 0; i < p.n(); ++i) {
    const int z = p.z()[i] > 0.5 ? 1 : 0;
    sum[0][z] += p.y0()[i] * (1.0 + theta * p.d0()[i]);
    sum[1][z] += p.y1()[i] * (1.0 + theta * p.d1()[i]);
    cnt[0][z] += 1.0;
    cnt[1][z] += 1.0;
  }
  for (int t = 0; t < 2; ++t)
    for (int z = 0; z < 2; ++z) sum[t][z] /= cnt[t][z];
  return sum;
}

inline std::array<std::array<double, 2>, 2> cell_means(const idid::RcsDataset& r, double theta) {
  std::array<std::array<double, 2>, 2> sum{}, cnt{};
  for (Index i = 0; i < r.n(); ++i) {
    const int z = r.z()[i] > 0.5 ? 1 : 0, t = r.t()[i] > 0.5 ? 1 : 0;
    sum[t][z] += r.y()[i] * (1.0 + theta * r.d()[i]);
    cnt[t][z] += 1.0;
  }
  for (int t = 0; t < 2; ++t)
    for (int z = 0; z < 2; ++z) sum[t][z] /= cnt[t][z];
  return sum;
}

// F11 F00 - F10 F01 in the theta parameterization.
template <class Data>
double ratio_gap(const Data& d, double theta) {
  const auto f = cell_means(d, theta);
  return f[1][1] * f[0][0] - f[1][0] * f[0][1];
}

// Every sign change of the ratio gap over theta in (-1 + 1e-9, 1e3], found by
// a 20000-point grid in log1p(theta) and refined by bisection.
template <class Data>
std::vector<double> brute_force_roots(const Data& d) {
  const int m = 20000;
  const double lo = std::log1p(-1.0 + 1e-9), hi = std::log1p(1e3);
  std::vector<double> roots;
  auto g = [&](double u) { return ratio_gap(d, std::expm1(u)); };
  double u_prev = lo, g_prev = g(lo);
  for (int k = 1; k <= m; ++k) {
    const double u = lo + (hi - lo) * k / m;
    const double gu = g(u);
    if (g_prev == 0.0) roots.push_back(std::expm1(u_prev));
    else if ((g_prev < 0) != (gu < 0) && gu != 0.0) {
      double a = u_prev, b = u, ga = g_prev;
      for (int it = 0; it < 200 && b - a > 1e-15 * (1 + std::abs(a)); ++it) {
        const double c = 0.5 * (a + b), gc = g(c);
        if ((gc < 0) == (ga < 0)) {
          a = c;
          ga = gc;
        } else {
          b = c;
        }
      }
      roots.push_back(std::expm1(0.5 * (a + b)));
    }
    u_prev = u;
    g_prev = gu;
  }
  return roots;
}

// ---------------------------------------------------------------------------
// Population moments of the simulation settings
// ---------------------------------------------------------------------------

// E f(U) for the setting's latent variable.
inline double expect_u(const idid::SimulationSetting& s, const std::function<double(double)>& f) {
  using boost::math::quadrature::gauss_kronrod;
  if (s.u_normal) {
    auto g = [&](double u) { return f(u) * std::exp(-0.5 * (u - 0.5) * (u - 0.5)) / std::sqrt(2.0 * M_PI); };
    return gauss_kronrod<double, 61>::integrate(g, 0.5 - 12.0, 0.5 + 12.0, 8, 1e-12);
  }
  return gauss_kronrod<double, 61>::integrate(f, 0.0, 1.0, 8, 1e-12);
}

inline double poisson_pmf(int k, double mu) { return std::exp(k * std::log(mu) - mu - std::lgamma(k + 1.0)); }

// P(Y = y | mean) for the outcome family of the setting.
inline double outcome_pmf(const idid::SimulationSetting& s, int y, double mean) {
  if (s.outcome == idid::OutcomeKind::count) return poisson_pmf(y, mean);
  const double p = std::min(mean, 1.0);
  return y == 1 ? p : (y == 0 ? 1.0 - p : 0.0);
}

struct CellMoments {
  double d0 = 0, y0 = 0, y0d0 = 0, d1 = 0, y1 = 0, y1d1 = 0;
  CellMoments& operator+=(const CellMoments& o) {
    d0 += o.d0, y0 += o.y0, y0d0 += o.y0d0, d1 += o.d1, y1 += o.y1, y1d1 += o.y1d1;
    return *this;
  }
  CellMoments operator*(double w) const { return {d0 * w, y0 * w, y0d0 * w, d1 * w, y1 * w, y1d1 * w}; }
};

inline double clipped_mean(const idid::SimulationSetting& s, double raw) {
  return s.outcome == idid::OutcomeKind::count ? raw : std::min(raw, 1.0);
}

// Conditional moments given (X = x, Z = z). Y0 and D0 are independent given
// U0, and D1 depends on U0 only through Y0.
inline CellMoments conditional_moments(const idid::SimulationSetting& s, double x, double z) {
  CellMoments m;
  m.d0 = expect_u(s, [&](double u) { return s.d0_prob(z, u, x); });
  m.y0 = expect_u(s, [&](double u) { return clipped_mean(s, s.y0_mean(z, u, x)); });
  m.y0d0 = expect_u(s, [&](double u) { return clipped_mean(s, s.y0_mean(z, u, x)) * s.d0_prob(z, u, x); });
  m.y1 = expect_u(s, [&](double u) { return clipped_mean(s, s.y1_mean(z, u, x)); });
  const int ymax = s.outcome == idid::OutcomeKind::count ? 60 : 1;
  for (int y = 0; y <= ymax; ++y) {
    const double py = expect_u(s, [&](double u) { return outcome_pmf(s, y, s.y0_mean(z, u, x)); });
    if (py < 1e-300) continue;
    m.d1 += py * expect_u(s, [&](double u) { return s.d1_prob(z, u, y, x); });
    m.y1d1 += py * expect_u(s, [&](double u) { return clipped_mean(s, s.y1_mean(z, u, x)) * s.d1_prob(z, u, y, x); });
  }
  return m;
}

// Support points and probabilities of X = min(Poisson(0.5) + 0.5, cap).
inline std::vector<std::pair<double, double>> x_support(const idid::SimulationSetting& s) {
  if (!s.has_covariate) return {{0.0, 1.0}};
  std::vector<std::pair<double, double>> out;
  double tail = 1.0;
  for (int k = 0;; ++k) {
    const double x = k + 0.5;
    if (x >= s.x_cap) {
      out.emplace_back(s.x_cap, tail);
      break;
    }
    const double p = poisson_pmf(k, 0.5);
    out.emplace_back(x, p);
    tail -= p;
  }
  return out;
}

// Moments given Z = z, marginalizing X over its conditional law given Z.
inline CellMoments moments_given_z(const idid::SimulationSetting& s, int z) {
  CellMoments acc;
  double mass = 0.0;
  for (const auto& [x, px] : x_support(s)) {
    const double pz = z == 1 ? s.z_prob(x) : 1.0 - s.z_prob(x);
    acc += conditional_moments(s, x, z) * (px * pz);
    mass += px * pz;
  }
  return acc * (1.0 / mass);
}

inline double prob_z1(const idid::SimulationSetting& s) {
  double p = 0.0;
  for (const auto& [x, px] : x_support(s)) p += px * s.z_prob(x);
  return p;
}

// Population nuisances with X empty and g = Z: a1 = E(Y0 D0 Z), a2 = E(Y0 Z),
// a3 = E(Y0 D0), a4 = E(Y0), a5 = E(Y1 D1), a6 = E(Y1).
inline idid::NuisanceValues population_nuisance(const idid::SimulationSetting& s, Index n) {
  const double p1 = prob_z1(s);
  const CellMoments m1 = moments_given_z(s, 1), m0 = moments_given_z(s, 0);
  CellMoments all = m1 * p1;
  all += m0 * (1.0 - p1);
  idid::NuisanceValues v;
  v.a1 = idid::Mat::Constant(n, 1, p1 * m1.y0d0);
  v.a2 = idid::Mat::Constant(n, 1, p1 * m1.y0);
  v.a3 = idid::Vec::Constant(n, all.y0d0);
  v.a4 = idid::Vec::Constant(n, all.y0);
  v.a5 = idid::Vec::Constant(n, all.y1d1);
  v.a6 = idid::Vec::Constant(n, all.y1);
  v.lambda = idid::Vec::Ones(n);
  return v;
}

// Per-observation oracle nuisances given X with g = Z: a1(x) = E(Y0 D0 Z | x),
// a2(x) = E(Y0 Z | x) and a3..a6 the Z-marginalized conditional means.
inline idid::NuisanceValues conditional_nuisance(const idid::SimulationSetting& s, const idid::PanelDataset& p) {
  const Index n = p.n();
  idid::NuisanceValues v;
  v.a1.resize(n, 1);
  v.a2.resize(n, 1);
  v.a3.resize(n);
  v.a4.resize(n);
  v.a5.resize(n);
  v.a6.resize(n);
  v.lambda = idid::Vec::Ones(n);
  std::vector<std::pair<double, std::array<double, 6>>> cache;
  for (Index i = 0; i < n; ++i) {
    const double x = p.p() > 0 ? p.x()(i, 0) : 0.0;
    auto it = std::find_if(cache.begin(), cache.end(), [&](const auto& c) { return c.first == x; });
    if (it == cache.end()) {
      const double pz = s.z_prob(x);
      const CellMoments m1 = conditional_moments(s, x, 1), m0 = conditional_moments(s, x, 0);
      CellMoments all = m1 * pz;
      all += m0 * (1.0 - pz);
      cache.push_back({x, {pz * m1.y0d0, pz * m1.y0, all.y0d0, all.y0, all.y1d1, all.y1}});
      it = std::prev(cache.end());
    }
    const auto& a = it->second;
    v.a1(i, 0) = a[0];
    v.a2(i, 0) = a[1];
    v.a3[i] = a[2];
    v.a4[i] = a[3];
    v.a5[i] = a[4];
    v.a6[i] = a[5];
  }
  return v;
}

}  // namespace oracle
