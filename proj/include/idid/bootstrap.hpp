#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "idid/data.hpp"
#include "idid/error.hpp"
#include "idid/estimate.hpp"
#include "idid/parallel.hpp"
#include "idid/rng.hpp"

namespace idid {

struct BootstrapResult {
  double se = 0.0;
  double ci_lo = 0.0;  // percentile interval
  double ci_hi = 0.0;
  double level = 0.95;
  std::size_t B = 0;
  std::size_t failures = 0;
  std::vector<double> draws;  // successful replications in replication order
};

inline nlohmann::json bootstrap_json(const BootstrapResult& r) {
  return {{"B", r.B},
          {"failures", r.failures},
          {"se", json_number(r.se)},
          {"percentile_ci", {json_number(r.ci_lo), json_number(r.ci_hi)}}};
}

// Nonparametric bootstrap over rows. Replication b draws its resample from a
// substream keyed on (seed, b), so results do not depend on `jobs`.
template <class Dataset, class Estimator>
BootstrapResult bootstrap_ci(const Dataset& data, Estimator&& estimator, std::size_t B, std::uint64_t seed,
                             double level, unsigned jobs = 1) {
  if (B < 50) throw Error(ErrorCode::InvalidArgument, "bootstrap needs B >= 50");
  z_critical(level);
  const Index n = data.n();
  std::vector<double> value(B, 0.0);
  std::vector<char> ok(B, 0);
  const RngStream streams(seed);
  parallel_for(B, jobs, [&](std::size_t b) {
    auto eng = streams.engine(b, Stream::Bootstrap);
    std::uniform_int_distribution<Index> pick(0, n - 1);
    std::vector<Index> rows(static_cast<std::size_t>(n));
    for (auto& r : rows) r = pick(eng);
    try {
      const double v = estimator(data.subset(rows));
      if (std::isfinite(v)) {
        value[b] = v;
        ok[b] = 1;
      }
    } catch (const Error&) {
    }
  });

  BootstrapResult out;
  out.B = B;
  out.level = level;
  for (std::size_t b = 0; b < B; ++b) {
    if (ok[b]) out.draws.push_back(value[b]);
  }
  out.failures = B - out.draws.size();
  if (static_cast<double>(out.failures) > 0.1 * static_cast<double>(B)) {
    throw Error(ErrorCode::TooManyFailures, std::to_string(out.failures) + " of " + std::to_string(B) +
                                                 " bootstrap replications failed");
  }
  const Vec v = Eigen::Map<const Vec>(out.draws.data(), static_cast<Index>(out.draws.size()));
  out.se = sample_sd(v);
  std::vector<double> sorted = out.draws;
  std::sort(sorted.begin(), sorted.end());
  out.ci_lo = quantile_sorted(sorted, (1.0 - level) / 2.0);
  out.ci_hi = quantile_sorted(sorted, 1.0 - (1.0 - level) / 2.0);
  return out;
}

// Replaces the analytic standard error by the bootstrap one; the reported CI
// stays in Wald form and the percentile interval goes to diagnostics.
inline void apply_bootstrap(Estimate& e, const BootstrapResult& r) {
  e.diagnostics["analytic_se"] = json_number(e.se);
  e.se = r.se;
  e.set_wald_ci();
  e.diagnostics["variance_method"] = "bootstrap";
  e.diagnostics["bootstrap"] = bootstrap_json(r);
}

}  // namespace idid
