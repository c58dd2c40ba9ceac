#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idid/data.hpp"
#include "idid/numerics.hpp"

namespace idid {

struct Coefficient {
  std::string name;
  double value = 0.0;
  double se = 0.0;
};

// Result of any estimator. beta_hat is on the difference scale for additive
// models and on the log-ratio scale for multiplicative ones.
struct Estimate {
  std::string method;
  EffectSpec spec;
  double beta_hat = 0.0;
  std::optional<double> theta_hat;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double level = 0.95;
  Index n = 0;
  std::vector<Coefficient> coefficients;  // full parameter vector, when there is one
  Mat covariance;                          // matching covariance, possibly empty
  std::vector<std::string> warnings;
  nlohmann::json diagnostics = nlohmann::json::object();

  void set_wald_ci() {
    const double zc = z_critical(level);
    ci_lo = beta_hat - zc * se;
    ci_hi = beta_hat + zc * se;
  }

  bool covers(double beta) const { return ci_lo <= beta && beta <= ci_hi; }

  std::string interpretation() const {
    const std::string who = spec.target == Target::treated ? "among the exposed" : "in the population";
    if (spec.scale == Scale::additive) return "average exposure effect " + who + " (difference scale)";
    return "average exposure effect " + who + " (log ratio scale)";
  }
};

inline nlohmann::json json_number(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

inline void to_json(nlohmann::json& j, const Estimate& e) {
  j = nlohmann::json::object();
  j["method"] = e.method;
  j["scale"] = std::string(to_string(e.spec.scale));
  j["target"] = std::string(to_string(e.spec.target));
  j["beta_form"] = std::string(to_string(e.spec.beta_form));
  j["interpretation"] = e.interpretation();
  j["estimate"] = json_number(e.beta_hat);
  j["se"] = json_number(e.se);
  j["ci"] = {json_number(e.ci_lo), json_number(e.ci_hi)};
  j["level"] = e.level;
  j["theta"] = e.theta_hat ? json_number(*e.theta_hat) : nlohmann::json(nullptr);
  j["n"] = e.n;
  if (!e.coefficients.empty()) {
    auto& arr = j["coefficients"] = nlohmann::json::array();
    for (const auto& c : e.coefficients)
      arr.push_back({{"name", c.name}, {"value", json_number(c.value)}, {"se", json_number(c.se)}});
  }
  if (e.covariance.size() > 0) {
    auto& rows = j["covariance"] = nlohmann::json::array();
    for (Index r = 0; r < e.covariance.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Index c = 0; c < e.covariance.cols(); ++c) row.push_back(json_number(e.covariance(r, c)));
      rows.push_back(row);
    }
  }
  j["warnings"] = e.warnings;
  j["diagnostics"] = e.diagnostics;
}

}  // namespace idid
