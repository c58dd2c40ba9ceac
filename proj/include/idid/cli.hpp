#pragma once

// Command-line front end. run() is callable in-process so tests can drive it
// without spawning a shell.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "idid/data.hpp"
#include "idid/error.hpp"
#include "idid/estimate.hpp"
#include "idid/nuisance.hpp"
#include "idid/panel_nocov.hpp"
#include "idid/panel_nonparam.hpp"
#include "idid/panel_param.hpp"
#include "idid/repeated_cs.hpp"
#include "idid/report.hpp"
#include "idid/simulation.hpp"
#include "idid/version.hpp"

namespace idid::cli {

struct RunConfig {
  std::string command;
  std::string design = "panel";
  std::string scale = "multiplicative";
  std::string target = "population";
  std::string method;  // empty: chosen from design, scale and covariates
  std::string beta_form = "constant";
  std::string input;
  std::string output;
  std::vector<std::string> covariates;
  std::string m_spec;   // JSON list of basis terms
  std::string d_spec;   // JSON list of basis terms
  std::string learner;  // JSON LearnerSpec
  int folds = 5;
  bool no_crossfit = false;
  std::size_t bootstrap = 0;
  std::uint64_t seed = 1;
  double level = 0.95;
  unsigned jobs = 1;
  // simulate
  int setting = 1;
  std::vector<Index> n{5000};
  std::size_t reps = 0;  // 0: 200 for simulate, 1 for replicate-thin
  std::vector<std::string> approaches{"nocov"};
  std::string csv;
  std::string svg;
  // replicate-thin
  double beta = -1.27;
  Index n0 = 1656;
  Index n1 = 15234;
};

// Distinguishes usage errors (exit 1) from estimation failures (exit 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string output_path(const std::string& path) {
  if (path.empty()) return path;
  const char* dir = std::getenv("IDID_OUTPUT_DIR");
  const std::filesystem::path p(path);
  if (dir && *dir && p.is_relative()) {
    std::filesystem::create_directories(dir);
    return (std::filesystem::path(dir) / p).string();
  }
  return path;
}

inline void emit(const nlohmann::json& j, const std::string& path, std::ostream& out) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty()) {
    out << text;
    return;
  }
  write_text_file(output_path(path), text);
}

inline Basis parse_basis(const std::string& text, const std::string& flag) {
  try {
    return nlohmann::json::parse(text).get<Basis>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(flag + ": " + e.what());
  } catch (const Error& e) {
    throw UsageError(flag + ": " + e.what());
  }
}

inline LearnerSpec parse_learner(const std::string& text, const LearnerSpec& fallback) {
  if (text.empty()) return fallback;
  try {
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) return nlohmann::json(text).get<LearnerSpec>();
    return j.get<LearnerSpec>();
  } catch (const std::exception& e) {
    throw UsageError(std::string("--learner: ") + e.what());
  }
}

inline std::string resolve_method(const RunConfig& c) {
  if (!c.method.empty()) return c.method;
  if (c.scale == "additive") return "wald";
  if (c.covariates.empty()) return "quadratic";
  return c.design == "panel" ? "nonparam" : "param";
}

inline void check_compatibility(const RunConfig& c, const std::string& method) {
  if (c.input.empty()) throw UsageError("estimate needs --input");
  if (method == "wald" && (c.scale != "additive" || c.design != "panel")) {
    throw UsageError("method wald requires --scale additive and --design panel");
  }
  if (c.scale == "additive" && method != "wald") throw UsageError("the additive scale is estimated by method wald");
  if (method == "quadratic" && !c.covariates.empty()) throw UsageError("method quadratic takes no covariates");
  if (method == "nonparam" && c.design != "panel") throw UsageError("method nonparam requires --design panel");
  if (c.beta_form == "linear_in_x" && (method == "wald" || method == "quadratic")) {
    throw UsageError("--beta-form linear_in_x needs method param or nonparam");
  }
  if (c.bootstrap > 0 && c.bootstrap < 50) throw UsageError("--bootstrap needs at least 50 replications");
  if (c.folds < 2) throw UsageError("--folds must be at least 2");
}

inline nlohmann::json base_document(const std::string& command) {
  return nlohmann::json{{"schema", kSchema}, {"version", kVersion}, {"command", command}};
}

inline nlohmann::json run_estimate(const RunConfig& c) {
  const std::string method = resolve_method(c);
  check_compatibility(c, method);
  const EffectSpec spec{c.scale == "additive" ? Scale::additive : Scale::multiplicative,
                        c.target == "treated" ? Target::treated : Target::population,
                        c.beta_form == "constant" ? BetaForm::constant : BetaForm::linear_in_x};
  const VarianceOptions vopt{c.bootstrap, c.seed, c.jobs};
  const LearnerSpec learner = parse_learner(c.learner, LearnerSpec::basis(2, true));

  nlohmann::json echo{{"design", c.design},  {"scale", c.scale},     {"target", c.target},
                      {"method", method},    {"beta_form", c.beta_form}, {"input", c.input},
                      {"covariates", c.covariates}, {"bootstrap", c.bootstrap}, {"seed", c.seed},
                      {"level", c.level},    {"jobs", c.jobs}};

  Estimate e;
  nlohmann::json validation;
  auto check = [&](const ValidationReport& r) {
    validation = r;
    if (!r.accepted()) {
      std::string what = "input rejected:";
      for (const auto& f : r.fatal) what += " " + f;
      throw Error(ErrorCode::ValidationFailed, what);
    }
  };

  Basis m_basis{"1"};
  for (std::size_t k = 0; k < c.covariates.size(); ++k) m_basis.push_back("x" + std::to_string(k + 1));
  if (!c.m_spec.empty()) m_basis = parse_basis(c.m_spec, "--m-spec");
  Basis d_basis;
  if (!c.d_spec.empty()) d_basis = parse_basis(c.d_spec, "--d-spec");
  const Index p = static_cast<Index>(c.covariates.size());
  const Index n_beta = spec.beta_form == BetaForm::constant ? 1 : 1 + p;

  if (c.design == "panel") {
    const PanelDataset data = load_panel_csv(c.input, c.covariates);
    check(validate(data, spec));
    if (method == "wald") {
      e = wald_additive(data, c.level, vopt, spec.target);
    } else if (method == "quadratic") {
      e = solve_multiplicative_nocov(data, c.level, vopt, spec.target);
    } else if (method == "param") {
      ParamOptions po;
      po.level = c.level;
      po.variance = vopt;
      po.target = spec.target;
      const Basis d_eff = d_basis.empty() ? default_moment_basis(n_beta + m_basis.size(), m_basis, p) : d_basis;
      echo["m_spec"] = m_basis;
      echo["d_spec"] = d_eff;
      e = estimate_param(data, MSpec{m_basis, {}}, spec.beta_form, MomentSpec{d_eff}, po);
    } else {
      echo["learner"] = learner;
      echo["folds"] = c.folds;
      echo["crossfit"] = !c.no_crossfit;
      if (spec.beta_form == BetaForm::linear_in_x) {
        ModifierOptions mo;
        mo.learner = learner;
        mo.Q = c.folds;
        mo.seed = c.seed;
        mo.level = c.level;
        mo.crossfit = !c.no_crossfit;
        mo.jobs = c.jobs;
        e = estimate_nonparam_modifiers(data, mo).as_estimate(spec.target);
      } else {
        NonparamOptions no;
        no.learner = learner;
        no.Q = c.folds;
        no.seed = c.seed;
        no.level = c.level;
        no.crossfit = !c.no_crossfit;
        no.jobs = c.jobs;
        no.variance = vopt;
        no.target = spec.target;
        e = estimate_nonparam(data, no);
      }
    }
  } else {
    const RcsDataset data = load_rcs_csv(c.input, c.covariates);
    check(validate(data, spec));
    if (method == "quadratic") {
      e = solve_rcs_nocov(data, c.level, vopt, spec.target);
    } else {
      RcsParamOptions ro;
      ro.level = c.level;
      ro.beta_form = spec.beta_form;
      ro.variance = vopt;
      ro.target = spec.target;
      if (!c.learner.empty()) {
        ro.pT_learner = learner;
        echo["learner"] = learner;
      }
      const Basis d_eff = d_basis.empty() ? default_moment_basis(n_beta + m_basis.size(), m_basis, p) : d_basis;
      echo["m_spec"] = m_basis;
      echo["d_spec"] = d_eff;
      e = estimate_rcs_param(data, MSpec{m_basis, {}}, MomentSpec{d_eff}, ro);
    }
  }

  nlohmann::json doc = base_document("estimate");
  const nlohmann::json ej = e;
  for (auto it = ej.begin(); it != ej.end(); ++it) doc[it.key()] = it.value();
  doc["validation"] = validation;
  doc["config"] = echo;
  return doc;
}

inline std::vector<Approach> parse_approaches(const std::vector<std::string>& names) {
  std::vector<Approach> out;
  for (const auto& s : names) {
    try {
      out.push_back(approach_from_string(s));
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

inline nlohmann::json run_simulate(const RunConfig& c) {
  if (c.setting < 1 || c.setting > 4) throw UsageError("--setting must be 1, 2, 3 or 4");
  for (Index n : c.n)
    if (n < 10) throw UsageError("--n values must be at least 10");
  StudyConfig sc;
  sc.setting = c.setting;
  sc.n_list = c.n;
  sc.reps = c.reps == 0 ? 200 : c.reps;
  sc.approaches = parse_approaches(c.approaches);
  for (auto a : sc.approaches) {
    if (a != Approach::nocov && !SimulationSetting::get(c.setting).has_covariate) {
      throw UsageError("approach " + std::string(to_string(a)) + " needs --setting 3 or 4");
    }
  }
  sc.master_seed = c.seed;
  sc.jobs = c.jobs;
  sc.learner = parse_learner(c.learner, LearnerSpec::basis(2, true));
  sc.crossfit = !c.no_crossfit;
  sc.folds = c.folds;
  sc.level = c.level;
  const StudyReport report = run_study(sc);
  if (!c.csv.empty()) write_study_csv(report, output_path(c.csv));
  if (!c.svg.empty()) write_text_file(output_path(c.svg), render_study_svg(report));
  nlohmann::json doc = base_document("simulate");
  doc["report"] = to_json(report);
  doc["config"] = to_json(sc);
  return doc;
}

inline nlohmann::json run_replicate_thin(const RunConfig& c) {
  const std::size_t reps = c.reps == 0 ? 1 : c.reps;
  const PublishedMarginals marginals;
  nlohmann::json runs = nlohmann::json::array();
  PlantedTable table;
  std::size_t covered = 0, ok = 0;
  std::vector<double> estimates;
  for (std::size_t r = 0; r < reps; ++r) {
    const std::uint64_t seed = reps == 1 ? c.seed : derive_seed(c.seed, r, 0);
    const RcsDataset data = generate_rcs_planted(marginals, c.beta, c.n0, c.n1, seed, &table);
    nlohmann::json run{{"seed", seed}};
    try {
      const Estimate e = solve_rcs_nocov(data, c.level);
      run["estimate"] = json_number(e.beta_hat);
      run["se"] = json_number(e.se);
      run["ci"] = {json_number(e.ci_lo), json_number(e.ci_hi)};
      run["covered"] = e.covers(c.beta);
      run["theta"] = e.theta_hat ? json_number(*e.theta_hat) : nlohmann::json(nullptr);
      run["diagnostics"] = e.diagnostics;
      covered += e.covers(c.beta) ? 1 : 0;
      ++ok;
      estimates.push_back(e.beta_hat);
    } catch (const Error& e) {
      if (reps == 1) throw;
      run["error"] = e.what();
    }
    runs.push_back(run);
  }
  nlohmann::json doc = base_document("replicate-thin");
  doc["planted_beta"] = c.beta;
  doc["planted_table"] = table.to_json();
  if (reps == 1) {
    for (auto it = runs[0].begin(); it != runs[0].end(); ++it) doc[it.key()] = it.value();
  } else {
    doc["runs"] = runs;
    nlohmann::json summary{{"successes", ok}, {"coverage", ok ? static_cast<double>(covered) / static_cast<double>(ok) : 0.0}};
    if (estimates.size() >= 2) {
      const Vec v = Eigen::Map<const Vec>(estimates.data(), static_cast<Index>(estimates.size()));
      summary["mean_estimate"] = v.mean();
      summary["se_mean_estimate"] = sample_sd(v) / std::sqrt(static_cast<double>(v.size()));
    }
    doc["summary"] = summary;
  }
  doc["config"] = {{"beta", c.beta}, {"n0", c.n0}, {"n1", c.n1}, {"seed", c.seed}, {"reps", reps}, {"level", c.level}};
  return doc;
}

inline void report_error(std::ostream& err, const std::string& code, const std::string& message) {
  err << nlohmann::json{{"schema", kSchema}, {"error", {{"code", code}, {"message", message}}}}.dump() << "\n";
}

// Returns the process exit status: 0 success, 1 usage error, 2 estimation failure.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  RunConfig c;
  CLI::App app{"Instrumented difference-in-differences under structural mean models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  auto common = [&](CLI::App* s) {
    s->add_option("--seed", c.seed, "master seed for all randomness")->capture_default_str();
    s->add_option("--level", c.level, "confidence level")->check(CLI::Range(0.5, 0.9999))->capture_default_str();
    s->add_option("--output,-o", c.output, "JSON result path (stdout when omitted)");
    s->add_option("--jobs,-j", c.jobs, "worker threads (0 = all cores)")->capture_default_str();
  };

  auto* est = app.add_subcommand("estimate", "estimate the exposure effect from a CSV file");
  est->add_option("--design", c.design)->check(CLI::IsMember({"panel", "rcs"}))->capture_default_str();
  est->add_option("--scale", c.scale)->check(CLI::IsMember({"additive", "multiplicative"}))->capture_default_str();
  est->add_option("--target", c.target)->check(CLI::IsMember({"population", "treated"}))->capture_default_str();
  est->add_option("--method", c.method)->check(CLI::IsMember({"wald", "quadratic", "param", "nonparam"}));
  est->add_option("--beta-form", c.beta_form)->check(CLI::IsMember({"constant", "linear_in_x"}))->capture_default_str();
  est->add_option("--input,-i", c.input, "CSV input")->check(CLI::ExistingFile);
  est->add_option("--covariates", c.covariates, "covariate column names")->delimiter(',');
  est->add_option("--m-spec", c.m_spec, "JSON list of basis terms for m(X)");
  est->add_option("--d-spec", c.d_spec, "JSON list of basis terms for d(X,Z)");
  est->add_option("--learner", c.learner, "JSON learner spec or kind name");
  est->add_option("--folds", c.folds)->capture_default_str();
  est->add_flag("--no-crossfit", c.no_crossfit, "fit nuisances on the full sample");
  est->add_option("--bootstrap", c.bootstrap, "bootstrap replications (0 = analytic variance)")->capture_default_str();
  common(est);

  auto* sim = app.add_subcommand("simulate", "Monte Carlo study on a simulation setting");
  sim->add_option("--setting", c.setting)->capture_default_str();
  sim->add_option("--n", c.n, "sample sizes")->delimiter(',');
  sim->add_option("--reps", c.reps, "replications per sample size (default 200)");
  sim->add_option("--approaches", c.approaches, "nocov, A1, A2, A3")->delimiter(',');
  sim->add_option("--learner", c.learner, "JSON learner spec for A3");
  sim->add_option("--folds", c.folds)->capture_default_str();
  sim->add_flag("--no-crossfit", c.no_crossfit, "fit A3 nuisances on the full sample");
  sim->add_option("--csv", c.csv, "tidy per-replication CSV path");
  sim->add_option("--svg", c.svg, "summary figure path");
  common(sim);

  auto* thin = app.add_subcommand("replicate-thin", "planted-truth replication with published marginals");
  thin->add_option("--beta", c.beta)->capture_default_str();
  thin->add_option("--n0", c.n0)->capture_default_str();
  thin->add_option("--n1", c.n1)->capture_default_str();
  thin->add_option("--reps", c.reps, "seeded runs (default 1)");
  common(thin);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, "UsageError", e.what());
    return 1;
  }

  try {
    nlohmann::json doc;
    if (*est) {
      c.command = "estimate";
      doc = run_estimate(c);
    } else if (*sim) {
      c.command = "simulate";
      doc = run_simulate(c);
    } else {
      c.command = "replicate-thin";
      doc = run_replicate_thin(c);
    }
    emit(doc, c.output, out);
    return 0;
  } catch (const UsageError& e) {
    report_error(err, "UsageError", e.what());
    return 1;
  } catch (const Error& e) {
    const bool usage = e.code() == ErrorCode::InvalidArgument || e.code() == ErrorCode::IoError;
    report_error(err, std::string(to_string(e.code())), e.what());
    return usage ? 1 : 2;
  } catch (const std::exception& e) {
    report_error(err, "InternalError", e.what());
    return 2;
  }
}

}  // namespace idid::cli
