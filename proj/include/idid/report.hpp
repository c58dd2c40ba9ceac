#pragma once

// Serialization of simulation studies: JSON summary, tidy CSV of every
// replication and an SVG figure with root-n bias, variance ratio and coverage.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idid/data.hpp"
#include "idid/estimate.hpp"
#include "idid/numerics.hpp"
#include "idid/simulation.hpp"

namespace idid {

inline nlohmann::json to_json(const StudyConfig& c) {
  nlohmann::json j;
  j["setting"] = c.setting;
  j["n"] = c.n_list;
  j["reps"] = c.reps;
  std::vector<std::string> a;
  for (auto x : c.approaches) a.emplace_back(to_string(x));
  j["approaches"] = a;
  j["seed"] = c.master_seed;
  j["jobs"] = c.jobs;
  j["learner"] = c.learner;
  j["crossfit"] = c.crossfit;
  j["folds"] = c.folds;
  j["level"] = c.level;
  return j;
}

inline nlohmann::json to_json(const CellSummary& c) {
  nlohmann::json j;
  j["n"] = c.n;
  j["approach"] = std::string(to_string(c.approach));
  j["status"] = c.status;
  j["failures"] = c.failures;
  if (c.metrics) {
    const auto& m = *c.metrics;
    j["successes"] = m.successes;
    j["mean_root_n_bias"] = json_number(m.mean_root_n_bias);
    j["se_mean_root_n_bias"] = json_number(m.se_mean_root_n_bias);
    j["mean_variance_estimate"] = json_number(m.mean_variance_estimate);
    j["empirical_variance"] = json_number(m.empirical_variance);
    j["variance_ratio"] = m.variance_ratio ? json_number(*m.variance_ratio) : nlohmann::json(nullptr);
    j["coverage"] = json_number(m.coverage);
    nlohmann::json rb = nlohmann::json::array();
    for (double v : m.root_n_bias) rb.push_back(json_number(v));
    j["root_n_bias"] = rb;
  } else {
    j["successes"] = 0;
  }
  return j;
}

inline nlohmann::json to_json(const StudyReport& r) {
  nlohmann::json j;
  j["config"] = to_json(r.config);
  j["beta_true"] = r.beta_true;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) cells.push_back(to_json(c));
  j["cells"] = cells;
  j["status"] = r.all_cells_ok() ? "ok" : "degraded";
  return j;
}

inline const std::vector<std::string>& study_csv_header() {
  static const std::vector<std::string> h{"setting", "n",     "approach", "rep",     "status", "beta_hat",
                                          "se",      "ci_lo", "ci_hi",    "covered", "error"};
  return h;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

inline void write_study_csv(const StudyReport& r, std::ostream& os) {
  const auto& h = study_csv_header();
  for (std::size_t k = 0; k < h.size(); ++k) os << (k ? "," : "") << h[k];
  os << "\n";
  for (const auto& rec : r.records) {
    os << r.config.setting << ',' << rec.n << ',' << to_string(rec.approach) << ',' << rec.rep << ','
       << (rec.ok ? "ok" : "failed") << ',';
    if (rec.ok) {
      os << csv::format_number(rec.beta_hat) << ',' << csv::format_number(rec.se) << ','
         << csv::format_number(rec.ci_lo) << ',' << csv::format_number(rec.ci_hi) << ',' << (rec.covered ? 1 : 0);
    } else {
      os << ",,,,";
    }
    os << ',' << csv_escape(rec.error) << "\n";
  }
}

inline void write_study_csv(const StudyReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  write_study_csv(r, os);
}

// ---------------------------------------------------------------------------
// SVG figure
// ---------------------------------------------------------------------------

namespace detail {

struct Panel {
  double x0, y0, w, h;
  double lo, hi;
  double px(std::size_t k, std::size_t count) const {
    return x0 + w * (static_cast<double>(k) + 0.5) / static_cast<double>(std::max<std::size_t>(count, 1));
  }
  double py(double v) const {
    const double c = std::clamp(v, lo, hi);
    return y0 + h - h * (c - lo) / (hi - lo);
  }
};

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

inline const char* colour(Approach a) {
  switch (a) {
    case Approach::nocov: return "#4d4d4d";
    case Approach::A1: return "#d95f02";
    case Approach::A2: return "#1b9e77";
    case Approach::A3: return "#7570b3";
  }
  return "#000000";
}

inline void axis(std::ostream& os, const Panel& p, const std::string& title, double ref) {
  os << "<rect x='" << p.x0 << "' y='" << p.y0 << "' width='" << p.w << "' height='" << p.h
     << "' fill='none' stroke='#999'/>\n";
  os << "<text x='" << p.x0 + p.w / 2 << "' y='" << p.y0 - 8 << "' text-anchor='middle' font-size='13'>" << title
     << "</text>\n";
  for (double v : {p.lo, ref, p.hi}) {
    os << "<text x='" << p.x0 - 4 << "' y='" << p.py(v) + 4 << "' text-anchor='end' font-size='10'>" << fmt(v)
       << "</text>\n";
  }
  os << "<line x1='" << p.x0 << "' x2='" << p.x0 + p.w << "' y1='" << p.py(ref) << "' y2='" << p.py(ref)
     << "' stroke='#c00' stroke-dasharray='4 3'/>\n";
}

}  // namespace detail

inline std::string render_study_svg(const StudyReport& r) {
  using detail::Panel;
  const auto& cells = r.cells;
  const std::size_t m = cells.size();
  const double width = 960, height = 380;
  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
     << "' font-family='sans-serif'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";

  double blo = -1.0, bhi = 1.0;
  for (const auto& c : cells) {
    if (!c.metrics) continue;
    for (double v : c.metrics->root_n_bias) {
      if (!std::isfinite(v)) continue;
      blo = std::min(blo, v);
      bhi = std::max(bhi, v);
    }
  }
  double vhi = 2.0;
  for (const auto& c : cells)
    if (c.metrics && c.metrics->variance_ratio && std::isfinite(*c.metrics->variance_ratio))
      vhi = std::max(vhi, std::min(*c.metrics->variance_ratio * 1.1, 10.0));

  const Panel pb{60, 40, 260, 270, blo, bhi};
  const Panel pv{380, 40, 260, 270, 0.0, vhi};
  const Panel pc{700, 40, 240, 270, 0.5, 1.0};
  detail::axis(os, pb, "root-n bias", 0.0);
  detail::axis(os, pv, "variance ratio", 1.0);
  detail::axis(os, pc, "coverage", r.config.level);

  for (std::size_t k = 0; k < m; ++k) {
    const auto& c = cells[k];
    const std::string label = std::string(to_string(c.approach)) + " n=" + std::to_string(c.n);
    for (const Panel* p : {&pb, &pv, &pc}) {
      os << "<text transform='translate(" << p->px(k, m) << "," << p->y0 + p->h + 12
         << ") rotate(35)' font-size='9'>" << label << "</text>\n";
    }
    if (!c.metrics) continue;
    const auto& met = *c.metrics;
    std::vector<double> s;
    for (double v : met.root_n_bias)
      if (std::isfinite(v)) s.push_back(v);
    std::sort(s.begin(), s.end());
    if (!s.empty()) {
      const double x = pb.px(k, m), bw = std::min(24.0, pb.w / static_cast<double>(m) * 0.6);
      const double q1 = quantile_sorted(s, 0.25), q2 = quantile_sorted(s, 0.5), q3 = quantile_sorted(s, 0.75);
      const double iqr = q3 - q1;
      const double wl = *std::lower_bound(s.begin(), s.end(), q1 - 1.5 * iqr);
      const double wh = *(std::upper_bound(s.begin(), s.end(), q3 + 1.5 * iqr) - 1);
      os << "<line x1='" << x << "' x2='" << x << "' y1='" << pb.py(wl) << "' y2='" << pb.py(wh)
         << "' stroke='" << detail::colour(c.approach) << "'/>\n";
      os << "<rect x='" << x - bw / 2 << "' y='" << pb.py(q3) << "' width='" << bw << "' height='"
         << std::max(1.0, pb.py(q1) - pb.py(q3)) << "' fill='" << detail::colour(c.approach)
         << "' fill-opacity='0.35' stroke='" << detail::colour(c.approach) << "'/>\n";
      os << "<line x1='" << x - bw / 2 << "' x2='" << x + bw / 2 << "' y1='" << pb.py(q2) << "' y2='" << pb.py(q2)
         << "' stroke='black'/>\n";
    }
    if (met.variance_ratio && std::isfinite(*met.variance_ratio)) {
      os << "<circle cx='" << pv.px(k, m) << "' cy='" << pv.py(*met.variance_ratio) << "' r='4' fill='"
         << detail::colour(c.approach) << "'/>\n";
    }
    os << "<circle cx='" << pc.px(k, m) << "' cy='" << pc.py(met.coverage) << "' r='4' fill='"
       << detail::colour(c.approach) << "'/>\n";
  }
  os << "<text x='10' y='" << height - 8 << "' font-size='10'>setting " << r.config.setting << ", "
     << r.config.reps << " replications, beta = " << detail::fmt(r.beta_true) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
  os << text;
}

}  // namespace idid
