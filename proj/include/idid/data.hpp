#pragma once

// Dataset representations shared by every estimator.
//
// Panel (longitudinal) records carry (Z, X, D0, Y0, D1, Y1); repeated
// cross-section records carry (Z, X, T, D, Y). Both are stored column-wise and
// are immutable after construction, so a dataset can be shared across threads.
//
// CSV interchange schema (header required, '.' decimal separator):
//   panel: z,d0,y0,d1,y1[,x1..xp]
//   rcs:   z,t,d,y[,x1..xp]
// Covariate columns are selected by name; any other extra columns are ignored.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "idid/error.hpp"

namespace idid {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class Scale { additive, multiplicative };
enum class Target { population, treated };
enum class BetaForm { constant, linear_in_x };

inline std::string_view to_string(Scale s) {
  return s == Scale::additive ? "additive" : "multiplicative";
}
inline std::string_view to_string(Target t) {
  return t == Target::population ? "population" : "treated";
}
inline std::string_view to_string(BetaForm b) {
  return b == BetaForm::constant ? "constant" : "linear_in_x";
}

// Selecting the treated target changes only how results are labelled; the
// identifying moment conditions and therefore the numbers are the same.
struct EffectSpec {
  Scale scale = Scale::multiplicative;
  Target target = Target::population;
  BetaForm beta_form = BetaForm::constant;
};

struct PanelObservation {
  double z = 0.0;
  std::vector<double> x;
  double d0 = 0.0;
  double y0 = 0.0;
  double d1 = 0.0;
  double y1 = 0.0;
};

struct RcsObservation {
  double z = 0.0;
  std::vector<double> x;
  double t = 0.0;
  double d = 0.0;
  double y = 0.0;
};

namespace detail {

inline bool is_binary(double v) { return v == 0.0 || v == 1.0; }

inline void require_binary(const Vec& v, const char* name) {
  for (Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw Error(ErrorCode::MissingValue, std::string("non-finite value in column ") + name);
    }
    if (!is_binary(v[i])) {
      throw Error(ErrorCode::NonBinaryField,
                  std::string("column ") + name + " must be 0/1 (row " + std::to_string(i + 1) + ")");
    }
  }
}

inline void require_finite(const Vec& v, const char* name) {
  for (Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw Error(ErrorCode::MissingValue, std::string("non-finite value in column ") + name);
    }
  }
}

inline void require_finite(const Mat& m) {
  if (!m.allFinite()) throw Error(ErrorCode::MissingValue, "non-finite covariate value");
}

inline std::vector<std::string> default_covariate_names(Index p) {
  std::vector<std::string> names;
  for (Index j = 0; j < p; ++j) names.push_back("x" + std::to_string(j + 1));
  return names;
}

template <class Dataset>
Mat gather_rows(const Mat& x, std::span<const Index> rows) {
  Mat out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = x.row(rows[r]);
  return out;
}

inline Vec gather(const Vec& v, std::span<const Index> rows) {
  Vec out(static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out[static_cast<Index>(r)] = v[rows[r]];
  return out;
}

}  // namespace detail

class PanelDataset {
 public:
  PanelDataset(Vec z, Mat x, Vec d0, Vec y0, Vec d1, Vec y1, std::vector<std::string> covariate_names = {})
      : z_(std::move(z)), x_(std::move(x)), d0_(std::move(d0)), y0_(std::move(y0)), d1_(std::move(d1)),
        y1_(std::move(y1)), names_(std::move(covariate_names)) {
    const Index n = z_.size();
    if (n < 1) throw Error(ErrorCode::TooFewRows, "panel dataset needs at least one row");
    if (x_.rows() != n || d0_.size() != n || y0_.size() != n || d1_.size() != n || y1_.size() != n) {
      throw Error(ErrorCode::InvalidArgument, "panel columns have inconsistent lengths");
    }
    if (names_.empty()) names_ = detail::default_covariate_names(x_.cols());
    if (static_cast<Index>(names_.size()) != x_.cols()) {
      throw Error(ErrorCode::InvalidArgument, "covariate name count does not match covariate columns");
    }
    detail::require_binary(z_, "z");
    detail::require_binary(d0_, "d0");
    detail::require_binary(d1_, "d1");
    detail::require_finite(y0_, "y0");
    detail::require_finite(y1_, "y1");
    detail::require_finite(x_);
  }

  static PanelDataset from_observations(std::span<const PanelObservation> obs,
                                        std::vector<std::string> covariate_names = {}) {
    const Index n = static_cast<Index>(obs.size());
    const Index p = n > 0 ? static_cast<Index>(obs[0].x.size()) : 0;
    Vec z(n), d0(n), y0(n), d1(n), y1(n);
    Mat x(n, p);
    for (Index i = 0; i < n; ++i) {
      const auto& o = obs[static_cast<std::size_t>(i)];
      if (static_cast<Index>(o.x.size()) != p) {
        throw Error(ErrorCode::InvalidArgument, "observations disagree on covariate dimension");
      }
      z[i] = o.z;
      d0[i] = o.d0;
      y0[i] = o.y0;
      d1[i] = o.d1;
      y1[i] = o.y1;
      for (Index j = 0; j < p; ++j) x(i, j) = o.x[static_cast<std::size_t>(j)];
    }
    return PanelDataset(z, x, d0, y0, d1, y1, std::move(covariate_names));
  }

  Index n() const { return z_.size(); }
  Index p() const { return x_.cols(); }
  const Vec& z() const { return z_; }
  const Mat& x() const { return x_; }
  const Vec& d0() const { return d0_; }
  const Vec& y0() const { return y0_; }
  const Vec& d1() const { return d1_; }
  const Vec& y1() const { return y1_; }
  const std::vector<std::string>& covariate_names() const { return names_; }

  PanelObservation observation(Index i) const {
    PanelObservation o;
    o.z = z_[i];
    o.x.resize(static_cast<std::size_t>(p()));
    for (Index j = 0; j < p(); ++j) o.x[static_cast<std::size_t>(j)] = x_(i, j);
    o.d0 = d0_[i];
    o.y0 = y0_[i];
    o.d1 = d1_[i];
    o.y1 = y1_[i];
    return o;
  }

  PanelDataset subset(std::span<const Index> rows) const {
    return PanelDataset(detail::gather(z_, rows), detail::gather_rows<PanelDataset>(x_, rows),
                        detail::gather(d0_, rows), detail::gather(y0_, rows), detail::gather(d1_, rows),
                        detail::gather(y1_, rows), names_);
  }

  // Same records with X dropped; used by the no-covariate estimators.
  PanelDataset without_covariates() const {
    return PanelDataset(z_, Mat(n(), 0), d0_, y0_, d1_, y1_, {});
  }

  PanelDataset with_outcomes(Vec y0, Vec y1) const {
    return PanelDataset(z_, x_, d0_, std::move(y0), d1_, std::move(y1), names_);
  }

  PanelDataset with_instrument(Vec z) const { return PanelDataset(std::move(z), x_, d0_, y0_, d1_, y1_, names_); }

 private:
  Vec z_;
  Mat x_;
  Vec d0_, y0_, d1_, y1_;
  std::vector<std::string> names_;
};

class RcsDataset {
 public:
  RcsDataset(Vec z, Mat x, Vec t, Vec d, Vec y, std::vector<std::string> covariate_names = {})
      : z_(std::move(z)), x_(std::move(x)), t_(std::move(t)), d_(std::move(d)), y_(std::move(y)),
        names_(std::move(covariate_names)) {
    const Index n = z_.size();
    if (n < 1) throw Error(ErrorCode::TooFewRows, "rcs dataset needs at least one row");
    if (x_.rows() != n || t_.size() != n || d_.size() != n || y_.size() != n) {
      throw Error(ErrorCode::InvalidArgument, "rcs columns have inconsistent lengths");
    }
    if (names_.empty()) names_ = detail::default_covariate_names(x_.cols());
    if (static_cast<Index>(names_.size()) != x_.cols()) {
      throw Error(ErrorCode::InvalidArgument, "covariate name count does not match covariate columns");
    }
    detail::require_binary(z_, "z");
    detail::require_binary(t_, "t");
    detail::require_binary(d_, "d");
    detail::require_finite(y_, "y");
    detail::require_finite(x_);
    const double n1 = t_.sum();
    if (n1 == 0.0 || n1 == static_cast<double>(n)) {
      throw Error(ErrorCode::EmptyTimeStratum, "both t=0 and t=1 rows are required");
    }
  }

  static RcsDataset from_observations(std::span<const RcsObservation> obs,
                                      std::vector<std::string> covariate_names = {}) {
    const Index n = static_cast<Index>(obs.size());
    const Index p = n > 0 ? static_cast<Index>(obs[0].x.size()) : 0;
    Vec z(n), t(n), d(n), y(n);
    Mat x(n, p);
    for (Index i = 0; i < n; ++i) {
      const auto& o = obs[static_cast<std::size_t>(i)];
      if (static_cast<Index>(o.x.size()) != p) {
        throw Error(ErrorCode::InvalidArgument, "observations disagree on covariate dimension");
      }
      z[i] = o.z;
      t[i] = o.t;
      d[i] = o.d;
      y[i] = o.y;
      for (Index j = 0; j < p; ++j) x(i, j) = o.x[static_cast<std::size_t>(j)];
    }
    return RcsDataset(z, x, t, d, y, std::move(covariate_names));
  }

  Index n() const { return z_.size(); }
  Index p() const { return x_.cols(); }
  const Vec& z() const { return z_; }
  const Mat& x() const { return x_; }
  const Vec& t() const { return t_; }
  const Vec& d() const { return d_; }
  const Vec& y() const { return y_; }
  const std::vector<std::string>& covariate_names() const { return names_; }

  RcsObservation observation(Index i) const {
    RcsObservation o;
    o.z = z_[i];
    o.x.resize(static_cast<std::size_t>(p()));
    for (Index j = 0; j < p(); ++j) o.x[static_cast<std::size_t>(j)] = x_(i, j);
    o.t = t_[i];
    o.d = d_[i];
    o.y = y_[i];
    return o;
  }

  RcsDataset subset(std::span<const Index> rows) const {
    return RcsDataset(detail::gather(z_, rows), detail::gather_rows<RcsDataset>(x_, rows), detail::gather(t_, rows),
                      detail::gather(d_, rows), detail::gather(y_, rows), names_);
  }

  RcsDataset without_covariates() const { return RcsDataset(z_, Mat(n(), 0), t_, d_, y_, {}); }

  RcsDataset with_outcomes(Vec y) const { return RcsDataset(z_, x_, t_, d_, std::move(y), names_); }

 private:
  Vec z_;
  Mat x_;
  Vec t_, d_, y_;
  std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct ValidationReport {
  std::size_t n = 0;
  std::map<std::string, std::size_t> n_by_cell;
  std::vector<std::string> warnings;
  std::vector<std::string> fatal;

  bool accepted() const { return fatal.empty(); }

  bool has_warning(std::string_view w) const {
    return std::find(warnings.begin(), warnings.end(), w) != warnings.end();
  }
  bool has_fatal(std::string_view f) const { return std::find(fatal.begin(), fatal.end(), f) != fatal.end(); }
};

inline void to_json(nlohmann::json& j, const ValidationReport& r) {
  j = nlohmann::json{{"n", r.n}, {"n_by_cell", r.n_by_cell}, {"warnings", r.warnings}, {"fatal", r.fatal}};
}

// Rule-of-thumb ceiling for treating a binary outcome as rare, so that the
// multiplicative model approximates a logistic one.
inline constexpr double kRareOutcomeCeiling = 0.12;

namespace detail {

inline bool all_binary(const Vec& v) {
  for (Index i = 0; i < v.size(); ++i)
    if (!is_binary(v[i])) return false;
  return true;
}

inline void check_outcome_scale(const Vec& y, const EffectSpec& spec, ValidationReport& r) {
  if (spec.scale == Scale::multiplicative && y.size() > 0 && y.minCoeff() < 0.0) {
    if (std::find(r.fatal.begin(), r.fatal.end(), "negative-outcome") == r.fatal.end()) {
      r.fatal.emplace_back("negative-outcome");
    }
  }
}

inline void check_rare_binary(const std::vector<const Vec*>& per_time, const EffectSpec& spec,
                              ValidationReport& r) {
  if (spec.scale != Scale::multiplicative) return;
  bool binary = true;
  for (const Vec* y : per_time) binary = binary && all_binary(*y);
  if (!binary) return;
  for (const Vec* y : per_time) {
    if (y->size() > 0 && y->mean() > kRareOutcomeCeiling) {
      r.warnings.emplace_back("rare-binary-approximation");
      return;
    }
  }
}

}  // namespace detail

inline ValidationReport validate(const PanelDataset& data, const EffectSpec& spec) {
  ValidationReport r;
  r.n = static_cast<std::size_t>(data.n());
  const auto n1 = static_cast<std::size_t>(data.z().sum());
  r.n_by_cell["Z=0"] = r.n - n1;
  r.n_by_cell["Z=1"] = n1;
  if (n1 == 0 || n1 == r.n) r.fatal.emplace_back("degenerate-instrument");
  detail::check_outcome_scale(data.y0(), spec, r);
  detail::check_outcome_scale(data.y1(), spec, r);
  detail::check_rare_binary({&data.y0(), &data.y1()}, spec, r);
  return r;
}

inline ValidationReport validate(const RcsDataset& data, const EffectSpec& spec) {
  ValidationReport r;
  r.n = static_cast<std::size_t>(data.n());
  std::size_t zt[2][2] = {{0, 0}, {0, 0}};
  for (Index i = 0; i < data.n(); ++i) {
    ++zt[static_cast<int>(data.t()[i])][static_cast<int>(data.z()[i])];
  }
  r.n_by_cell["T=0"] = zt[0][0] + zt[0][1];
  r.n_by_cell["T=1"] = zt[1][0] + zt[1][1];
  for (int t = 0; t < 2; ++t)
    for (int z = 0; z < 2; ++z)
      r.n_by_cell["T=" + std::to_string(t) + ",Z=" + std::to_string(z)] = zt[t][z];
  const std::size_t nz1 = zt[0][1] + zt[1][1];
  if (nz1 == 0 || nz1 == r.n) r.fatal.emplace_back("degenerate-instrument");
  if (r.n_by_cell["T=0"] == 0 || r.n_by_cell["T=1"] == 0) r.fatal.emplace_back("empty-time-stratum");
  detail::check_outcome_scale(data.y(), spec, r);

  std::vector<double> y0, y1;
  for (Index i = 0; i < data.n(); ++i) (data.t()[i] == 1.0 ? y1 : y0).push_back(data.y()[i]);
  const Vec v0 = Eigen::Map<const Vec>(y0.data(), static_cast<Index>(y0.size()));
  const Vec v1 = Eigen::Map<const Vec>(y1.data(), static_cast<Index>(y1.size()));
  detail::check_rare_binary({&v0, &v1}, spec, r);
  return r;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace csv {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_number(std::string_view field, std::size_t line_no, std::string_view column) {
  if (field.empty() || field == "NA" || field == "na" || field == "NaN" || field == "nan") {
    throw Error(ErrorCode::MissingValue,
                "missing value in column " + std::string(column) + " at line " + std::to_string(line_no));
  }
  double v = 0.0;
  const char* first = field.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(v)) {
    throw Error(ErrorCode::ParseError, "cannot parse '" + std::string(field) + "' in column " +
                                           std::string(column) + " at line " + std::to_string(line_no));
  }
  return v;
}

// Shortest representation that parses back to the identical double.
inline std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;  // only the requested ones
};

inline Table read_columns(const std::string& path, const std::vector<std::string>& wanted) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, path + ": empty file (header required)");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM

  Table t;
  for (auto f : split(line)) t.header.emplace_back(f);
  std::vector<std::size_t> idx;
  for (const auto& w : wanted) {
    const auto it = std::find(t.header.begin(), t.header.end(), w);
    if (it == t.header.end()) throw Error(ErrorCode::MissingColumn, path + ": missing column '" + w + "'");
    idx.push_back(static_cast<std::size_t>(it - t.header.begin()));
  }
  t.columns.assign(wanted.size(), {});
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split(line);
    if (fields.size() != t.header.size()) {
      throw Error(ErrorCode::ParseError, path + ": line " + std::to_string(line_no) + " has " +
                                             std::to_string(fields.size()) + " fields, expected " +
                                             std::to_string(t.header.size()));
    }
    for (std::size_t k = 0; k < idx.size(); ++k) {
      t.columns[k].push_back(parse_number(fields[idx[k]], line_no, wanted[k]));
    }
  }
  return t;
}

inline Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace csv

inline PanelDataset load_panel_csv(const std::string& path, const std::vector<std::string>& covariate_columns = {}) {
  std::vector<std::string> wanted{"z", "d0", "y0", "d1", "y1"};
  wanted.insert(wanted.end(), covariate_columns.begin(), covariate_columns.end());
  const auto t = csv::read_columns(path, wanted);
  const Index n = static_cast<Index>(t.columns[0].size());
  if (n == 0) throw Error(ErrorCode::TooFewRows, path + ": no data rows");
  Mat x(n, static_cast<Index>(covariate_columns.size()));
  for (std::size_t j = 0; j < covariate_columns.size(); ++j) x.col(static_cast<Index>(j)) = csv::to_vec(t.columns[5 + j]);
  return PanelDataset(csv::to_vec(t.columns[0]), x, csv::to_vec(t.columns[1]), csv::to_vec(t.columns[2]),
                      csv::to_vec(t.columns[3]), csv::to_vec(t.columns[4]), covariate_columns);
}

inline RcsDataset load_rcs_csv(const std::string& path, const std::vector<std::string>& covariate_columns = {}) {
  std::vector<std::string> wanted{"z", "t", "d", "y"};
  wanted.insert(wanted.end(), covariate_columns.begin(), covariate_columns.end());
  const auto t = csv::read_columns(path, wanted);
  const Index n = static_cast<Index>(t.columns[0].size());
  if (n == 0) throw Error(ErrorCode::TooFewRows, path + ": no data rows");
  Mat x(n, static_cast<Index>(covariate_columns.size()));
  for (std::size_t j = 0; j < covariate_columns.size(); ++j) x.col(static_cast<Index>(j)) = csv::to_vec(t.columns[4 + j]);
  return RcsDataset(csv::to_vec(t.columns[0]), x, csv::to_vec(t.columns[1]), csv::to_vec(t.columns[2]),
                    csv::to_vec(t.columns[3]), covariate_columns);
}

inline void write_panel_csv(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << "z,d0,y0,d1,y1";
  for (const auto& name : data.covariate_names()) out << ',' << name;
  out << '\n';
  for (Index i = 0; i < data.n(); ++i) {
    out << csv::format_number(data.z()[i]) << ',' << csv::format_number(data.d0()[i]) << ','
        << csv::format_number(data.y0()[i]) << ',' << csv::format_number(data.d1()[i]) << ','
        << csv::format_number(data.y1()[i]);
    for (Index j = 0; j < data.p(); ++j) out << ',' << csv::format_number(data.x()(i, j));
    out << '\n';
  }
}

inline void write_rcs_csv(const RcsDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << "z,t,d,y";
  for (const auto& name : data.covariate_names()) out << ',' << name;
  out << '\n';
  for (Index i = 0; i < data.n(); ++i) {
    out << csv::format_number(data.z()[i]) << ',' << csv::format_number(data.t()[i]) << ','
        << csv::format_number(data.d()[i]) << ',' << csv::format_number(data.y()[i]);
    for (Index j = 0; j < data.p(); ++j) out << ',' << csv::format_number(data.x()(i, j));
    out << '\n';
  }
}

}  // namespace idid
