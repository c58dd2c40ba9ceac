#pragma once

// Conditional-mean learners, NNLS stacking and cross-fitting folds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idid/basis.hpp"
#include "idid/data.hpp"
#include "idid/error.hpp"
#include "idid/numerics.hpp"
#include "idid/parallel.hpp"
#include "idid/rng.hpp"

namespace idid {

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

struct FoldAssignment {
  Index n = 0;
  int Q = 0;
  std::uint64_t seed = 0;
  std::vector<int> fold_of;

  std::vector<Index> members(int q) const {
    std::vector<Index> out;
    for (Index i = 0; i < n; ++i)
      if (fold_of[static_cast<std::size_t>(i)] == q) out.push_back(i);
    return out;
  }
  std::vector<Index> complement(int q) const {
    std::vector<Index> out;
    for (Index i = 0; i < n; ++i)
      if (fold_of[static_cast<std::size_t>(i)] != q) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(static_cast<std::size_t>(Q), 0);
    for (int f : fold_of) ++s[static_cast<std::size_t>(f)];
    return s;
  }
};

inline FoldAssignment make_folds(Index n, int Q, std::uint64_t seed) {
  if (Q < 2) throw Error(ErrorCode::InvalidArgument, "need at least 2 folds");
  if (n < Q) throw Error(ErrorCode::TooFewRows, std::to_string(n) + " rows cannot fill " + std::to_string(Q) + " folds");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 eng(derive_seed(seed, 0, static_cast<std::uint64_t>(Stream::Folds)));
  std::shuffle(perm.begin(), perm.end(), eng);
  FoldAssignment f;
  f.n = n;
  f.Q = Q;
  f.seed = seed;
  f.fold_of.assign(static_cast<std::size_t>(n), 0);
  for (std::size_t pos = 0; pos < perm.size(); ++pos)
    f.fold_of[static_cast<std::size_t>(perm[pos])] = static_cast<int>(pos % static_cast<std::size_t>(Q));
  return f;
}

// Fold ids supplied by the caller, e.g. a column of the data.
inline FoldAssignment folds_from_ids(const std::vector<int>& ids) {
  FoldAssignment f;
  f.n = static_cast<Index>(ids.size());
  f.fold_of = ids;
  f.Q = ids.empty() ? 0 : *std::max_element(ids.begin(), ids.end()) + 1;
  if (f.Q < 2) throw Error(ErrorCode::InvalidArgument, "need at least 2 folds");
  for (std::size_t s : f.sizes())
    if (s == 0) throw Error(ErrorCode::InvalidArgument, "fold ids must cover 0..Q-1");
  return f;
}

// ---------------------------------------------------------------------------
// Learner settings
// ---------------------------------------------------------------------------

enum class LearnerKind { glm_identity, glm_log, glm_logit, basis_ls, knn, stacked };

inline std::string_view to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::glm_identity: return "glm_identity";
    case LearnerKind::glm_log: return "glm_log";
    case LearnerKind::glm_logit: return "glm_logit";
    case LearnerKind::basis_ls: return "basis_ls";
    case LearnerKind::knn: return "knn";
    case LearnerKind::stacked: return "stacked";
  }
  return "unknown";
}

inline LearnerKind learner_kind_from_string(std::string_view s) {
  for (auto k : {LearnerKind::glm_identity, LearnerKind::glm_log, LearnerKind::glm_logit, LearnerKind::basis_ls,
                 LearnerKind::knn, LearnerKind::stacked}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown learner kind '" + std::string(s) + "'");
}

struct LearnerSpec {
  LearnerKind kind = LearnerKind::basis_ls;
  int degree = 2;          // basis_ls: highest power of each non-binary feature
  bool sine = true;        // basis_ls: add sin(x) per non-binary feature
  int k = 25;              // knn
  std::vector<LearnerSpec> candidates;  // stacked
  int inner_folds = 5;     // stacked: folds for out-of-fold predictions
  std::uint64_t seed = 1;  // stacked: fold seed

  static LearnerSpec of(LearnerKind kind) {
    LearnerSpec s;
    s.kind = kind;
    return s;
  }
  static LearnerSpec glm_identity() { return of(LearnerKind::glm_identity); }
  static LearnerSpec glm_log() { return of(LearnerKind::glm_log); }
  static LearnerSpec glm_logit() { return of(LearnerKind::glm_logit); }
  static LearnerSpec basis(int degree, bool sine = true) {
    LearnerSpec s = of(LearnerKind::basis_ls);
    s.degree = degree;
    s.sine = sine;
    return s;
  }
  static LearnerSpec knn(int k) {
    LearnerSpec s = of(LearnerKind::knn);
    s.k = k;
    return s;
  }
  static LearnerSpec stack(std::vector<LearnerSpec> candidates) {
    LearnerSpec s = of(LearnerKind::stacked);
    s.candidates = std::move(candidates);
    return s;
  }
  // Default library: GLM, polynomial+sine least squares and k-NN.
  static LearnerSpec default_stack() { return stack({glm_log(), basis(3, true), knn(25)}); }
};

inline void to_json(nlohmann::json& j, const LearnerSpec& s) {
  j = nlohmann::json{{"kind", std::string(to_string(s.kind))}};
  switch (s.kind) {
    case LearnerKind::basis_ls:
      j["degree"] = s.degree;
      j["sine"] = s.sine;
      break;
    case LearnerKind::knn: j["k"] = s.k; break;
    case LearnerKind::stacked:
      j["candidates"] = s.candidates;
      j["inner_folds"] = s.inner_folds;
      j["seed"] = s.seed;
      break;
    default: break;
  }
}

inline void from_json(const nlohmann::json& j, LearnerSpec& s) {
  s = LearnerSpec{};
  if (j.is_string()) {
    s.kind = learner_kind_from_string(j.get<std::string>());
    if (s.kind == LearnerKind::stacked) s = LearnerSpec::default_stack();
    return;
  }
  s.kind = learner_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("degree")) s.degree = j["degree"].get<int>();
  if (j.contains("sine")) s.sine = j["sine"].get<bool>();
  if (j.contains("k")) s.k = j["k"].get<int>();
  if (j.contains("inner_folds")) s.inner_folds = j["inner_folds"].get<int>();
  if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("candidates")) s.candidates = j["candidates"].get<std::vector<LearnerSpec>>();
  if (s.kind == LearnerKind::stacked && s.candidates.empty()) s.candidates = LearnerSpec::default_stack().candidates;
  if (s.degree < 0 || s.k < 1) throw Error(ErrorCode::InvalidArgument, "learner hyperparameters out of range");
}

// ---------------------------------------------------------------------------
// Fitted models
// ---------------------------------------------------------------------------

class Model {
 public:
  virtual ~Model() = default;
  virtual Vec predict(const Mat& x) const = 0;
};

struct RegressionFit {
  LearnerSpec spec;
  std::shared_ptr<const Model> model;
  Index training_n = 0;
  Vec coefficients;  // linear learners
  bool ridge_fallback = false;
  Vec weights;                               // stacked
  std::vector<std::string> candidate_names;  // stacked, surviving candidates
  Vec candidate_cv_loss;                     // stacked
  double cv_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> warnings;

  Vec predict(const Mat& x) const { return model->predict(x); }
};

namespace detail {

inline Mat with_intercept(const Mat& x) {
  Mat a(x.rows(), x.cols() + 1);
  a.col(0).setOnes();
  a.rightCols(x.cols()) = x;
  return a;
}

// Relative pivot size below which a design column counts as collinear.
inline constexpr double kRankThreshold = 1e-9;

// Least squares with a ridge fallback for rank-deficient designs. The fallback
// is the vanishing-penalty limit of ridge, i.e. the minimum-norm solution, so
// the normal equations still hold exactly.
inline Vec least_squares(const Mat& a, const Vec& y, bool& ridge, const Vec* w = nullptr) {
  Mat aw = a;
  Vec yw = y;
  if (w) {
    const Vec sw = w->cwiseSqrt();
    aw = sw.asDiagonal() * a;
    yw = sw.cwiseProduct(y);
  }
  Eigen::ColPivHouseholderQR<Mat> qr(aw);
  qr.setThreshold(kRankThreshold);
  if (qr.rank() == a.cols()) return qr.solve(yw);
  ridge = true;
  Eigen::CompleteOrthogonalDecomposition<Mat> cod;
  cod.setThreshold(kRankThreshold);
  cod.compute(aw);
  return cod.solve(yw);
}

class LinearModel : public Model {
 public:
  enum class Link { identity, log, logit };
  LinearModel(Vec coef, Link link, std::function<Mat(const Mat&)> design)
      : coef_(std::move(coef)), link_(link), design_(std::move(design)) {}

  Vec predict(const Mat& x) const override {
    const Vec eta = design_(x) * coef_;
    switch (link_) {
      case Link::identity: return eta;
      case Link::log: return eta.array().min(700.0).max(-700.0).exp();
      case Link::logit: {
        Vec p(eta.size());
        for (Index i = 0; i < eta.size(); ++i) p[i] = expit(std::clamp(eta[i], -30.0, 30.0));
        return p;
      }
    }
    return eta;
  }

 private:
  Vec coef_;
  Link link_;
  std::function<Mat(const Mat&)> design_;
};

inline void check_rows(const Mat& x, const Vec& y) {
  if (x.rows() != y.size()) throw Error(ErrorCode::InvalidArgument, "features and targets differ in length");
  if (y.size() < 1) throw Error(ErrorCode::TooFewRows, "cannot fit a learner on zero rows");
  if (!y.allFinite() || !x.allFinite()) throw Error(ErrorCode::InvalidTarget, "non-finite training data");
}

inline RegressionFit fit_glm_identity(const Mat& x, const Vec& y) {
  RegressionFit f;
  f.coefficients = least_squares(with_intercept(x), y, f.ridge_fallback);
  f.model = std::make_shared<LinearModel>(f.coefficients, LinearModel::Link::identity, with_intercept);
  return f;
}

// Iteratively reweighted least squares for log and logit links, with step
// halving on the deviance.
inline RegressionFit fit_glm_irls(const Mat& x, const Vec& y, LinearModel::Link link) {
  RegressionFit f;
  const Mat a = with_intercept(x);
  const double ybar = y.mean();
  Vec beta = Vec::Zero(a.cols());
  if (link == LinearModel::Link::log) {
    if (y.minCoeff() < 0.0) throw Error(ErrorCode::InvalidTarget, "glm_log needs nonnegative targets");
    if (ybar <= 0.0) {
      beta[0] = -50.0;  // all-zero targets: a positive constant close to zero
      f.coefficients = beta;
      f.model = std::make_shared<LinearModel>(beta, link, with_intercept);
      f.warnings.emplace_back("glm_log: all targets are zero");
      return f;
    }
    beta[0] = std::log(ybar);
  } else {
    if (y.minCoeff() < 0.0 || y.maxCoeff() > 1.0) {
      throw Error(ErrorCode::InvalidTarget, "glm_logit needs targets in [0,1]");
    }
    const double pb = std::clamp(ybar, 1e-6, 1.0 - 1e-6);
    beta[0] = std::log(pb / (1.0 - pb));
  }
  auto mean_of = [&](const Vec& eta) {
    Vec mu(eta.size());
    for (Index i = 0; i < eta.size(); ++i) {
      mu[i] = link == LinearModel::Link::log ? std::exp(std::clamp(eta[i], -700.0, 700.0))
                                             : expit(std::clamp(eta[i], -30.0, 30.0));
    }
    return mu;
  };
  auto deviance = [&](const Vec& mu) {
    double dev = 0.0;
    for (Index i = 0; i < y.size(); ++i) {
      if (link == LinearModel::Link::log) {
        dev += mu[i] - (y[i] > 0 ? y[i] * std::log(mu[i]) : 0.0);
      } else {
        const double m = std::clamp(mu[i], 1e-15, 1.0 - 1e-15);
        dev -= y[i] * std::log(m) + (1.0 - y[i]) * std::log(1.0 - m);
      }
    }
    return dev;
  };
  Vec mu = mean_of(a * beta);
  double dev = deviance(mu);
  bool converged = false;
  for (int it = 0; it < 100; ++it) {
    const Vec eta = a * beta;
    Vec w(y.size()), zt(y.size());
    for (Index i = 0; i < y.size(); ++i) {
      const double var = link == LinearModel::Link::log ? std::max(mu[i], 1e-10)
                                                        : std::max(mu[i] * (1.0 - mu[i]), 1e-10);
      w[i] = var;
      zt[i] = eta[i] + (y[i] - mu[i]) / var;
    }
    const Vec proposal = least_squares(a, zt, f.ridge_fallback, &w);
    Vec step = proposal - beta;
    double t = 1.0;
    Vec cand, mu_c;
    double dev_c = dev;
    for (int h = 0; h < 30; ++h, t *= 0.5) {
      cand = beta + t * step;
      mu_c = mean_of(a * cand);
      dev_c = deviance(mu_c);
      if (std::isfinite(dev_c) && dev_c <= dev) break;
    }
    if (!(std::isfinite(dev_c) && dev_c <= dev)) break;
    const double change = std::abs(dev - dev_c) / (std::abs(dev_c) + 0.1);
    beta = cand;
    mu = mu_c;
    dev = dev_c;
    if (change < 1e-12) {
      converged = true;
      break;
    }
  }
  if (!converged) f.warnings.emplace_back(std::string(to_string(link == LinearModel::Link::log ? LearnerKind::glm_log : LearnerKind::glm_logit)) + ": IRLS stopped before convergence");
  f.coefficients = beta;
  f.model = std::make_shared<LinearModel>(beta, link, with_intercept);
  return f;
}

// Polynomial and sine expansion. Binary (0/1) features enter linearly and are
// interacted with every other term, so a single binary feature gives separate
// curves in its two groups.
struct BasisExpansion {
  int degree = 2;
  bool sine = true;
  std::vector<Index> continuous, binary;

  static BasisExpansion learn(const Mat& x, int degree, bool sine) {
    BasisExpansion b;
    b.degree = degree;
    b.sine = sine;
    for (Index j = 0; j < x.cols(); ++j) {
      bool bin = true;
      for (Index i = 0; i < x.rows() && bin; ++i) bin = x(i, j) == 0.0 || x(i, j) == 1.0;
      (bin ? b.binary : b.continuous).push_back(j);
    }
    return b;
  }

  Mat operator()(const Mat& x) const {
    const Index n = x.rows();
    std::vector<Vec> base;
    base.push_back(Vec::Ones(n));
    for (Index j : continuous) {
      Vec pw = Vec::Ones(n);
      for (int p = 1; p <= degree; ++p) {
        pw = pw.cwiseProduct(x.col(j));
        base.push_back(pw);
      }
      if (sine) base.push_back(x.col(j).array().sin().matrix());
    }
    std::vector<Vec> cols = base;
    for (Index b : binary)
      for (const Vec& t : base) cols.push_back(t.cwiseProduct(x.col(b)));
    Mat out(n, static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = cols[c];
    return out;
  }
};

inline RegressionFit fit_basis_ls(const Mat& x, const Vec& y, int degree, bool sine) {
  RegressionFit f;
  const auto expansion = BasisExpansion::learn(x, degree, sine);
  f.coefficients = least_squares(expansion(x), y, f.ridge_fallback);
  f.model = std::make_shared<LinearModel>(f.coefficients, LinearModel::Link::identity, expansion);
  if (f.ridge_fallback) f.warnings.emplace_back("basis_ls: rank-deficient basis, ridge fallback used");
  return f;
}

class KnnModel : public Model {
 public:
  KnnModel(const Mat& x, const Vec& y, int k) : y_(y), k_(std::min<Index>(k, y.size())) {
    center_ = x.colwise().mean();
    scale_ = Vec::Ones(x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
      const double sd = std::sqrt((x.col(j).array() - center_[j]).square().mean());
      if (sd > 0) scale_[j] = sd;
    }
    x_ = standardize(x);
    if (x_.cols() == 1) {
      order_.resize(static_cast<std::size_t>(y.size()));
      std::iota(order_.begin(), order_.end(), Index{0});
      std::stable_sort(order_.begin(), order_.end(), [&](Index a, Index b) { return x_(a, 0) < x_(b, 0); });
      sorted_.resize(static_cast<Index>(order_.size()));
      for (std::size_t r = 0; r < order_.size(); ++r) sorted_[static_cast<Index>(r)] = x_(order_[r], 0);
    }
  }

  Vec predict(const Mat& xq) const override {
    Vec out(xq.rows());
    if (x_.cols() == 0) return Vec::Constant(xq.rows(), y_.mean());
    const Mat q = standardize(xq);
    for (Index i = 0; i < q.rows(); ++i) out[i] = x_.cols() == 1 ? predict_1d(q(i, 0)) : predict_nd(q.row(i));
    return out;
  }

 private:
  Mat standardize(const Mat& x) const {
    Mat s = x;
    for (Index j = 0; j < x.cols(); ++j) s.col(j) = (x.col(j).array() - center_[j]) / scale_[j];
    return s;
  }

  double predict_1d(double v) const {
    const Index m = sorted_.size();
    Index hi = static_cast<Index>(std::lower_bound(sorted_.data(), sorted_.data() + m, v) - sorted_.data());
    Index lo = hi - 1;
    double sum = 0.0;
    for (Index taken = 0; taken < k_; ++taken) {
      const bool use_lo = lo >= 0 && (hi >= m || v - sorted_[lo] <= sorted_[hi] - v);
      if (use_lo) {
        sum += y_[order_[static_cast<std::size_t>(lo)]];
        --lo;
      } else {
        sum += y_[order_[static_cast<std::size_t>(hi)]];
        ++hi;
      }
    }
    return sum / static_cast<double>(k_);
  }

  double predict_nd(const Eigen::RowVectorXd& v) const {
    std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(x_.rows()));
    for (Index r = 0; r < x_.rows(); ++r) dist[static_cast<std::size_t>(r)] = {(x_.row(r) - v).squaredNorm(), r};
    std::nth_element(dist.begin(), dist.begin() + (k_ - 1), dist.end());
    std::sort(dist.begin(), dist.begin() + k_);
    double sum = 0.0;
    for (Index r = 0; r < k_; ++r) sum += y_[dist[static_cast<std::size_t>(r)].second];
    return sum / static_cast<double>(k_);
  }

  Mat x_;
  Vec y_;
  Index k_;
  Vec center_, scale_;
  std::vector<Index> order_;
  Vec sorted_;
};

class StackedModel : public Model {
 public:
  StackedModel(std::vector<std::shared_ptr<const Model>> parts, Vec weights)
      : parts_(std::move(parts)), weights_(std::move(weights)) {}
  Vec predict(const Mat& x) const override {
    Vec out = Vec::Zero(x.rows());
    for (std::size_t k = 0; k < parts_.size(); ++k) {
      if (weights_[static_cast<Index>(k)] != 0.0) out += weights_[static_cast<Index>(k)] * parts_[k]->predict(x);
    }
    return out;
  }

 private:
  std::vector<std::shared_ptr<const Model>> parts_;
  Vec weights_;
};

inline Mat take_rows(const Mat& x, const std::vector<Index>& rows) {
  Mat out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = x.row(rows[r]);
  return out;
}

inline Vec take(const Vec& v, const std::vector<Index>& rows) {
  Vec out(static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out[static_cast<Index>(r)] = v[rows[r]];
  return out;
}

}  // namespace detail

inline RegressionFit fit_stacked(const Mat& features, const Vec& targets, const std::vector<LearnerSpec>& candidates,
                          const FoldAssignment& folds);

inline RegressionFit fit_conditional_mean(const Mat& features, const Vec& targets, const LearnerSpec& spec) {
  detail::check_rows(features, targets);
  RegressionFit f;
  switch (spec.kind) {
    case LearnerKind::glm_identity: f = detail::fit_glm_identity(features, targets); break;
    case LearnerKind::glm_log: f = detail::fit_glm_irls(features, targets, detail::LinearModel::Link::log); break;
    case LearnerKind::glm_logit: f = detail::fit_glm_irls(features, targets, detail::LinearModel::Link::logit); break;
    case LearnerKind::basis_ls: f = detail::fit_basis_ls(features, targets, spec.degree, spec.sine); break;
    case LearnerKind::knn: f.model = std::make_shared<detail::KnnModel>(features, targets, spec.k); break;
    case LearnerKind::stacked: {
      const int q = static_cast<int>(std::min<Index>(spec.inner_folds, targets.size()));
      if (q < 2) throw Error(ErrorCode::TooFewRows, "stacking needs at least 2 rows");
      f = fit_stacked(features, targets, spec.candidates, make_folds(targets.size(), q, spec.seed));
      break;
    }
  }
  f.spec = spec;
  f.training_n = targets.size();
  return f;
}

inline RegressionFit fit_stacked(const Mat& features, const Vec& targets, const std::vector<LearnerSpec>& candidates,
                                 const FoldAssignment& folds) {
  detail::check_rows(features, targets);
  if (candidates.size() < 2) throw Error(ErrorCode::InvalidArgument, "stacking needs at least 2 candidates");
  if (folds.n != targets.size()) throw Error(ErrorCode::InvalidArgument, "folds do not match the training rows");

  const Index n = targets.size();
  std::vector<Vec> oof;
  std::vector<std::size_t> alive;
  std::vector<std::string> warnings;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    Vec pred(n);
    try {
      for (int q = 0; q < folds.Q; ++q) {
        const auto train = folds.complement(q);
        const auto test = folds.members(q);
        const auto fit = fit_conditional_mean(detail::take_rows(features, train), detail::take(targets, train),
                                              candidates[c]);
        const Vec p = fit.predict(detail::take_rows(features, test));
        for (std::size_t r = 0; r < test.size(); ++r) pred[test[r]] = p[static_cast<Index>(r)];
      }
      if (!pred.allFinite()) throw Error(ErrorCode::InvalidTarget, "non-finite out-of-fold predictions");
      oof.push_back(pred);
      alive.push_back(c);
    } catch (const Error& e) {
      warnings.push_back("stacked: candidate " + std::string(to_string(candidates[c].kind)) + " dropped (" +
                         e.what() + ")");
    }
  }
  if (alive.empty()) throw Error(ErrorCode::AllCandidatesFailed, "every stacking candidate failed");

  const Index k = static_cast<Index>(alive.size());
  Mat p(n, k);
  for (Index c = 0; c < k; ++c) p.col(c) = oof[static_cast<std::size_t>(c)];
  Vec loss(k);
  for (Index c = 0; c < k; ++c) loss[c] = (p.col(c) - targets).squaredNorm() / static_cast<double>(n);

  // Sum-to-one is imposed through a heavily weighted extra row, then the
  // nonnegative solution is renormalized.
  Vec w;
  if (k == 1) {
    w = Vec::Ones(1);
  } else {
    const double big = 1e4 * std::sqrt(static_cast<double>(n)) * std::max(1.0, targets.cwiseAbs().maxCoeff());
    Mat a(n + 1, k);
    a.topRows(n) = p;
    a.row(n).setConstant(big);
    Vec b(n + 1);
    b.head(n) = targets;
    b[n] = big;
    w = nnls(a, b);
    if (w.sum() <= 0.0) w = Vec::Constant(k, 1.0 / static_cast<double>(k));
    w /= w.sum();
    Index best = 0;
    loss.minCoeff(&best);
    const double stacked_loss = (p * w - targets).squaredNorm() / static_cast<double>(n);
    if (!(stacked_loss <= loss[best])) {
      w.setZero();
      w[best] = 1.0;
    }
  }

  RegressionFit f;
  std::vector<std::shared_ptr<const Model>> parts;
  for (Index c = 0; c < k; ++c) {
    const auto& spec = candidates[alive[static_cast<std::size_t>(c)]];
    f.candidate_names.emplace_back(to_string(spec.kind));
    if (w[c] > 0.0) {
      auto full = fit_conditional_mean(features, targets, spec);
      parts.push_back(full.model);
      for (auto& msg : full.warnings) warnings.push_back(msg);
    } else {
      parts.push_back(nullptr);
    }
  }
  f.weights = w;
  f.candidate_cv_loss = loss;
  f.cv_loss = (p * w - targets).squaredNorm() / static_cast<double>(n);
  f.warnings = warnings;
  f.model = std::make_shared<detail::StackedModel>(parts, w);
  f.spec = LearnerSpec::stack(candidates);
  f.training_n = n;
  return f;
}

// ---------------------------------------------------------------------------
// Nuisance functions of the panel estimators
// ---------------------------------------------------------------------------

inline constexpr double kDenominatorFloor = 1e-6;

// a1..a6 evaluated at a set of points, with any range repairs counted.
struct NuisanceValues {
  Mat a1, a2;  // one column per component of g
  Vec a3, a4, a5, a6;
  Vec lambda;
  Index clipped_a4 = 0;
  Index repaired = 0;  // a3/a5/a6 moved into their admissible ranges

  Index n() const { return a4.size(); }

  // Restores a4 >= floor, a3 in [0, a4], a6 >= 0 and a5 in [0, a6].
  void enforce_ranges() {
    for (Index i = 0; i < a4.size(); ++i) {
      if (!(a4[i] >= kDenominatorFloor)) {
        a4[i] = kDenominatorFloor;
        ++clipped_a4;
      }
      const double a3c = std::clamp(a3[i], 0.0, a4[i]);
      const double a6c = std::max(a6[i], 0.0);
      const double a5c = std::clamp(a5[i], 0.0, a6c);
      repaired += (a3c != a3[i]) + (a6c != a6[i]) + (a5c != a5[i]);
      a3[i] = a3c;
      a6[i] = a6c;
      a5[i] = a5c;
    }
  }
};

struct NuisanceSet {
  std::vector<RegressionFit> a1, a2;  // one per component of g
  RegressionFit a3, a4, a5, a6;
  RegressionFit lambda_num;  // E(Y0 exp(-beta D0) | X, Z)
  RegressionFit lambda_den;  // E(Y0 exp(-beta D0) | X)
  std::optional<RegressionFit> pT;
  double theta_pilot = 0.0;
  Basis g;

  NuisanceValues evaluate(const Mat& x, const Vec& z) const {
    NuisanceValues v;
    const Index n = z.size();
    const Index k = static_cast<Index>(a1.size());
    v.a1.resize(n, k);
    v.a2.resize(n, k);
    for (Index c = 0; c < k; ++c) {
      v.a1.col(c) = a1[static_cast<std::size_t>(c)].predict(x);
      v.a2.col(c) = a2[static_cast<std::size_t>(c)].predict(x);
    }
    v.a3 = a3.predict(x);
    v.a4 = a4.predict(x);
    v.a5 = a5.predict(x);
    v.a6 = a6.predict(x);
    v.enforce_ranges();
    Mat xz(n, x.cols() + 1);
    xz.leftCols(x.cols()) = x;
    xz.col(x.cols()) = z;
    const Vec num = lambda_num.predict(xz);
    const Vec den = lambda_den.predict(x).cwiseMax(kDenominatorFloor);
    v.lambda = num.cwiseQuotient(den);
    return v;
  }
};

inline Mat append_column(const Mat& x, const Vec& z) {
  Mat xz(x.rows(), x.cols() + 1);
  xz.leftCols(x.cols()) = x;
  xz.col(x.cols()) = z;
  return xz;
}

// Fits every nuisance function on the given rows.
inline NuisanceSet fit_nuisance_rows(const PanelDataset& panel, const std::vector<Index>& rows, double theta_pilot,
                                     const Basis& g, const LearnerSpec& learner) {
  g.check(panel.p());
  const Mat x = detail::take_rows(panel.x(), rows);
  const Vec z = detail::take(panel.z(), rows);
  const Vec y0 = detail::take(panel.y0(), rows), d0 = detail::take(panel.d0(), rows);
  const Vec y1 = detail::take(panel.y1(), rows), d1 = detail::take(panel.d1(), rows);
  const Mat gv = g.evaluate(x, z);
  const Vec y0d0 = y0.cwiseProduct(d0);

  NuisanceSet s;
  s.g = g;
  s.theta_pilot = theta_pilot;
  for (Index c = 0; c < gv.cols(); ++c) {
    s.a1.push_back(fit_conditional_mean(x, y0d0.cwiseProduct(gv.col(c)), learner));
    s.a2.push_back(fit_conditional_mean(x, y0.cwiseProduct(gv.col(c)), learner));
  }
  s.a3 = fit_conditional_mean(x, y0d0, learner);
  s.a4 = fit_conditional_mean(x, y0, learner);
  s.a5 = fit_conditional_mean(x, y1.cwiseProduct(d1), learner);
  s.a6 = fit_conditional_mean(x, y1, learner);
  const double pilot_beta = -std::log1p(theta_pilot);
  const Vec target = y0.array() * (-pilot_beta * d0.array()).exp();
  s.lambda_num = fit_conditional_mean(append_column(x, z), target, learner);
  s.lambda_den = fit_conditional_mean(x, target, learner);
  return s;
}

// One nuisance set per fold, each trained on the rows outside that fold.
inline std::vector<NuisanceSet> fit_nuisance_set(const PanelDataset& panel, double theta_pilot, const Basis& g,
                                                 const LearnerSpec& learner, const FoldAssignment& folds,
                                                 unsigned jobs = 1) {
  if (folds.n != panel.n()) throw Error(ErrorCode::InvalidArgument, "folds do not match the panel");
  if (!(theta_pilot > -1.0)) throw Error(ErrorCode::InvalidArgument, "pilot theta must exceed -1");
  std::vector<NuisanceSet> out(static_cast<std::size_t>(folds.Q));
  parallel_for(static_cast<std::size_t>(folds.Q), jobs, [&](std::size_t q) {
    out[q] = fit_nuisance_rows(panel, folds.complement(static_cast<int>(q)), theta_pilot, g, learner);
  });
  return out;
}

struct NuisanceEvaluation {
  NuisanceValues values;
  std::vector<std::string> warnings;
  bool crossfit = true;
};

// Per-observation nuisance values: out-of-fold when folds are given, otherwise
// from a single fit on all rows.
inline NuisanceEvaluation evaluate_nuisance(const PanelDataset& panel, double theta_pilot, const Basis& g,
                                            const LearnerSpec& learner, const FoldAssignment* folds,
                                            unsigned jobs = 1) {
  NuisanceEvaluation ev;
  const Index n = panel.n();
  const Index k = g.size();
  auto& v = ev.values;
  v.a1.resize(n, k);
  v.a2.resize(n, k);
  v.a3.resize(n);
  v.a4.resize(n);
  v.a5.resize(n);
  v.a6.resize(n);
  v.lambda.resize(n);

  auto scatter = [&](const NuisanceValues& part, const std::vector<Index>& rows) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Index i = rows[r], j = static_cast<Index>(r);
      v.a1.row(i) = part.a1.row(j);
      v.a2.row(i) = part.a2.row(j);
      v.a3[i] = part.a3[j];
      v.a4[i] = part.a4[j];
      v.a5[i] = part.a5[j];
      v.a6[i] = part.a6[j];
      v.lambda[i] = part.lambda[j];
    }
    v.clipped_a4 += part.clipped_a4;
    v.repaired += part.repaired;
  };
  auto collect_warnings = [&](const NuisanceSet& s) {
    auto add = [&](const RegressionFit& f) {
      for (const auto& w : f.warnings)
        if (std::find(ev.warnings.begin(), ev.warnings.end(), w) == ev.warnings.end()) ev.warnings.push_back(w);
    };
    for (const auto& f : s.a1) add(f);
    for (const auto& f : s.a2) add(f);
    add(s.a3);
    add(s.a4);
    add(s.a5);
    add(s.a6);
    add(s.lambda_num);
    add(s.lambda_den);
  };

  if (folds) {
    ev.crossfit = true;
    const auto sets = fit_nuisance_set(panel, theta_pilot, g, learner, *folds, jobs);
    for (int q = 0; q < folds->Q; ++q) {
      const auto rows = folds->members(q);
      const auto& s = sets[static_cast<std::size_t>(q)];
      scatter(s.evaluate(detail::take_rows(panel.x(), rows), detail::take(panel.z(), rows)), rows);
      collect_warnings(s);
    }
  } else {
    ev.crossfit = false;
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    const auto s = fit_nuisance_rows(panel, all, theta_pilot, g, learner);
    scatter(s.evaluate(panel.x(), panel.z()), all);
    collect_warnings(s);
    ev.warnings.emplace_back(
        "cross-fitting disabled: valid inference then relies on Donsker-class nuisance estimators");
  }
  if (v.clipped_a4 > 0) {
    ev.warnings.push_back("a4 clipped at the denominator floor for " + std::to_string(v.clipped_a4) + " observations");
    if (static_cast<double>(v.clipped_a4) > 0.01 * static_cast<double>(n)) {
      throw Error(ErrorCode::DegenerateDenominator,
                  "more than 1% of fitted a4 values fell below the denominator floor");
    }
  }
  return ev;
}

}  // namespace idid
