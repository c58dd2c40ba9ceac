#pragma once

// Named scalar functions of (X, Z) used for m(X), d(X,Z), g(X,Z) and s(X,Z).
//
// Grammar of a term: factor ('*' factor)*, where a factor is one of
//   1 | z | xK | xK^p | sin(xK) | cos(xK)
// and K is the 1-based covariate position. Example: ["1","x1","sin(x1)","z*x1"].

#include <cctype>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "idid/data.hpp"
#include "idid/error.hpp"

namespace idid {

class BasisTerm {
 public:
  enum class Kind { one, z, power, sine, cosine };
  struct Factor {
    Kind kind = Kind::one;
    Index col = -1;
    int power = 1;
  };

  explicit BasisTerm(std::string text) : text_(std::move(text)) { parse(); }

  const std::string& name() const { return text_; }

  bool uses_z() const {
    for (const auto& f : factors_)
      if (f.kind == Kind::z) return true;
    return false;
  }

  Index max_covariate() const {
    Index m = -1;
    for (const auto& f : factors_) m = std::max(m, f.col);
    return m;
  }

  double eval(const Mat& x, Index row, double z) const {
    double v = 1.0;
    for (const auto& f : factors_) {
      switch (f.kind) {
        case Kind::one: break;
        case Kind::z: v *= z; break;
        case Kind::power: v *= f.power == 1 ? x(row, f.col) : std::pow(x(row, f.col), f.power); break;
        case Kind::sine: v *= std::sin(x(row, f.col)); break;
        case Kind::cosine: v *= std::cos(x(row, f.col)); break;
      }
    }
    return v;
  }

 private:
  static std::string strip(std::string_view s) {
    std::string out;
    for (char c : s)
      if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
    return out;
  }

  [[noreturn]] void bad() const { throw Error(ErrorCode::ParseError, "unrecognized basis term '" + text_ + "'"); }

  Index parse_covariate(std::string_view s) const {
    if (s.size() < 2 || s[0] != 'x') bad();
    int k = 0;
    for (char c : s.substr(1)) {
      if (!std::isdigit(static_cast<unsigned char>(c))) bad();
      k = k * 10 + (c - '0');
    }
    if (k < 1) bad();
    return k - 1;
  }

  void parse() {
    const std::string s = strip(text_);
    if (s.empty()) bad();
    std::size_t start = 0;
    for (;;) {
      const auto pos = s.find('*', start);
      const std::string_view f =
          std::string_view(s).substr(start, pos == std::string::npos ? std::string::npos : pos - start);
      Factor fac;
      if (f == "1") {
        fac.kind = Kind::one;
      } else if (f == "z") {
        fac.kind = Kind::z;
      } else if (f.rfind("sin(", 0) == 0 && f.back() == ')') {
        fac.kind = Kind::sine;
        fac.col = parse_covariate(f.substr(4, f.size() - 5));
      } else if (f.rfind("cos(", 0) == 0 && f.back() == ')') {
        fac.kind = Kind::cosine;
        fac.col = parse_covariate(f.substr(4, f.size() - 5));
      } else {
        fac.kind = Kind::power;
        const auto caret = f.find('^');
        fac.col = parse_covariate(f.substr(0, caret));
        if (caret != std::string_view::npos) {
          const auto p = f.substr(caret + 1);
          if (p.empty()) bad();
          fac.power = 0;
          for (char c : p) {
            if (!std::isdigit(static_cast<unsigned char>(c))) bad();
            fac.power = fac.power * 10 + (c - '0');
          }
          if (fac.power < 1) bad();
        }
      }
      factors_.push_back(fac);
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
  }

  std::string text_;
  std::vector<Factor> factors_;
};

class Basis {
 public:
  Basis() = default;
  Basis(std::initializer_list<const char*> names) {
    for (const char* n : names) terms_.emplace_back(n);
  }
  explicit Basis(const std::vector<std::string>& names) {
    for (const auto& n : names) terms_.emplace_back(n);
  }

  Index size() const { return static_cast<Index>(terms_.size()); }
  bool empty() const { return terms_.empty(); }
  const BasisTerm& operator[](Index j) const { return terms_[static_cast<std::size_t>(j)]; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& t : terms_) out.push_back(t.name());
    return out;
  }

  bool contains(std::string_view name) const {
    for (const auto& t : terms_)
      if (t.name() == name) return true;
    return false;
  }

  void push_back(const std::string& name) { terms_.emplace_back(name); }

  bool uses_z() const {
    for (const auto& t : terms_)
      if (t.uses_z()) return true;
    return false;
  }

  // Throws if a term refers to a covariate the data does not have.
  void check(Index p) const {
    for (const auto& t : terms_) {
      if (t.max_covariate() >= p) {
        throw Error(ErrorCode::InvalidArgument,
                    "basis term '" + t.name() + "' refers to a covariate beyond the " + std::to_string(p) + " available");
      }
    }
  }

  Mat evaluate(const Mat& x, const Vec& z) const {
    check(x.cols());
    Mat out(z.size(), size());
    for (Index i = 0; i < z.size(); ++i)
      for (Index j = 0; j < size(); ++j) out(i, j) = terms_[static_cast<std::size_t>(j)].eval(x, i, z[i]);
    return out;
  }

 private:
  std::vector<BasisTerm> terms_;
};

inline void to_json(nlohmann::json& j, const Basis& b) { j = b.names(); }
inline void from_json(const nlohmann::json& j, Basis& b) { b = Basis(j.get<std::vector<std::string>>()); }

// X* = (1, X) as a basis: the design of beta(X) = beta0 + beta1'X.
inline Basis beta_basis(BetaForm form, Index p) {
  Basis b{"1"};
  if (form == BetaForm::linear_in_x)
    for (Index k = 0; k < p; ++k) b.push_back("x" + std::to_string(k + 1));
  return b;
}

}  // namespace idid
