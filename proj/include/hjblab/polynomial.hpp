#pragma once

#include "hjblab/linalg.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace hjblab {

/// Multivariate polynomial with exact first and second derivatives.
/// Variables are x1..xn in text form, stored zero-based.
class Polynomial {
 public:
  struct Term {
    double coef = 0.0;
    std::vector<int> powers;
  };

  Polynomial() = default;
  explicit Polynomial(int nvars) : nvars_(nvars) {}

  static Polynomial constant(int nvars, double c);
  /// Parses e.g. "1.5*x1^2*x2 - 0.5*x2 + 3". Throws Error(Validation).
  static Polynomial parse(std::string_view text, int nvars);

  int nvars() const { return nvars_; }
  const std::vector<Term>& terms() const { return terms_; }
  int degree() const;

  void add_term(double coef, std::vector<int> powers);

  double value(const Vec& x) const;
  Vec gradient(const Vec& x) const;
  Mat hessian(const Vec& x) const;

  /// Substitute each variable by an affine form: x_i -> sum_j M(i,j) y_j.
  Polynomial substitute_linear(const Mat& M) const;

 private:
  int nvars_ = 0;
  std::vector<Term> terms_;
};

}  // namespace hjblab
