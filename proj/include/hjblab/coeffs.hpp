#pragma once

#include "hjblab/grid.hpp"
#include "hjblab/linalg.hpp"
#include "hjblab/polynomial.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hjblab::coeffs {

/// Box bounds plus an optional membership predicate (cone truncation).
struct Domain {
  std::vector<double> lo, hi;
  std::function<bool(const Vec&)> membership;
  std::string description = "box";

  bool contains(const Vec& x) const;
};

/// Coefficient bundle (A, Abar, B, V) of
///   F[v] = 1/2 Tr(A D^2 v) + 1/2 grad v' Abar grad v + B' grad v + V
/// together with the ellipticity ratio bounds kappa_lo * A <= Abar <= kappa_hi * A.
/// Immutable after construction.
class CoefficientField {
 public:
  using MatFn = std::function<Mat(const Vec&)>;
  using VecFn = std::function<Vec(const Vec&)>;
  using ScalarFn = std::function<double(const Vec&)>;

  struct Parts {
    MatFn A;
    MatFn Abar;
    VecFn B;
    ScalarFn V;
  };

  CoefficientField(int dim, Parts parts, Domain domain, double kappa_lo, double kappa_hi,
                   std::string family = "custom");

  int dim() const { return dim_; }
  const Domain& domain() const { return domain_; }
  double kappa_lo() const { return kappa_lo_; }
  double kappa_hi() const { return kappa_hi_; }
  const std::string& family() const { return family_; }

  // Evaluators throw Error(Coefficient) on non-finite output.
  Mat A(const Vec& x) const;
  Mat Abar(const Vec& x) const;
  Vec B(const Vec& x) const;
  double V(const Vec& x) const;

  /// Same field with V replaced (used to drop or swap the potential).
  CoefficientField with_potential(ScalarFn V, std::string family_suffix) const;

 private:
  int dim_;
  Parts parts_;
  Domain domain_;
  double kappa_lo_, kappa_hi_;
  std::string family_;
};

/// Analytic test function with exact derivatives.
struct SmoothFunction {
  std::function<double(const Vec&)> value;
  std::function<Vec(const Vec&)> grad;
  std::function<Mat(const Vec&)> hess;
};

SmoothFunction constant_function(int dim, double c);
/// 1/2 x'Qx + b'x + c
SmoothFunction quadratic_function(const Mat& Q, const Vec& b, double c);
SmoothFunction polynomial_function(const Polynomial& p);
SmoothFunction add_constant(const SmoothFunction& f, double c);
SmoothFunction scale(const SmoothFunction& f, double s);

/// F[v](x) for analytic v.
double eval_operator(const CoefficientField& field, const SmoothFunction& v, const Vec& x);

/// 1/2 Tr(A D^2 w) + B' grad w + kappa V w: the operator obtained from F by the
/// substitution w = exp(kappa v) when Abar = kappa A.
double eval_linear_operator(const CoefficientField& field, const SmoothFunction& w,
                            const Vec& x, double kappa);

/// Coefficients sampled at every active grid node, laid out for the stepping
/// kernels: A and Abar row-major d*d per node, B d per node.
struct CoefficientCache {
  int dim = 0;
  std::vector<double> A, Abar, B, V;

  static CoefficientCache build(const CoefficientField& field, const Grid& grid);
};

/// F[v] at a grid node using the finite-difference stencils of `grid`.
double eval_operator(const CoefficientCache& cache, const Grid& grid,
                     std::span<const double> v, std::size_t node);
double eval_operator(const CoefficientField& field, const Grid& grid,
                     std::span<const double> v, std::size_t node);

struct EllipticityEstimate {
  double kappa_lo;
  double kappa_hi;
  bool pass;
};

/// Extreme generalized eigenvalues of the pencil (Abar(x), A(x)) over samples.
EllipticityEstimate check_ellipticity(const CoefficientField& field, std::span<const Vec> samples);

/// kappa with Abar = kappa A at every sample (to relative tolerance), if any.
std::optional<double> cole_hopf_kappa(const CoefficientField& field, std::span<const Vec> samples,
                                      double tol);

/// All active nodes of a grid, as sample points.
std::vector<Vec> grid_samples(const Grid& grid);

// Built-in families ---------------------------------------------------------

struct LqParams {
  int dim = 1;
  double a0 = 1.0;     // A = a0 I
  double kappa = 1.0;  // Abar = kappa a0 I
  double beta = 1.0;   // B = -beta x
  double gamma = 1.5;  // V = -gamma |x|^2 + v0
  double v0 = 0.0;
  double half_width = 6.0;
};

CoefficientField make_lq(const LqParams& p);

/// Entry-wise polynomial coefficients on a box. Entries are given for the
/// upper triangle of A and Abar (row-major i <= j), each B_i, and V.
struct PolyParams {
  int dim = 1;
  std::vector<Polynomial> A_upper, Abar_upper, B;
  Polynomial V;
  std::vector<double> lo, hi;
};

/// kappa bounds are estimated on `samples_per_axis` points per axis.
CoefficientField make_custom_poly(const PolyParams& p, int samples_per_axis = 21);

}  // namespace hjblab::coeffs
