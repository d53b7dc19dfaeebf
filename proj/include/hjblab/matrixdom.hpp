#pragma once

#include "hjblab/coeffs.hpp"
#include "hjblab/linalg.hpp"
#include "hjblab/polynomial.hpp"

#include <functional>
#include <optional>
#include <utility>
#include <vector>

namespace hjblab::matrixdom {

/// x is accepted into the cone when lambda_min(x) > kConeRelTol * lambda_max(x).
inline constexpr double kConeRelTol = 1e-12;

bool in_cone(const Mat& x);

/// A point of the open cone of symmetric positive definite matrices.
class SpdPoint {
 public:
  /// Throws Error(Cone) if x is not symmetric positive definite.
  explicit SpdPoint(Mat x);

  const Mat& matrix() const { return x_; }
  int dim() const { return static_cast<int>(x_.rows()); }

 private:
  Mat x_;
};

/// The index maps between symmetric d x d matrices and R^{d(d+1)/2}.
/// I lists the diagonal first, I(p) = (p, p), then the strict upper triangle
/// row by row. J enumerates the d^2 entries column by column.
class IndexBijection {
 public:
  explicit IndexBijection(int d);

  int dim() const { return d_; }
  int size() const { return static_cast<int>(pairs_.size()); }
  std::pair<int, int> I(int p) const { return pairs_[p]; }
  std::pair<int, int> J(int q) const { return {q % d_, q / d_}; }
  /// Position p with I(p) = (i, j) or (j, i).
  int position(int i, int j) const { return pos_[i * d_ + j]; }
  /// Column-stacked position of entry (i, j).
  int vec_index(int i, int j) const { return i + j * d_; }

 private:
  int d_;
  std::vector<std::pair<int, int>> pairs_;
  std::vector<int> pos_;
};

Vec ell(const Mat& x);
inline Vec ell(const SpdPoint& x) { return ell(x.matrix()); }
/// Symmetric completion without a cone check.
Mat symmetric_from_ell(const Vec& y, int d);
/// Throws Error(Cone) if the completion is not positive definite.
SpdPoint ell_inv(const Vec& y);
int dim_from_ell_size(Eigen::Index n);

/// 4 Tr(f theta g theta).
double quad_form(const Mat& f, const Mat& g, const Mat& theta);
/// 4 vec(theta)' (f kron g) vec(theta), the Kronecker route to the same value.
double quad_form_kron(const Mat& f, const Mat& g, const Mat& theta);
Mat kron(const Mat& a, const Mat& b);
/// theta with its diagonal doubled.
Mat doubled_diagonal(const Mat& theta);

/// T_{(ij),(kl)} = Tr(a^{ij} (a^{kl})') = f^{ik}g^{jl} + f^{il}g^{jk} + f^{jk}g^{il} + f^{jl}g^{ik},
/// stored d^2 x d^2 with column-stacked indices.
Mat trace_tensor(const Mat& f, const Mat& g);

/// The d x d matrices a^{ij}_{kl} = F^{ik} G^{lj} + F^{jk} G^{li} for a pair of
/// factors with f = F F', g = G' G. Result indexed [i + j d] -> matrix (k, l).
std::vector<Mat> diffusion_factors(const Mat& F, const Mat& G);

struct MatrixCoefficients {
  using MatFn = std::function<Mat(const Mat&)>;
  using ScalarFn = std::function<double(const Mat&)>;

  int d = 1;
  MatFn f;     // F F'
  MatFn g;     // G' G
  MatFn B;     // symmetric drift
  ScalarFn V;
  /// Abar_{(ij),(kl)} as a d^2 x d^2 matrix in column-stacked indices.
  MatFn Abar;
  double kappa_lo = 1.0;
  double kappa_hi = 1.0;
};

/// Abar = kappa * Tr(a^{ij}(a^{kl})').
MatrixCoefficients::MatFn proportional_abar(const MatrixCoefficients& c, double kappa);

/// Throws Error(Validation) if Abar(x) violates the index symmetries at x.
void check_abar_symmetry(const MatrixCoefficients& c, const Mat& x, double tol = 1e-10);

double h_delta(const MatrixCoefficients& c, double delta, const SpdPoint& x);

struct WishartParams {
  Mat L, K, Lambda;
};

void validate_wishart(const WishartParams& p);
/// f(x) = x, g = Lambda Lambda', B(x) = LL' + Kx + xK'; V = 0 and Abar = 0
/// until the caller composes them.
MatrixCoefficients wishart_coefficients(const WishartParams& p);
bool check_wishart_gate(const WishartParams& p);

/// Smooth function of the d x d entries, each entry an independent variable.
/// grad(x)(i, j) = D_(ij) v; hess indexed [i + j d, k + l d].
struct MatrixFunction {
  std::function<double(const Mat&)> value;
  std::function<Mat(const Mat&)> grad;
  std::function<Mat(const Mat&)> hess;
};

MatrixFunction log_det_function(int d);
MatrixFunction norm_function(int d);
MatrixFunction constant_matrix_function(int d, double c);
/// Polynomial in the column-stacked entries of x (d^2 variables).
MatrixFunction polynomial_matrix_function(const Polynomial& p, int d);

Mat log_det_gradient(const SpdPoint& x);
/// D^2_{(ij),(kl)} log det x = -(x^{-1})_{il} (x^{-1})_{jk}.
Mat log_det_hessian(const SpdPoint& x);
/// sum_{kl} D^2_{(ij),(kl)} log det(x) theta_{kl} = -(x^{-1} theta x^{-1})_{ij} for symmetric theta.
Mat log_det_hessian_action(const SpdPoint& x, const Mat& theta);

/// F[v](x) in matrix form.
double matrix_operator_eval(const MatrixCoefficients& c, const MatrixFunction& v, const SpdPoint& x);
/// Linear part only (generator plus drift), without Abar and V terms.
double matrix_generator_eval(const MatrixCoefficients& c, const MatrixFunction& v, const SpdPoint& x);

/// Coefficients of the same operator written on the vectorized domain
/// l(S_{++}^d) inside the given box, built from the factors a^{ij}.
coeffs::CoefficientField vectorize(const MatrixCoefficients& c, std::vector<double> lo,
                                   std::vector<double> hi);
/// Polynomial composed with the inverse identification, in p = d(d+1)/2 variables.
Polynomial vectorize_polynomial(const Polynomial& p, int d);

// Lyapunov pair ------------------------------------------------------------

/// Smooth step: 0 for r < n0 + 1, 1 for r > n0 + 2.
struct Cutoff {
  double n0;
  double value(double r) const;
  double d1(double r) const;
  double d2(double r) const;
};

struct Phi0Params {
  double c_lo;   // log-det weight
  double c_hi;   // norm weight
  double C;      // additive constant
  double n0;
};

struct Psi0Params {
  double k_lo;
  double k_hi;
  double n0;
};

double phi0_matrix(const Phi0Params& p, const SpdPoint& x);
double psi0_matrix(const Psi0Params& p, const SpdPoint& x);
/// a log det x + b |x| eta(|x|) + C as a MatrixFunction.
MatrixFunction logdet_norm_function(int d, double a, double b, double C, double n0);
MatrixFunction phi0_function(int d, const Phi0Params& p);
MatrixFunction psi0_function(int d, const Psi0Params& p);

struct BoundParams {
  double kappa_hi;
  double alpha1;
  double beta1;
  double gamma1;
  double C_bound;  // additive constant of the bound
};

struct BoundCheck {
  double lhs;
  double rhs;
  bool holds;
};

/// lhs = F[phi0](x); rhs = -c_lo H_{4 kappa_hi c_lo}(x)
///   - (gamma1 + beta1 c_hi - 4 kappa_hi alpha1 c_hi^2) |x| 1{|x| > n0 + 2} + C_bound.
BoundCheck fphi0_upper_bound(const MatrixCoefficients& c, const Phi0Params& phi,
                             const BoundParams& b, const SpdPoint& x, double tol = 1e-9);
/// rhs above without C_bound.
double fphi0_bound_shape(const MatrixCoefficients& c, const Phi0Params& phi, const BoundParams& b,
                         const SpdPoint& x);

/// Deterministic probe points: matrices U diag(lambda) U' with eigenvalues set
/// from `scales` and a fixed family of rotations. For d = 1 these are scalars.
std::vector<SpdPoint> spectral_probe(int d, const std::vector<std::vector<double>>& spectra,
                                     int rotations);

}  // namespace hjblab::matrixdom
