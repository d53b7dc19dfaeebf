#include "hjblab/matrixdom.hpp"

#include "hjblab/error.hpp"

#include <Eigen/Eigenvalues>

#include <array>
#include <cmath>
#include <numbers>
#include <string>

namespace hjblab::matrixdom {

namespace {

void require_square(const Mat& x, const char* what) {
  if (x.rows() != x.cols() || x.rows() == 0)
    throw Error(ErrorKind::Dimension, std::string(what) + " must be a nonempty square matrix");
}

Eigen::Map<const Vec> vec_view(const Mat& x) { return {x.data(), x.size()}; }

// log det on all matrices with positive determinant, so that entry-wise
// perturbations off the symmetric subspace are well defined.
double log_det_spd(const Mat& x) {
  const Eigen::PartialPivLU<Mat> lu(x);
  const Vec u = lu.matrixLU().diagonal();
  double s = lu.permutationP().determinant();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    s *= u[i] < 0.0 ? -1.0 : 1.0;
    acc += std::log(std::abs(u[i]));
  }
  if (!(s > 0.0) || !std::isfinite(acc)) throw Error(ErrorKind::Cone, "log det of a matrix with det <= 0");
  return acc;
}

}  // namespace

bool in_cone(const Mat& x) {
  if (x.rows() != x.cols() || x.rows() == 0 || !x.allFinite()) return false;
  if (!is_symmetric(x)) return false;
  if (x.rows() == 1) return x(0, 0) > 0.0;
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(x), Eigen::EigenvaluesOnly);
  const double lmax = es.eigenvalues().maxCoeff();
  return lmax > 0.0 && es.eigenvalues().minCoeff() > kConeRelTol * lmax;
}

SpdPoint::SpdPoint(Mat x) : x_(std::move(x)) {
  require_square(x_, "SPD point");
  if (!in_cone(x_)) throw Error(ErrorKind::Cone, "matrix is not symmetric positive definite");
  x_ = symmetrize(x_);
}

IndexBijection::IndexBijection(int d) : d_(d), pos_(static_cast<std::size_t>(d * d)) {
  if (d < 1) throw Error(ErrorKind::Dimension, "index bijection needs d >= 1");
  for (int p = 0; p < d; ++p) pairs_.emplace_back(p, p);
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) pairs_.emplace_back(i, j);
  for (int p = 0; p < size(); ++p) {
    const auto [i, j] = pairs_[p];
    pos_[i * d + j] = pos_[j * d + i] = p;
  }
}

int dim_from_ell_size(Eigen::Index n) {
  const int d = static_cast<int>(std::lround((std::sqrt(8.0 * static_cast<double>(n) + 1.0) - 1.0) / 2.0));
  if (d < 1 || d * (d + 1) / 2 != n)
    throw Error(ErrorKind::Dimension, "vector length " + std::to_string(n) + " is not d(d+1)/2");
  return d;
}

Vec ell(const Mat& x) {
  require_square(x, "ell argument");
  const IndexBijection ib(static_cast<int>(x.rows()));
  Vec y(ib.size());
  for (int p = 0; p < ib.size(); ++p) {
    const auto [i, j] = ib.I(p);
    y[p] = x(i, j);
  }
  return y;
}

Mat symmetric_from_ell(const Vec& y, int d) {
  const IndexBijection ib(d);
  if (y.size() != ib.size()) throw Error(ErrorKind::Dimension, "ell vector length");
  Mat x(d, d);
  for (int p = 0; p < ib.size(); ++p) {
    const auto [i, j] = ib.I(p);
    x(i, j) = x(j, i) = y[p];
  }
  return x;
}

SpdPoint ell_inv(const Vec& y) {
  const int d = dim_from_ell_size(y.size());
  Mat x = symmetric_from_ell(y, d);
  if (!in_cone(x)) throw Error(ErrorKind::Cone, "symmetric completion is not positive definite");
  return SpdPoint(std::move(x));
}

double quad_form(const Mat& f, const Mat& g, const Mat& theta) {
  if (f.rows() != theta.rows() || g.rows() != theta.rows() || f.cols() != f.rows() ||
      g.cols() != g.rows() || theta.cols() != theta.rows())
    throw Error(ErrorKind::Dimension, "quad_form operands differ in size");
  return 4.0 * (f * theta * g * theta).trace();
}

Mat kron(const Mat& a, const Mat& b) {
  Mat k(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

double quad_form_kron(const Mat& f, const Mat& g, const Mat& theta) {
  if (f.rows() != theta.rows() || g.rows() != theta.rows())
    throw Error(ErrorKind::Dimension, "quad_form operands differ in size");
  const Vec v = vec_view(theta);
  return 4.0 * v.dot(kron(f, g) * v);
}

Mat doubled_diagonal(const Mat& theta) {
  Mat d = theta;
  d.diagonal() *= 2.0;
  return d;
}

Mat trace_tensor(const Mat& f, const Mat& g) {
  const int d = static_cast<int>(f.rows());
  Mat T(d * d, d * d);
  for (int j = 0; j < d; ++j)
    for (int i = 0; i < d; ++i)
      for (int l = 0; l < d; ++l)
        for (int k = 0; k < d; ++k)
          T(i + j * d, k + l * d) =
              f(i, k) * g(j, l) + f(i, l) * g(j, k) + f(j, k) * g(i, l) + f(j, l) * g(i, k);
  return T;
}

std::vector<Mat> diffusion_factors(const Mat& F, const Mat& G) {
  const int d = static_cast<int>(F.rows());
  std::vector<Mat> a(static_cast<std::size_t>(d * d), Mat::Zero(d, d));
  for (int j = 0; j < d; ++j)
    for (int i = 0; i < d; ++i) {
      Mat& m = a[i + j * d];
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l) m(k, l) = F(i, k) * G(l, j) + F(j, k) * G(l, i);
    }
  return a;
}

MatrixCoefficients::MatFn proportional_abar(const MatrixCoefficients& c, double kappa) {
  return [f = c.f, g = c.g, kappa](const Mat& x) -> Mat { return kappa * trace_tensor(f(x), g(x)); };
}

void check_abar_symmetry(const MatrixCoefficients& c, const Mat& x, double tol) {
  const int d = c.d;
  const Mat Ab = c.Abar(x);
  if (Ab.rows() != d * d || Ab.cols() != d * d)
    throw Error(ErrorKind::Dimension, "Abar must be d^2 x d^2");
  const double scale = std::max(1.0, Ab.cwiseAbs().maxCoeff());
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l) {
          const double v = Ab(i + j * d, k + l * d);
          if (std::abs(v - Ab(j + i * d, k + l * d)) > tol * scale ||
              std::abs(v - Ab(i + j * d, l + k * d)) > tol * scale ||
              std::abs(v - Ab(k + l * d, i + j * d)) > tol * scale)
            throw Error(ErrorKind::Validation, "Abar violates the (ij),(kl) index symmetries");
        }
}

double h_delta(const MatrixCoefficients& c, double delta, const SpdPoint& x) {
  const Mat y = x.matrix().inverse();
  const Mat fy = c.f(x.matrix()) * y;
  const Mat gy = c.g(x.matrix()) * y;
  return (c.B(x.matrix()) * y).trace() - (1.0 + delta) * (fy * gy).trace() -
         fy.trace() * gy.trace();
}

void validate_wishart(const WishartParams& p) {
  require_square(p.L, "L");
  require_square(p.K, "K");
  require_square(p.Lambda, "Lambda");
  if (p.L.rows() != p.K.rows() || p.L.rows() != p.Lambda.rows())
    throw Error(ErrorKind::Dimension, "L, K, Lambda must share the dimension d");
  const double scale = std::max(1.0, p.Lambda.cwiseAbs().maxCoeff());
  if (std::abs(p.Lambda.determinant()) <= 1e-14 * std::pow(scale, static_cast<double>(p.L.rows())))
    throw Error(ErrorKind::Validation, "Lambda must be invertible");
}

MatrixCoefficients wishart_coefficients(const WishartParams& p) {
  validate_wishart(p);
  const int d = static_cast<int>(p.L.rows());
  const Mat LL = p.L * p.L.transpose();
  const Mat gg = p.Lambda * p.Lambda.transpose();
  MatrixCoefficients c;
  c.d = d;
  c.f = [](const Mat& x) -> Mat { return x; };
  c.g = [gg](const Mat&) -> Mat { return gg; };
  c.B = [LL, K = p.K](const Mat& x) -> Mat { return LL + K * x + x * K.transpose(); };
  c.V = [](const Mat&) { return 0.0; };
  c.Abar = [d](const Mat&) -> Mat { return Mat::Zero(d * d, d * d); };
  c.kappa_lo = c.kappa_hi = 0.0;
  return c;
}

bool check_wishart_gate(const WishartParams& p) {
  validate_wishart(p);
  const int d = static_cast<int>(p.L.rows());
  const Mat LL = p.L * p.L.transpose();
  const Mat gg = p.Lambda * p.Lambda.transpose();
  const Mat M = LL - (d + 1.0) * gg;
  // Scale-relative floor so that exact ties such as L = sqrt(2), Lambda = 1
  // are not decided by rounding.
  const double scale = std::max(LL.norm(), (d + 1.0) * gg.norm());
  return min_eigenvalue(M) > 1e-12 * scale;
}

MatrixFunction log_det_function(int d) {
  return {[](const Mat& x) { return log_det_spd(x); },
          [](const Mat& x) -> Mat { return x.inverse().transpose(); },
          [d](const Mat& x) -> Mat {
            const Mat y = x.inverse();
            Mat H(d * d, d * d);
            for (int j = 0; j < d; ++j)
              for (int i = 0; i < d; ++i)
                for (int l = 0; l < d; ++l)
                  for (int k = 0; k < d; ++k) H(i + j * d, k + l * d) = -y(j, k) * y(l, i);
            return H;
          }};
}

MatrixFunction norm_function(int d) {
  return {[](const Mat& x) { return x.norm(); }, [](const Mat& x) -> Mat { return x / x.norm(); },
          [d](const Mat& x) -> Mat {
            const double r = x.norm();
            const Vec v = vec_view(x);
            return Mat::Identity(d * d, d * d) / r - v * v.transpose() / (r * r * r);
          }};
}

MatrixFunction constant_matrix_function(int d, double c) {
  return {[c](const Mat&) { return c; }, [d](const Mat&) -> Mat { return Mat::Zero(d, d); },
          [d](const Mat&) -> Mat { return Mat::Zero(d * d, d * d); }};
}

MatrixFunction polynomial_matrix_function(const Polynomial& p, int d) {
  if (p.nvars() != d * d) throw Error(ErrorKind::Dimension, "matrix polynomial needs d^2 variables");
  return {[p](const Mat& x) { return p.value(Vec(vec_view(x))); },
          [p, d](const Mat& x) -> Mat {
            const Vec g = p.gradient(Vec(vec_view(x)));
            return Eigen::Map<const Mat>(g.data(), d, d);
          },
          [p](const Mat& x) -> Mat { return p.hessian(Vec(vec_view(x))); }};
}

Mat log_det_gradient(const SpdPoint& x) { return x.matrix().inverse(); }

Mat log_det_hessian(const SpdPoint& x) { return log_det_function(x.dim()).hess(x.matrix()); }

Mat log_det_hessian_action(const SpdPoint& x, const Mat& theta) {
  const Mat y = x.matrix().inverse();
  return -y * theta * y;
}

double matrix_generator_eval(const MatrixCoefficients& c, const MatrixFunction& v,
                             const SpdPoint& x) {
  const Mat& m = x.matrix();
  const Mat T = trace_tensor(c.f(m), c.g(m));
  const Mat H = v.hess(m);
  return 0.5 * T.cwiseProduct(H).sum() + c.B(m).cwiseProduct(v.grad(m)).sum();
}

double matrix_operator_eval(const MatrixCoefficients& c, const MatrixFunction& v,
                            const SpdPoint& x) {
  const Mat& m = x.matrix();
  if (x.dim() != c.d) throw Error(ErrorKind::Dimension, "point and coefficients differ in d");
  const Mat G = v.grad(m);
  const Vec gv = vec_view(G);
  const Mat Ab = c.Abar(m);
  if (Ab.rows() != c.d * c.d) throw Error(ErrorKind::Dimension, "Abar must be d^2 x d^2");
  return matrix_generator_eval(c, v, x) + 0.5 * gv.dot(Ab * gv) + c.V(m);
}

coeffs::CoefficientField vectorize(const MatrixCoefficients& c, std::vector<double> lo,
                                   std::vector<double> hi) {
  const int d = c.d;
  const IndexBijection ib(d);
  const int n = ib.size();
  if (static_cast<int>(lo.size()) != n || static_cast<int>(hi.size()) != n)
    throw Error(ErrorKind::Dimension, "vectorized box needs d(d+1)/2 bounds");
  auto to_mat = [d](const Vec& y) { return symmetric_from_ell(y, d); };
  coeffs::CoefficientField::Parts parts;
  parts.A = [c, ib, n, d, to_mat](const Vec& y) -> Mat {
    const Mat x = to_mat(y);
    const Mat F = sqrtm_psd(c.f(x));
    const Mat G = sqrtm_psd(c.g(x));
    const auto a = diffusion_factors(F, G);
    Mat ahat(n, d * d);
    for (int p = 0; p < n; ++p) {
      const auto [i, j] = ib.I(p);
      const Mat& aij = a[i + j * d];
      for (int q = 0; q < d * d; ++q) {
        const auto [k, l] = ib.J(q);
        ahat(p, q) = aij(k, l);
      }
    }
    return ahat * ahat.transpose();
  };
  parts.Abar = [c, ib, n, d, to_mat](const Vec& y) -> Mat {
    const Mat Ab = c.Abar(to_mat(y));
    Mat out(n, n);
    for (int p = 0; p < n; ++p)
      for (int q = 0; q < n; ++q) {
        const auto [i, j] = ib.I(p);
        const auto [k, l] = ib.I(q);
        out(p, q) = Ab(i + j * d, k + l * d);
      }
    return out;
  };
  parts.B = [c, ib, n, to_mat](const Vec& y) -> Vec {
    const Mat B = c.B(to_mat(y));
    Vec out(n);
    for (int p = 0; p < n; ++p) {
      const auto [i, j] = ib.I(p);
      out[p] = B(i, j);
    }
    return out;
  };
  parts.V = [c, to_mat](const Vec& y) { return c.V(to_mat(y)); };
  coeffs::Domain dom{std::move(lo), std::move(hi),
                     [to_mat](const Vec& y) { return in_cone(to_mat(y)); }, "vectorized SPD cone"};
  return coeffs::CoefficientField(n, std::move(parts), std::move(dom), c.kappa_lo, c.kappa_hi,
                                  "wishart-vec");
}

Polynomial vectorize_polynomial(const Polynomial& p, int d) {
  const IndexBijection ib(d);
  if (p.nvars() != d * d) throw Error(ErrorKind::Dimension, "matrix polynomial needs d^2 variables");
  Mat M = Mat::Zero(d * d, ib.size());
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) M(ib.vec_index(i, j), ib.position(i, j)) = 1.0;
  return p.substitute_linear(M);
}

// Cutoff ---------------------------------------------------------------------

namespace {

// sigma(u) = exp(-1/u) and its first two derivatives; below the threshold the
// values underflow and are returned as zero.
struct SigmaVals {
  double s, s1, s2;
};

SigmaVals sigma(double u) {
  if (u <= 2e-3) return {0.0, 0.0, 0.0};
  const double s = std::exp(-1.0 / u);
  const double u2 = u * u;
  return {s, s / u2, s * (1.0 / (u2 * u2) - 2.0 / (u2 * u))};
}

struct StepVals {
  double S, S1, S2;
};

StepVals smooth_step(double u) {
  if (u <= 0.0) return {0.0, 0.0, 0.0};
  if (u >= 1.0) return {1.0, 0.0, 0.0};
  const SigmaVals p = sigma(u);
  const SigmaVals qv = sigma(1.0 - u);
  const double q = qv.s, q1 = -qv.s1, q2 = qv.s2;  // derivatives in u
  const double den = p.s + q;
  const double num1 = p.s1 * q - p.s * q1;
  const double S = p.s / den;
  const double S1 = num1 / (den * den);
  const double S2 = (p.s2 * q - p.s * q2) / (den * den) - 2.0 * num1 * (p.s1 + q1) / (den * den * den);
  return {S, S1, S2};
}

}  // namespace

double Cutoff::value(double r) const { return smooth_step(r - n0 - 1.0).S; }
double Cutoff::d1(double r) const { return smooth_step(r - n0 - 1.0).S1; }
double Cutoff::d2(double r) const { return smooth_step(r - n0 - 1.0).S2; }

MatrixFunction logdet_norm_function(int d, double a, double b, double C, double n0) {
  const Cutoff eta{n0};
  // r eta(r) and its radial derivatives.
  auto radial = [eta](double r) {
    const auto s = smooth_step(r - eta.n0 - 1.0);
    return std::array<double, 3>{r * s.S, s.S + r * s.S1, 2.0 * s.S1 + r * s.S2};
  };
  MatrixFunction ld = log_det_function(d);
  return {[=](const Mat& x) { return a * ld.value(x) + b * radial(x.norm())[0] + C; },
          [=](const Mat& x) -> Mat {
            const double r = x.norm();
            return a * ld.grad(x) + b * radial(r)[1] * x / r;
          },
          [=](const Mat& x) -> Mat {
            const double r = x.norm();
            const auto g = radial(r);
            const Vec u = vec_view(x) / r;
            const Mat D2r = (Mat::Identity(d * d, d * d) - u * u.transpose()) / r;
            return a * ld.hess(x) + b * (g[2] * u * u.transpose() + g[1] * D2r);
          }};
}

MatrixFunction phi0_function(int d, const Phi0Params& p) {
  return logdet_norm_function(d, -p.c_lo, p.c_hi, p.C, p.n0);
}

MatrixFunction psi0_function(int d, const Psi0Params& p) {
  return logdet_norm_function(d, p.k_lo, -p.k_hi, 0.0, p.n0);
}

double phi0_matrix(const Phi0Params& p, const SpdPoint& x) {
  const double r = x.matrix().norm();
  return -p.c_lo * log_det_spd(x.matrix()) + p.c_hi * r * Cutoff{p.n0}.value(r) + p.C;
}

double psi0_matrix(const Psi0Params& p, const SpdPoint& x) {
  const double r = x.matrix().norm();
  return p.k_lo * log_det_spd(x.matrix()) - p.k_hi * r * Cutoff{p.n0}.value(r);
}

double fphi0_bound_shape(const MatrixCoefficients& c, const Phi0Params& phi, const BoundParams& b,
                         const SpdPoint& x) {
  const double r = x.matrix().norm();
  const double lin = b.gamma1 + b.beta1 * phi.c_hi - 4.0 * b.kappa_hi * b.alpha1 * phi.c_hi * phi.c_hi;
  const double ind = r > phi.n0 + 2.0 ? 1.0 : 0.0;
  return -phi.c_lo * h_delta(c, 4.0 * b.kappa_hi * phi.c_lo, x) - lin * r * ind;
}

BoundCheck fphi0_upper_bound(const MatrixCoefficients& c, const Phi0Params& phi,
                             const BoundParams& b, const SpdPoint& x, double tol) {
  const double lhs = matrix_operator_eval(c, phi0_function(c.d, phi), x);
  const double rhs = fphi0_bound_shape(c, phi, b, x) + b.C_bound;
  return {lhs, rhs, lhs <= rhs + tol * std::max(1.0, std::abs(rhs))};
}

std::vector<SpdPoint> spectral_probe(int d, const std::vector<std::vector<double>>& spectra,
                                     int rotations) {
  std::vector<SpdPoint> out;
  const int nrot = d == 1 ? 1 : std::max(rotations, 1);
  for (const auto& lam : spectra) {
    if (static_cast<int>(lam.size()) != d)
      throw Error(ErrorKind::Dimension, "probe spectrum length must equal d");
    Vec ev(d);
    for (int i = 0; i < d; ++i) ev[i] = lam[i];
    for (int k = 0; k < nrot; ++k) {
      // Product of plane rotations with angles on a golden-ratio sequence.
      Mat U = Mat::Identity(d, d);
      int plane = 0;
      for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j, ++plane) {
          const double th =
              std::numbers::pi * std::fmod((k + 1) * (plane + 1) * std::numbers::phi, 1.0);
          Mat R = Mat::Identity(d, d);
          R(i, i) = R(j, j) = std::cos(th);
          R(i, j) = -std::sin(th);
          R(j, i) = std::sin(th);
          U = U * R;
        }
      out.emplace_back(symmetrize(U * ev.asDiagonal() * U.transpose()));
    }
  }
  return out;
}

}  // namespace hjblab::matrixdom
