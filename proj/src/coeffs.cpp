#include "hjblab/coeffs.hpp"

#include "hjblab/error.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <sstream>

namespace hjblab::coeffs {

namespace {

std::string point_str(const Vec& x) {
  std::ostringstream os;
  os << "(";
  for (Eigen::Index i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x[i];
  os << ")";
  return os.str();
}

void require_finite(bool ok, const char* what, const Vec& x) {
  if (!ok)
    throw Error(ErrorKind::Coefficient, std::string(what) + " is not finite at " + point_str(x));
}

}  // namespace

bool Domain::contains(const Vec& x) const {
  for (std::size_t a = 0; a < lo.size(); ++a) {
    const double xa = x[static_cast<Eigen::Index>(a)];
    if (!(xa >= lo[a] && xa <= hi[a])) return false;
  }
  return !membership || membership(x);
}

CoefficientField::CoefficientField(int dim, Parts parts, Domain domain, double kappa_lo,
                                   double kappa_hi, std::string family)
    : dim_(dim),
      parts_(std::move(parts)),
      domain_(std::move(domain)),
      kappa_lo_(kappa_lo),
      kappa_hi_(kappa_hi),
      family_(std::move(family)) {
  if (dim_ <= 0) throw Error(ErrorKind::Dimension, "coefficient field dimension must be positive");
  if (!parts_.A || !parts_.Abar || !parts_.B || !parts_.V)
    throw Error(ErrorKind::Validation, "coefficient field is missing a component");
}

Mat CoefficientField::A(const Vec& x) const {
  Mat a = parts_.A(x);
  require_finite(a.allFinite(), "A", x);
  return a;
}

Mat CoefficientField::Abar(const Vec& x) const {
  Mat a = parts_.Abar(x);
  require_finite(a.allFinite(), "Abar", x);
  return a;
}

Vec CoefficientField::B(const Vec& x) const {
  Vec b = parts_.B(x);
  require_finite(b.allFinite(), "B", x);
  return b;
}

double CoefficientField::V(const Vec& x) const {
  const double v = parts_.V(x);
  require_finite(std::isfinite(v), "V", x);
  return v;
}

CoefficientField CoefficientField::with_potential(ScalarFn V, std::string family_suffix) const {
  Parts p = parts_;
  p.V = std::move(V);
  return CoefficientField(dim_, std::move(p), domain_, kappa_lo_, kappa_hi_,
                          family_ + family_suffix);
}

SmoothFunction constant_function(int dim, double c) {
  return {[c](const Vec&) { return c; }, [dim](const Vec&) { return Vec::Zero(dim); },
          [dim](const Vec&) { return Mat::Zero(dim, dim); }};
}

SmoothFunction quadratic_function(const Mat& Q, const Vec& b, double c) {
  const Mat S = symmetrize(Q);
  return {[S, b, c](const Vec& x) { return 0.5 * x.dot(S * x) + b.dot(x) + c; },
          [S, b](const Vec& x) -> Vec { return S * x + b; },
          [S](const Vec&) -> Mat { return S; }};
}

SmoothFunction polynomial_function(const Polynomial& p) {
  return {[p](const Vec& x) { return p.value(x); }, [p](const Vec& x) { return p.gradient(x); },
          [p](const Vec& x) { return p.hessian(x); }};
}

SmoothFunction add_constant(const SmoothFunction& f, double c) {
  return {[f, c](const Vec& x) { return f.value(x) + c; }, f.grad, f.hess};
}

SmoothFunction scale(const SmoothFunction& f, double s) {
  return {[f, s](const Vec& x) { return s * f.value(x); },
          [f, s](const Vec& x) -> Vec { return s * f.grad(x); },
          [f, s](const Vec& x) -> Mat { return s * f.hess(x); }};
}

double eval_operator(const CoefficientField& field, const SmoothFunction& v, const Vec& x) {
  if (!field.domain().contains(x))
    throw Error(ErrorKind::Domain, "point " + point_str(x) + " outside " +
                                       field.domain().description);
  const Vec g = v.grad(x);
  const Mat H = v.hess(x);
  const Mat A = field.A(x);
  const Mat Ab = field.Abar(x);
  return 0.5 * (A.cwiseProduct(H)).sum() + 0.5 * g.dot(Ab * g) + field.B(x).dot(g) + field.V(x);
}

double eval_linear_operator(const CoefficientField& field, const SmoothFunction& w, const Vec& x,
                            double kappa) {
  if (!field.domain().contains(x))
    throw Error(ErrorKind::Domain, "point " + point_str(x) + " outside " +
                                       field.domain().description);
  const Mat A = field.A(x);
  return 0.5 * (A.cwiseProduct(w.hess(x))).sum() + field.B(x).dot(w.grad(x)) +
         kappa * field.V(x) * w.value(x);
}

CoefficientCache CoefficientCache::build(const CoefficientField& field, const Grid& grid) {
  if (field.dim() != grid.dim())
    throw Error(ErrorKind::GridMismatch, "field and grid dimensions differ");
  const int d = grid.dim();
  CoefficientCache c;
  c.dim = d;
  const std::size_t n = grid.size();
  c.A.assign(n * d * d, 0.0);
  c.Abar.assign(n * d * d, 0.0);
  c.B.assign(n * d, 0.0);
  c.V.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!grid.active(i)) continue;
    const Vec x = grid.node(i);
    const Mat A = field.A(x), Ab = field.Abar(x);
    const Vec B = field.B(x);
    for (int r = 0; r < d; ++r) {
      c.B[i * d + r] = B[r];
      for (int s = 0; s < d; ++s) {
        c.A[(i * d + r) * d + s] = A(r, s);
        c.Abar[(i * d + r) * d + s] = Ab(r, s);
      }
    }
    c.V[i] = field.V(x);
  }
  return c;
}

double eval_operator(const CoefficientCache& cache, const Grid& grid, std::span<const double> v,
                     std::size_t node) {
  if (!grid.active(node)) throw Error(ErrorKind::Domain, "grid node is masked");
  const int d = grid.dim();
  const auto der = derivatives_at(grid, v, node);
  const double* A = &cache.A[node * d * d];
  const double* Ab = &cache.Abar[node * d * d];
  const double* B = &cache.B[node * d];
  double second = 0.0, quad = 0.0, drift = 0.0;
  for (int r = 0; r < d; ++r) {
    drift += B[r] * der.grad[r];
    for (int s = 0; s < d; ++s) {
      second += A[r * d + s] * der.hess[r][s];
      quad += der.grad[r] * Ab[r * d + s] * der.grad[s];
    }
  }
  return 0.5 * second + 0.5 * quad + drift + cache.V[node];
}

double eval_operator(const CoefficientField& field, const Grid& grid, std::span<const double> v,
                     std::size_t node) {
  if (!grid.active(node)) throw Error(ErrorKind::Domain, "grid node is masked");
  const Vec x = grid.node(node);
  if (!field.domain().contains(x))
    throw Error(ErrorKind::Domain, "grid node " + point_str(x) + " outside " +
                                       field.domain().description);
  const int d = grid.dim();
  const auto der = derivatives_at(grid, v, node);
  Vec g(d);
  Mat H(d, d);
  for (int r = 0; r < d; ++r) {
    g[r] = der.grad[r];
    for (int s = 0; s < d; ++s) H(r, s) = der.hess[r][s];
  }
  const Mat A = field.A(x);
  return 0.5 * (A.cwiseProduct(H)).sum() + 0.5 * g.dot(field.Abar(x) * g) + field.B(x).dot(g) +
         field.V(x);
}

EllipticityEstimate check_ellipticity(const CoefficientField& field, std::span<const Vec> samples) {
  EllipticityEstimate out{std::numeric_limits<double>::infinity(),
                          -std::numeric_limits<double>::infinity(), false};
  for (const Vec& x : samples) {
    const Mat A = symmetrize(field.A(x));
    const Mat Ab = symmetrize(field.Abar(x));
    double lo = 0.0, hi = 0.0;
    if (A.rows() == 1) {
      if (!(A(0, 0) > 0.0))
        throw Error(ErrorKind::Ellipticity, "A is not positive definite at " + point_str(x));
      lo = hi = Ab(0, 0) / A(0, 0);
    } else {
      Eigen::LLT<Mat> llt(A);
      if (llt.info() != Eigen::Success || min_eigenvalue(A) <= 0.0)
        throw Error(ErrorKind::Ellipticity, "A is not positive definite at " + point_str(x));
      Eigen::GeneralizedSelfAdjointEigenSolver<Mat> ges(Ab, A, Eigen::EigenvaluesOnly);
      lo = ges.eigenvalues().minCoeff();
      hi = ges.eigenvalues().maxCoeff();
    }
    out.kappa_lo = std::min(out.kappa_lo, lo);
    out.kappa_hi = std::max(out.kappa_hi, hi);
  }
  out.pass = !samples.empty() && out.kappa_lo > 0.0;
  return out;
}

std::optional<double> cole_hopf_kappa(const CoefficientField& field, std::span<const Vec> samples,
                                      double tol) {
  if (samples.empty()) return std::nullopt;
  const auto est = check_ellipticity(field, samples);
  const double kappa = est.kappa_lo;
  for (const Vec& x : samples) {
    const Mat A = field.A(x);
    if ((field.Abar(x) - kappa * A).norm() > tol * A.norm()) return std::nullopt;
  }
  return kappa;
}

std::vector<Vec> grid_samples(const Grid& grid) {
  std::vector<Vec> out;
  out.reserve(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (grid.active(i)) out.push_back(grid.node(i));
  return out;
}

CoefficientField make_lq(const LqParams& p) {
  const int d = p.dim;
  if (d < 1) throw Error(ErrorKind::Validation, "lq dimension must be positive");
  if (!(p.a0 > 0.0)) throw Error(ErrorKind::Validation, "lq a0 must be positive");
  Domain dom{std::vector<double>(d, -p.half_width), std::vector<double>(d, p.half_width), {},
             "lq box"};
  CoefficientField::Parts parts{
      [d, a0 = p.a0](const Vec&) -> Mat { return a0 * Mat::Identity(d, d); },
      [d, k = p.kappa * p.a0](const Vec&) -> Mat { return k * Mat::Identity(d, d); },
      [beta = p.beta](const Vec& x) -> Vec { return -beta * x; },
      [gamma = p.gamma, v0 = p.v0](const Vec& x) { return -gamma * x.squaredNorm() + v0; }};
  return CoefficientField(d, std::move(parts), std::move(dom), p.kappa, p.kappa, "lq");
}

CoefficientField make_custom_poly(const PolyParams& p, int samples_per_axis) {
  const int d = p.dim;
  const std::size_t n_upper = static_cast<std::size_t>(d * (d + 1) / 2);
  if (p.A_upper.size() != n_upper || p.Abar_upper.size() != n_upper ||
      p.B.size() != static_cast<std::size_t>(d))
    throw Error(ErrorKind::Validation, "custom-poly needs d(d+1)/2 entries for A and Abar and d for B");
  auto fill = [d](const std::vector<Polynomial>& upper) {
    return [d, upper](const Vec& x) -> Mat {
      Mat m(d, d);
      std::size_t k = 0;
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j, ++k) m(i, j) = m(j, i) = upper[k].value(x);
      return m;
    };
  };
  CoefficientField::Parts parts{fill(p.A_upper), fill(p.Abar_upper),
                                [B = p.B, d](const Vec& x) -> Vec {
                                  Vec b(d);
                                  for (int i = 0; i < d; ++i) b[i] = B[i].value(x);
                                  return b;
                                },
                                [V = p.V](const Vec& x) { return V.value(x); }};
  Domain dom{p.lo, p.hi, {}, "custom-poly box"};
  CoefficientField provisional(d, parts, dom, 1.0, 1.0, "custom-poly");
  std::vector<int> counts(d, std::max(samples_per_axis, 5));
  Grid sample_grid(p.lo, p.hi, counts);
  const auto samples = grid_samples(sample_grid);
  const auto est = check_ellipticity(provisional, samples);
  return CoefficientField(d, std::move(parts), std::move(dom), est.kappa_lo, est.kappa_hi,
                          "custom-poly");
}

}  // namespace hjblab::coeffs
