#include "hjblab/coeffs.hpp"
#include "hjblab/error.hpp"
#include "hjblab/matrixdom.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace hjblab;
using namespace hjblab::matrixdom;
using testsupport::general_coeffs;
using testsupport::random_poly;
using testsupport::random_spd;
using testsupport::random_symmetric;

namespace {

Mat m2(double a, double b, double c, double d) {
  Mat m(2, 2);
  m << a, b, c, d;
  return m;
}

Mat scalar(double a) { return Mat::Constant(1, 1, a); }

WishartParams cir() { return {scalar(2.0), scalar(-1.0), scalar(1.0)}; }

}  // namespace

TEST_CASE("ell unrolls the upper triangle in I order") {
  const Vec y = ell(m2(1.0, 2.0, 2.0, 3.0));
  REQUIRE(y.size() == 3);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 3.0);
  CHECK(y[2] == 2.0);
  CHECK(ell(scalar(5.0))[0] == 5.0);
  const IndexBijection ib(3);
  for (int p = 0; p < 3; ++p) CHECK(ib.I(p) == std::pair{p, p});
  CHECK(ib.J(0) == std::pair{0, 0});
  CHECK(ib.J(1) == std::pair{1, 0});
  CHECK(ib.J(3) == std::pair{0, 1});
}

TEST_CASE("ell round trip on random SPD matrices") {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 100; ++k) {
    const Mat x = random_spd(rng, 3);
    CHECK((ell_inv(ell(x)).matrix() - x).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("ell_inv rejects points outside the cone") {
  Vec y(3);
  y << 1.0, 1.0, 2.0;  // [[1,2],[2,1]] is indefinite
  try {
    (void)ell_inv(y);
    FAIL("expected a cone error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Cone);
  }
  CHECK_THROWS_AS(SpdPoint(scalar(0.0)), Error);
}

TEST_CASE("quad_form examples") {
  for (int d = 1; d <= 3; ++d) {
    const Mat I = Mat::Identity(d, d);
    CHECK(quad_form(I, I, I) == doctest::Approx(4.0 * d));
  }
  const Mat f = m2(1, 0, 0, 2), g = m2(3, 0, 0, 4), th = m2(0, 1, 1, 0);
  CHECK(quad_form(f, g, th) == doctest::Approx(40.0));
  CHECK(quad_form_kron(f, g, th) == doctest::Approx(40.0));
  CHECK_THROWS_AS(quad_form(f, Mat::Identity(3, 3), th), Error);
}

TEST_CASE("quad_form is positive and matches the Kronecker route") {
  std::mt19937_64 rng(2);
  for (int k = 0; k < 50; ++k) {
    const Mat f = random_spd(rng, 3), g = random_spd(rng, 3), th = random_symmetric(rng, 3);
    const double q = quad_form(f, g, th);
    CHECK(q > 0.0);
    CHECK(q == doctest::Approx(quad_form_kron(f, g, th)).epsilon(1e-12));
    Eigen::SelfAdjointEigenSolver<Mat> es(kron(f, g));
    CHECK(es.eigenvalues().minCoeff() > 0.0);
    CHECK(q >= 4.0 * es.eigenvalues().minCoeff() * th.squaredNorm() * (1 - 1e-12));
  }
}

TEST_CASE("trace tensor equals Tr(a^{ij} a^{kl}')") {
  std::mt19937_64 rng(3);
  for (int d : {1, 2, 3}) {
    const Mat F = testsupport::random_matrix(rng, d), G = testsupport::random_matrix(rng, d);
    const Mat T = trace_tensor(F * F.transpose(), G.transpose() * G);
    const auto a = diffusion_factors(F, G);
    for (int p = 0; p < d * d; ++p)
      for (int q = 0; q < d * d; ++q)
        CHECK(T(p, q) == doctest::Approx((a[p] * a[q].transpose()).trace()).epsilon(1e-12));
  }
}

TEST_CASE("h_delta on the CIR instance") {
  const auto c = wishart_coefficients(cir());
  CHECK(h_delta(c, 0.0, SpdPoint(scalar(1.0))) == doctest::Approx(0.0).epsilon(1e-14));
  // closed form (2 - delta)/x - 2
  for (double x : {1e-1, 1e-3, 1e-6})
    CHECK(h_delta(c, 0.0, SpdPoint(scalar(x))) == doctest::Approx(2.0 / x - 2.0));
  std::mt19937_64 rng(4);
  const auto c2 = wishart_coefficients({random_spd(rng, 2), -Mat::Identity(2, 2), random_spd(rng, 2)});
  for (int k = 0; k < 20; ++k) {
    const SpdPoint x(random_spd(rng, 2));
    CHECK(h_delta(c2, 1.0, x) <= h_delta(c2, 0.0, x));
  }
}

TEST_CASE("wishart coefficients") {
  const auto c = wishart_coefficients(cir());
  CHECK(c.f(scalar(3.0))(0, 0) == 3.0);
  CHECK(c.g(scalar(3.0))(0, 0) == 1.0);
  CHECK(c.B(scalar(3.0))(0, 0) == doctest::Approx(4.0 - 6.0));
  const auto z = wishart_coefficients({Mat::Zero(2, 2), Mat::Zero(2, 2), Mat::Identity(2, 2)});
  const Mat x = m2(2.0, 0.5, 0.5, 1.0);
  CHECK(z.B(x).isZero());
  CHECK(z.g(x).isIdentity());
  CHECK(z.g(Mat::Identity(2, 2)) == z.g(x));
  CHECK_THROWS_AS(wishart_coefficients({scalar(1), scalar(1), scalar(0)}), Error);
}

TEST_CASE("wishart gate") {
  CHECK(check_wishart_gate({2.0 * Mat::Identity(2, 2), Mat::Zero(2, 2), Mat::Identity(2, 2)}));
  CHECK_FALSE(check_wishart_gate({scalar(1.0), scalar(0.0), scalar(1.0)}));
  CHECK_FALSE(check_wishart_gate({scalar(std::sqrt(2.0)), scalar(0.0), scalar(1.0)}));
  CHECK(check_wishart_gate({scalar(1.5), scalar(0.0), scalar(1.0)}));
}

TEST_CASE("log det derivatives") {
  CHECK(log_det_gradient(SpdPoint(Mat::Identity(3, 3))).isIdentity());
  const SpdPoint two(scalar(2.0));
  CHECK(log_det_gradient(two)(0, 0) == doctest::Approx(0.5));
  CHECK(log_det_hessian(two)(0, 0) == doctest::Approx(-0.25));

  std::mt19937_64 rng(5);
  const int d = 3;
  const Mat x = random_spd(rng, d, 0.5);
  const auto ld = log_det_function(d);
  const Mat G = log_det_gradient(SpdPoint(x));
  const Mat H = log_det_hessian(SpdPoint(x));
  const double h = 1e-5;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      // Entry-wise perturbation; (x + tE) stays near the cone so det is used directly.
      Mat e = Mat::Zero(d, d);
      e(i, j) = h;
      const double fd = (std::log((x + e).determinant()) - std::log((x - e).determinant())) / (2 * h);
      CHECK(G(i, j) == doctest::Approx(fd).epsilon(1e-6));
      const Mat Gp = (x + e).inverse().transpose(), Gm = (x - e).inverse().transpose();
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l)
          CHECK(H(k + l * d, i + j * d) == doctest::Approx((Gp(k, l) - Gm(k, l)) / (2 * h)).epsilon(1e-6));
    }
  const Mat th = random_symmetric(rng, d);
  const Eigen::Map<const Vec> tv(th.data(), th.size());
  const Vec act = H * tv;
  CHECK((Eigen::Map<const Mat>(act.data(), d, d) - log_det_hessian_action(SpdPoint(x), th)).norm() < 1e-12);
}

TEST_CASE("operator identities for log det and norm") {
  std::mt19937_64 rng(6);
  for (int d : {1, 2, 3}) {
    const Mat L = 2.0 * Mat::Identity(d, d) + 0.3 * testsupport::random_matrix(rng, d);
    auto c = wishart_coefficients({L, -0.5 * Mat::Identity(d, d), random_spd(rng, d)});
    for (int k = 0; k < 10; ++k) {
      const SpdPoint x(random_spd(rng, d));
      const Mat& m = x.matrix();
      CHECK(matrix_operator_eval(c, log_det_function(d), x) == doctest::Approx(h_delta(c, 0.0, x)).epsilon(1e-11));
      const Mat f = c.f(m), g = c.g(m), B = c.B(m);
      const double r = m.norm();
      const double expect = ((f.transpose() * g).trace() + f.trace() * g.trace() -
                             2.0 / (r * r) * (f * m * g * m).trace() + (B.transpose() * m).trace()) / r;
      CHECK(matrix_operator_eval(c, norm_function(d), x) == doctest::Approx(expect).epsilon(1e-11));
      c.V = [](const Mat& y) { return -y.trace(); };
      CHECK(matrix_operator_eval(c, constant_matrix_function(d, 4.0), x) == doctest::Approx(-m.trace()));
      c.V = [](const Mat&) { return 0.0; };
    }
  }
}

TEST_CASE("matrix and vectorized operators agree") {
  std::mt19937_64 rng(7);
  for (int d : {2, 3}) {
    const auto c = general_coeffs(d);
    const int n = d * (d + 1) / 2;
    const auto field = vectorize(c, std::vector<double>(n, -100.0), std::vector<double>(n, 100.0));
    double worst = 0.0;
    for (int k = 0; k < 200; ++k) {
      const Polynomial p = random_poly(rng, d * d, 4, 8);
      const SpdPoint x(random_spd(rng, d));
      check_abar_symmetry(c, x.matrix());
      const double lhs = matrix_operator_eval(c, polynomial_matrix_function(p, d), x);
      const double rhs = coeffs::eval_operator(field, coeffs::polynomial_function(vectorize_polynomial(p, d)), ell(x));
      worst = std::max(worst, std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1.0}));
    }
    CHECK(worst <= 1e-8);
  }
}

TEST_CASE("doubling quad-form identity and norm sandwich") {
  std::mt19937_64 rng(8);
  for (int d : {1, 2, 3}) {
    const IndexBijection ib(d);
    const int n = ib.size();
    for (int k = 0; k < 20; ++k) {
      const Mat F = testsupport::random_matrix(rng, d), G = testsupport::random_matrix(rng, d);
      const auto a = diffusion_factors(F, G);
      Mat ahat(n, d * d);
      for (int p = 0; p < n; ++p)
        for (int q = 0; q < d * d; ++q) {
          const auto [i, j] = ib.I(p);
          const auto [kk, l] = ib.J(q);
          ahat(p, q) = a[i + j * d](kk, l);
        }
      Vec xi(n);
      for (int p = 0; p < n; ++p) xi[p] = std::normal_distribution<double>()(rng);
      const Mat th = symmetric_from_ell(xi, d);
      const Mat Dth = doubled_diagonal(th);
      const Mat T = trace_tensor(F * F.transpose(), G.transpose() * G);
      const Eigen::Map<const Vec> dv(Dth.data(), Dth.size());
      CHECK(4.0 * xi.dot(ahat * ahat.transpose() * xi) == doctest::Approx(dv.dot(T * dv)).epsilon(1e-12));
      CHECK(th.squaredNorm() <= Dth.squaredNorm());
      CHECK(Dth.squaredNorm() <= 4.0 * th.squaredNorm() * (1 + 1e-15));
    }
  }
}

TEST_CASE("diagonal doubling can quadruple the squared norm") {
  for (int d : {1, 2, 3}) {
    const Mat I = Mat::Identity(d, d);
    CHECK(doubled_diagonal(I).squaredNorm() == doctest::Approx(4.0 * I.squaredNorm()));
  }
}

TEST_CASE("trace inequalities on SPD triples") {
  std::mt19937_64 rng(9);
  for (int k = 0; k < 100; ++k) {
    const Mat a = random_spd(rng, 3), b = random_spd(rng, 3), e = random_spd(rng, 3);
    CHECK((a * b).trace() <= a.trace() * b.trace());
    CHECK((a * b * e * b).trace() <= a.trace() * e.trace() * b.squaredNorm() * (1 + 1e-12));
  }
}

TEST_CASE("cutoff support and smoothness") {
  const Cutoff eta{1.0};
  CHECK(eta.value(1.9) == 0.0);
  CHECK(eta.value(2.0) == 0.0);
  CHECK(eta.value(3.0) == 1.0);
  CHECK(eta.value(7.0) == 1.0);
  CHECK(eta.value(2.5) == doctest::Approx(0.5));
  for (double r : {2.1, 2.3, 2.5, 2.8, 2.95}) {
    const double h = 1e-5;
    CHECK(eta.value(r) >= 0.0);
    CHECK(eta.value(r) <= 1.0);
    CHECK(eta.d1(r) == doctest::Approx((eta.value(r + h) - eta.value(r - h)) / (2 * h)).epsilon(1e-6));
    CHECK(eta.d2(r) == doctest::Approx((eta.d1(r + h) - eta.d1(r - h)) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("phi0 and psi0 values") {
  const Phi0Params phi{1.0, 1.0, 0.0, 1.0};
  CHECK(phi0_matrix(phi, SpdPoint(scalar(10.0))) == doctest::Approx(10.0 - std::log(10.0)));
  CHECK(phi0_matrix({0.3, 0.7, 2.5, 1.0}, SpdPoint(Mat::Identity(2, 2))) == doctest::Approx(2.5));
  CHECK(psi0_matrix({2.0, 1.0, 1.0}, SpdPoint(scalar(10.0))) == doctest::Approx(2.0 * std::log(10.0) - 10.0));
  double prev = -1e300;
  for (double e : {1e-1, 1e-3, 1e-6, 1e-9}) {
    const double v = phi0_matrix(phi, SpdPoint(m2(1.0, 0.0, 0.0, e)));
    CHECK(v > prev);
    prev = v;
  }
  prev = -1e300;
  for (double s : {5.0, 10.0, 100.0}) {
    const double v = phi0_matrix(phi, SpdPoint(s * Mat::Identity(2, 2)));
    CHECK(v > prev);
    prev = v;
  }
}

TEST_CASE("phi0 function derivatives match finite differences") {
  std::mt19937_64 rng(10);
  const int d = 2;
  const Phi0Params phi{0.2, 0.4, 1.0, 1.0};
  const auto fn = phi0_function(d, phi);
  for (double s : {0.7, 1.25, 1.7, 3.0}) {
    // Norms near the cutoff transition band (2, 3).
    Mat x = random_spd(rng, d);
    x *= s * 2.0 / x.norm() * 1.2;
    const Mat G = fn.grad(x), H = fn.hess(x);
    const double h = 1e-5;
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        Mat e = Mat::Zero(d, d);
        e(i, j) = h;
        CHECK(G(i, j) == doctest::Approx((fn.value(x + e) - fn.value(x - e)) / (2 * h)).epsilon(1e-6));
        const Mat dG = (fn.grad(x + e) - fn.grad(x - e)) / (2 * h);
        for (int k = 0; k < d; ++k)
          for (int l = 0; l < d; ++l)
            CHECK(H(k + l * d, i + j * d) == doctest::Approx(dG(k, l)).epsilon(1e-5));
      }
    CHECK(fn.value(x) == doctest::Approx(phi0_matrix(phi, SpdPoint(x))));
  }
}

TEST_CASE("fphi0 bound without the norm indicator") {
  auto c = wishart_coefficients(cir());
  c.V = [](const Mat& x) { return -x(0, 0); };
  const Phi0Params phi{0.2, 0.4, 0.0, 1.0};
  const BoundParams b{1.0, 1.0, 2.0, 1.0, 0.0};
  const SpdPoint x(scalar(0.8));
  CHECK(fphi0_bound_shape(c, phi, b, x) == doctest::Approx(-0.2 * h_delta(c, 0.8, x)));
}

TEST_CASE("spectral probe points sit in the cone with the requested spectra") {
  const auto pts = spectral_probe(2, {{1.0, 1e-3}, {5.0, 2.0}}, 3);
  REQUIRE(pts.size() == 6);
  Eigen::SelfAdjointEigenSolver<Mat> es(pts[1].matrix());
  CHECK(es.eigenvalues()[0] == doctest::Approx(1e-3));
  CHECK(es.eigenvalues()[1] == doctest::Approx(1.0));
}
