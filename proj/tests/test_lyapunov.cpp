#include "hjblab/error.hpp"
#include "hjblab/lyapunov.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace hjblab;
using namespace hjblab::lyapunov;
using hjblab::matrixdom::MatrixCoefficients;
using hjblab::matrixdom::SpdPoint;

namespace {

RdGrowthParams rd(double beta1, double gamma1, double kappa = 1.0, double alpha1 = 1.0) {
  RdGrowthParams p;
  p.beta1 = beta1;
  p.gamma1 = gamma1;
  p.gamma2 = std::max(gamma1, 0.0);
  p.alpha1 = alpha1;
  p.kappa_lo = p.kappa_hi = kappa;
  return p;
}

Mat scalar(double v) { return Mat::Constant(1, 1, v); }

MatrixCoefficients cir_instance(double L) {
  auto c = matrixdom::wishart_coefficients({scalar(L), scalar(-1.0), scalar(1.0)});
  c.V = [](const Mat& x) { return -x.trace(); };
  c.Abar = matrixdom::proportional_abar(c, 1.0);
  c.kappa_lo = c.kappa_hi = 1.0;
  return c;
}

// Growth data for the L = 2 instance: 4x - 2x^2 <= -1.5 x^2 + 8.
MatrixGrowthParams cir_growth() {
  MatrixGrowthParams p;
  p.n0 = 1.0;
  p.alpha1 = 1.0;
  p.beta1 = 1.5;
  p.C1 = 8.0;
  p.gamma1 = p.gamma2 = 1.0;
  p.C2 = 0.0;
  p.eps = 1.0;
  p.c0 = p.c1 = 1.0;
  return p;
}

std::vector<std::vector<double>> singleton_shells(std::initializer_list<double> v) {
  std::vector<std::vector<double>> out;
  for (double x : v) out.push_back({x});
  return out;
}

}  // namespace

TEST_CASE("r^d case classification") {
  auto a = check_rd_case(rd(1.0, 1.5));
  CHECK(a.tag == GrowthCase::BothPositive);
  CHECK(a.pass);

  auto b = check_rd_case(rd(1.0, -0.6));
  CHECK(b.tag == GrowthCase::MeanReversionOnly);
  CHECK_FALSE(b.pass);
  REQUIRE(b.gate_value);
  CHECK(*b.gate_value == doctest::Approx(-0.2));

  auto c = check_rd_case(rd(0.0, 0.0));
  CHECK(c.tag == GrowthCase::Infeasible);
  CHECK_FALSE(c.pass);

  auto p = rd(-0.5, 1.0);
  try {
    check_rd_case(p);
    FAIL("expected incomplete parameters");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::IncompleteParams);
  }
  p.alpha2 = 0.5;
  CHECK(check_rd_case(p).tag == GrowthCase::PotentialOnly);
  CHECK(check_rd_case(p).pass);
}

TEST_CASE("mean-reversion gate is invariant under state rescaling") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2.0, 2.0), pos(0.1, 3.0);
  for (int k = 0; k < 200; ++k) {
    auto p = rd(pos(rng), u(rng), pos(rng), pos(rng));
    const double s = pos(rng);
    auto q = p;
    q.gamma1 = s * s * p.gamma1;
    q.alpha1 = p.alpha1 / (s * s);
    const auto a = check_rd_case(p), b = check_rd_case(q);
    CHECK(a.tag == b.tag);
    CHECK(a.pass == b.pass);
  }
}

TEST_CASE("r^d synthesis examples") {
  const auto s = synth_rd_lyapunov(rd(1.0, 1.5));
  REQUIRE(s.feasible);
  CHECK(s.zero_roots.first == doctest::Approx(-1.0));
  CHECK(s.zero_roots.second == doctest::Approx(3.0));
  CHECK(s.c == doctest::Approx(1.0));
  CHECK(s.delta > 1.0);
  CHECK(s.c * s.delta < 3.0);
  CHECK(s.c_interval.first >= 0.0);
  CHECK(s.c_interval.second <= 3.0);

  const auto z = synth_rd_lyapunov(rd(1.0, 0.0));
  REQUIRE(z.feasible);
  CHECK(z.zero_roots.first == doctest::Approx(0.0));
  CHECK(z.zero_roots.second == doctest::Approx(2.0));
  CHECK(z.c == doctest::Approx(1.0));

  const auto bad = synth_rd_lyapunov(rd(1.0, -0.6));
  CHECK_FALSE(bad.feasible);
  CHECK(std::isnan(bad.zero_roots.first));
}

TEST_CASE("synthesized r^d constants satisfy the quadratic inequalities") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0), pos(0.1, 3.0);
  int feasible = 0;
  for (int k = 0; k < 500; ++k) {
    auto p = rd(u(rng), u(rng), pos(rng), pos(rng));
    p.gamma2 = std::abs(p.gamma1) + pos(rng);
    p.alpha2 = pos(rng);
    const auto s = synth_rd_lyapunov(p);
    if (!s.feasible) continue;
    ++feasible;
    const auto q = [&](double c) {
      return 0.5 * p.kappa_hi * p.alpha1 * c * c - p.beta1 * c - p.gamma1;
    };
    CHECK(s.eps0 > 0.0);
    CHECK(q(s.c) <= -s.eps0 + 1e-12);
    CHECK(q(s.delta * s.c) <= -0.5 * s.eps0 + 1e-12);
    CHECK(s.alpha * (s.delta * s.c + s.c_tilde) / 2.0 < s.eps0);
    if (p.beta1 > 0.0)
      CHECK(s.c_tilde * p.beta1 > p.gamma2);
    else
      CHECK(0.5 * p.kappa_lo * *p.alpha2 * s.c_tilde * s.c_tilde + p.beta1 * s.c_tilde - p.gamma2 > 0.0);
  }
  CHECK(feasible > 100);
}

TEST_CASE("divergence trend on precomputed values") {
  CHECK(verify_divergence(singleton_shells({-1.5, -7.5, -17.5}), Direction::MinusInfinity).pass);
  CHECK_FALSE(verify_divergence(singleton_shells({0.0, 0.0, 0.0}), Direction::MinusInfinity).pass);
  CHECK_FALSE(verify_divergence(singleton_shells({-1.5, -7.5, -7.0}), Direction::MinusInfinity).pass);
  CHECK(verify_divergence(singleton_shells({1.0, 5.0, 20.0}), Direction::PlusInfinity).pass);
  CHECK_FALSE(verify_divergence(singleton_shells({1.0, 5.0, 8.0}), Direction::PlusInfinity).pass);
  try {
    verify_divergence(singleton_shells({-1.0, -20.0}), Direction::MinusInfinity);
    FAIL("expected insufficient probe");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InsufficientProbe);
  }
}

TEST_CASE("lq shell maxima at radii 2, 4, 6") {
  coeffs::LqParams lp;
  lp.gamma = 0.0;
  const auto field = coeffs::make_lq(lp);
  const auto phi = coeffs::quadratic_function(Mat::Identity(1, 1), Vec::Zero(1), 0.0);
  const auto t = verify_lyapunov_divergence(field, phi, sphere_shells(1, {2, 4, 6}), Direction::MinusInfinity);
  REQUIRE(t.shell_values.size() == 3);
  CHECK(t.shell_values[0] == doctest::Approx(-1.5));
  CHECK(t.shell_values[1] == doctest::Approx(-7.5));
  CHECK(t.shell_values[2] == doctest::Approx(-17.5));
  CHECK(t.pass);

  lp.v0 = 0.0;
  auto flat = coeffs::make_lq(lp).with_potential([](const Vec&) { return 0.0; }, "-zero");
  CHECK_FALSE(verify_lyapunov_divergence(flat, coeffs::constant_function(1, 0.0),
                                         sphere_shells(1, {2, 4, 6}), Direction::MinusInfinity)
                  .pass);

  RdGrowthParams p = rd(1.0, 0.0);
  p.gamma2 = 0.0;
  const auto s = synth_rd_lyapunov(p);
  REQUIRE(s.feasible);
  const auto up = verify_lyapunov_divergence(field, rd_psi0(1, s), sphere_shells(1, {2, 4, 6}),
                                             Direction::PlusInfinity);
  CHECK(up.monotone);
  CHECK(up.sign_ok);
  // Quadratic growth from radius 2 to 6 stays near 9x, short of the 10x margin.
  CHECK(up.growth < 10.0);
  CHECK_FALSE(up.pass);
  CHECK(verify_lyapunov_divergence(field, rd_psi0(1, s), sphere_shells(1, default_radii(6.0)),
                                   Direction::PlusInfinity)
            .pass);
}

TEST_CASE("feasible r^d synthesis passes the divergence checks") {
  for (int dim : {1, 2}) {
    coeffs::LqParams lp;
    lp.dim = dim;
    const auto field = coeffs::make_lq(lp);
    std::vector<Vec> samples;
    for (const auto& sh : sphere_shells(dim, {0.5, 1.0, 2.0, 3.0, 4.0, 5.0}))
      samples.insert(samples.end(), sh.begin(), sh.end());
    const auto g = estimate_rd_growth(field, samples, 2.0);
    CHECK(g.empirical);
    CHECK(g.beta1 == doctest::Approx(1.0));
    CHECK(g.gamma1 == doctest::Approx(1.5));
    const auto s = synth_rd_lyapunov(g);
    REQUIRE(s.feasible);
    const auto shells = sphere_shells(dim, default_radii(5.0));
    CHECK(verify_lyapunov_divergence(field, rd_phi0(dim, s), shells, Direction::MinusInfinity).pass);
    CHECK(verify_lyapunov_divergence(field, coeffs::scale(rd_phi0(dim, s), s.delta), shells,
                                     Direction::MinusInfinity)
              .pass);
    CHECK(verify_lyapunov_divergence(field, rd_psi0(dim, s), shells, Direction::PlusInfinity).pass);
  }
}

TEST_CASE("sphere shells have the requested radii") {
  const auto sh = sphere_shells(3, {1.0, 2.5});
  REQUIRE(sh.size() == 2);
  CHECK(sh[0].size() == 6 + 8);
  for (const auto& x : sh[1]) CHECK(x.norm() == doctest::Approx(2.5));
}

TEST_CASE("matrix assumptions on the cir instance") {
  const auto probe = default_matrix_probe(1, 1.0);
  const auto good = check_matrix_assumptions(cir_instance(2.0), cir_growth(), probe);
  CHECK(good.tag == GrowthCase::BothPositive);
  for (const auto& ic : good.inequalities) CHECK_MESSAGE(ic.pass, ic.name);
  for (const auto& lc : good.limits) CHECK_MESSAGE(lc.pass, lc.name);
  CHECK(good.pass);
  CHECK(good.alpha3_empirical == doctest::Approx(1.0));  // Tr(x x x) = |x|^3

  // H_eps + c0 log x = (2 - eps)/x - 2 + c0 log x at the det shells.
  const auto& ii = good.limits[1].trend.shell_values;
  for (int k = 0; k < 3; ++k) {
    const double x = std::pow(10.0, -(k + 1));
    CHECK(ii[k] == doctest::Approx(1.0 / x - 2.0 + std::log(x)));
  }

  const auto bad = check_matrix_assumptions(cir_instance(1.0), cir_growth(), probe);
  CHECK_FALSE(bad.pass);
  CHECK_FALSE(bad.limits[0].pass);
  CHECK_FALSE(bad.limits[2].pass);

  // V = 0 reduces the last condition to lim H_0 = inf.
  for (double L : {1.0, 2.0}) {
    auto c = cir_instance(L);
    c.V = [](const Mat&) { return 0.0; };
    auto gp = cir_growth();
    gp.gamma1 = gp.gamma2 = 0.0;
    const auto r = check_matrix_assumptions(c, gp, probe);
    const bool gate = matrixdom::check_wishart_gate({scalar(L), scalar(-1.0), scalar(1.0)});
    CHECK(r.limits[2].pass == gate);
  }

  MatrixProbe thin = probe;
  thin.det_shells.pop_back();
  try {
    check_matrix_assumptions(cir_instance(2.0), cir_growth(), thin);
    FAIL("expected a coverage error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Coverage);
  }
}

TEST_CASE("matrix synthesis on the cir instance") {
  const auto c = cir_instance(2.0);
  const auto probe = default_matrix_probe(1, 1.0);

  // Interval arithmetic with beta1 = 2: roots of -4 c^2 + 2 c + 1.
  auto gp2 = cir_growth();
  gp2.beta1 = 2.0;
  gp2.C1 = 4.0 * 32.0 * 3.0;  // covers 4|x| on the outermost shell
  const auto s2 = synth_matrix_lyapunov(c, gp2, probe);
  CHECK(s2.zero_roots.first == doctest::Approx(-0.309).epsilon(1e-2));
  CHECK(s2.zero_roots.second == doctest::Approx(0.809).epsilon(1e-2));
  CHECK(s2.c_hi == doctest::Approx(0.4).epsilon(0.02));
  CHECK(s2.k_lo == doctest::Approx(2.0));

  const auto gp = cir_growth();
  const auto s = synth_matrix_lyapunov(c, gp, probe);
  for (const auto& m : s.diagnostics) MESSAGE(m);
  REQUIRE(s.feasible);
  CHECK(s.k_lo == doctest::Approx(2.0));
  CHECK(s.c_lo == doctest::Approx(1.0 / 16.0));
  CHECK(s.delta > 1.0);
  CHECK(s.delta * s.c_lo < gp.eps / (4.0 * gp.kappa_hi));
  const double ka = 4.0 * gp.kappa_hi * gp.alpha1;
  for (double ch : {s.c_hi, s.delta * s.c_hi})
    CHECK(gp.gamma1 + gp.beta1 * ch - ka * ch * ch >= s.eps0);
  // Both alpha inequalities hold with a factor-2 margin.
  CHECK(2.0 * s.alpha * (s.delta * s.c_hi + s.k_hi) <= s.eps0 * (1 + 1e-12));
  CHECK(2.0 * s.alpha * (1.0 + s.k_lo / (s.delta * s.c_lo)) <= gp.c0 * (1 + 1e-12));
  CHECK(s.K == doctest::Approx(s.k_lo / s.c_lo + s.k_hi / s.c_hi + 1.0));
  CHECK(s.slack.at("phi0 min") >= 0.0);

  const auto phi = matrixdom::phi0_function(1, matrix_phi0_params(s));
  const auto psi = matrixdom::psi0_function(1, matrix_psi0_params(s));
  for (const auto* sh : {&probe.det_shells, &probe.norm_shells}) {
    CHECK(verify_lyapunov_divergence(c, phi, *sh, Direction::MinusInfinity).pass);
    CHECK(verify_lyapunov_divergence(c, psi, *sh, Direction::PlusInfinity).pass);
  }

  const auto bad = synth_matrix_lyapunov(cir_instance(1.0), gp, probe);
  CHECK_FALSE(bad.feasible);
  CHECK_FALSE(bad.inconclusive);
}

TEST_CASE("calibrated phi0 bound holds on fresh points") {
  const auto c = cir_instance(2.0);
  const auto gp = cir_growth();
  const auto probe = default_matrix_probe(1, 1.0);
  const auto s = synth_matrix_lyapunov(c, gp, probe);
  REQUIRE(s.feasible);
  const double C = calibrate_bound_constant(c, s, gp, probe);
  const matrixdom::BoundParams b{gp.kappa_hi, gp.alpha1, gp.beta1, gp.gamma1, C};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> lg(-3.0, 2.0);
  for (int k = 0; k < 200; ++k) {
    const SpdPoint x(scalar(std::pow(10.0, lg(rng))));
    CHECK(matrixdom::fphi0_upper_bound(c, matrix_phi0_params(s), b, x).holds);
  }
}

TEST_CASE("two-dimensional wishart probe") {
  const Mat L = 2.0 * Mat::Identity(2, 2);
  auto c = matrixdom::wishart_coefficients({L, -Mat::Identity(2, 2), 0.5 * Mat::Identity(2, 2)});
  c.V = [](const Mat& x) { return -x.norm(); };
  c.Abar = matrixdom::proportional_abar(c, 1.0);
  const auto probe = default_matrix_probe(2, 1.0);
  CHECK(probe.det_shells.size() == 3);
  for (std::size_t k = 1; k < probe.det_shells.size(); ++k)
    CHECK(probe.det_shells[k][0].matrix().determinant() <
          probe.det_shells[k - 1][0].matrix().determinant());
  for (const auto& sh : probe.norm_shells)
    for (const auto& x : sh) CHECK(x.matrix().norm() >= 1.0);
  MatrixGrowthParams gp;
  gp.n0 = 1.0;
  gp.alpha1 = 0.25 * std::sqrt(2.0) * 2.0;  // Tr x Tr(g) <= sqrt(2) |x| Tr g
  gp.beta1 = 1.5;
  gp.C1 = 50.0;
  gp.gamma1 = gp.gamma2 = 1.0;
  const auto r = check_matrix_assumptions(c, gp, probe);
  for (const auto& ic : r.inequalities) CHECK_MESSAGE(ic.pass, ic.name);
  const auto s = synth_matrix_lyapunov(c, gp, probe);
  for (const auto& m : s.diagnostics) MESSAGE(m);
  CHECK(s.feasible);
}
