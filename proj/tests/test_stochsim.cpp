#include "hjblab/error.hpp"
#include "hjblab/lyapunov.hpp"
#include "hjblab/stochsim.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace hjblab;
using namespace hjblab::stochsim;

namespace {

coeffs::CoefficientField lq(double gamma = 1.5) {
  coeffs::LqParams p;
  p.gamma = gamma;
  return coeffs::make_lq(p);
}

GridPtr box_grid(const coeffs::CoefficientField& f, int n) {
  const auto& d = f.domain();
  return std::make_shared<const Grid>(d.lo, d.hi, std::vector<int>(d.lo.size(), n), d.membership);
}

std::vector<double> sample(const Grid& g, const std::function<double(double)>& f) {
  std::vector<double> v(g.size());
  for (std::size_t n = 0; n < g.size(); ++n) v[n] = f(g.node(n)[0]);
  return v;
}

Vec point(double x) { return Vec::Constant(1, x); }

matrixdom::WishartParams wishart(int d, double L, double K, double Lambda) {
  return {L * Mat::Identity(d, d), K * Mat::Identity(d, d), Lambda * Mat::Identity(d, d)};
}

// Matrix ODE X' = LL' + KX + XK' by RK4.
Mat flow(const matrixdom::WishartParams& p, Mat X, double T) {
  const Mat LL = p.L * p.L.transpose();
  auto f = [&](const Mat& x) -> Mat { return LL + p.K * x + x * p.K.transpose(); };
  const int n = 20000;
  const double h = T / n;
  for (int i = 0; i < n; ++i) {
    const Mat k1 = f(X), k2 = f(X + 0.5 * h * k1), k3 = f(X + 0.5 * h * k2), k4 = f(X + h * k3);
    X += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6;
  }
  return X;
}

// History of the LQ Cauchy problem from v0 on [T - t, T] at spacing dt.
pdesolve::CauchyRun lq_history(const coeffs::CoefficientField& f, GridPtr g,
                               std::vector<double> v0, double T, double t, double dt) {
  pdesolve::CauchyOptions opt;
  opt.save_times = pdesolve::save_grid(T - t - dt, T, dt);
  return pdesolve::solve_cauchy(f, g, std::move(v0), T, opt);
}

}  // namespace

TEST_CASE("configuration validation and seeds") {
  SimConfig c;
  c.dt = 0.0;
  CHECK_THROWS_AS(validate(c), Error);
  c = {};
  c.T = 1.0005;
  CHECK_THROWS_AS(validate(c), Error);
  c = {};
  c.antithetic = true;
  c.n_paths = 3;
  CHECK_THROWS_AS(validate(c), Error);
  CHECK(path_seed(0, 1) == path_seed(0, 1));
  CHECK(path_seed(0, 1) != path_seed(0, 2));
  CHECK(path_seed(1, 1) != path_seed(0, 1));
  CHECK(path_seed(0, 1ull << 32) != path_seed(0, 0));
}

TEST_CASE("zero coefficients give constant paths") {
  coeffs::Domain dom{{-1.0}, {1.0}, {}, "box"};
  coeffs::CoefficientField f(1,
                             {[](const Vec&) { return Mat::Zero(1, 1); },
                              [](const Vec&) { return Mat::Zero(1, 1); },
                              [](const Vec&) { return Vec::Zero(1); }, [](const Vec&) { return 0.0; }},
                             dom, 1.0, 1.0);
  const auto g = box_grid(f, 21);
  const auto drift = TiltedDrift::from_values(f, g, std::vector<double>(g->size(), 0.0));
  SimConfig c;
  c.n_paths = 10;
  c.dt = 0.01;
  c.save_times = {0.5};
  const auto b = simulate_tilted(drift, point(0.3), c);
  for (std::size_t p = 0; p < b.n_paths(); ++p)
    for (std::size_t s = 0; s < b.save_times.size(); ++s) CHECK(b.state(p, s)[0] == 0.3);
  CHECK(b.save_times.size() == 3);
  CHECK_THROWS_AS(b.save_index(0.25), Error);
}

TEST_CASE("drift is exact at nodes") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  const auto drift = TiltedDrift::from_values(f, g, sample(*g, [](double x) { return -x * x / 2; }));
  for (std::size_t n = 1; n + 1 < g->size(); ++n) {
    const double x = g->node(n)[0];
    CHECK(drift.drift(point(x))[0] == doctest::Approx(-2.0 * x).epsilon(1e-12));
  }
}

TEST_CASE("vhat-tilted LQ diffusion is OU with rate 2") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  const auto drift = TiltedDrift::from_values(f, g, sample(*g, [](double x) { return -x * x / 2; }));
  SimConfig c;
  c.dt = 1e-2;
  c.T = 10.0;
  const auto b = simulate_tilted(drift, point(0.5), c);
  std::vector<double> sq(b.n_paths());
  const auto last = b.save_index(10.0);
  for (std::size_t p = 0; p < sq.size(); ++p) sq[p] = b.state(p, last)[0] * b.state(p, last)[0];
  const auto var = estimate("x^2", sq, b.exit, false);
  CHECK(std::abs(var.mean - 0.25) <= 3.0 * var.se);
  CHECK(var.exit_fraction == 0.0);

  SimConfig hc = c;
  hc.n_paths = 2000;
  const auto hist = occupation_histogram(drift, point(0.5), hc, 5.0, -2.0, 2.0, 40);
  const double s2 = 0.25;
  const double l1 = hist.l1_distance([&](double x) {
    return std::exp(-x * x / (2 * s2)) / std::sqrt(2 * std::numbers::pi * s2);
  });
  CHECK(l1 <= 0.05);
}

TEST_CASE("antithetic pairing reduces the stationary-mean error") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  const auto drift = TiltedDrift::from_values(f, g, sample(*g, [](double x) { return -x * x / 2; }));
  SimConfig c;
  c.n_paths = 2000;
  c.dt = 1e-2;
  c.T = 5.0;
  auto id = [](const double* x) { return x[0]; };
  const auto plain = time_average(drift, point(0.5), c, 2.0, id, "mean");
  c.antithetic = true;
  const auto anti = time_average(drift, point(0.5), c, 2.0, id, "mean");
  CHECK(anti.n_effective == 1000);
  CHECK(plain.se >= 1.3 * anti.se);
}

TEST_CASE("bundles do not depend on the thread count") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  const auto drift = TiltedDrift::from_values(f, g, sample(*g, [](double x) { return -x * x / 2; }));
  SimConfig c;
  c.n_paths = 300;
  c.dt = 1e-2;
  c.save_times = {0.25, 0.5};
  const auto a = simulate_tilted(drift, point(0.1), c);
  c.threads = 4;
  const auto b = simulate_tilted(drift, point(0.1), c);
  CHECK(a.states == b.states);
  CHECK(a.seeds == b.seeds);
  std::vector<double> va, vb;
  for (std::size_t p = 0; p < a.n_paths(); ++p) {
    va.push_back(a.state(p, 2)[0]);
    vb.push_back(b.state(p, 2)[0]);
  }
  CHECK(estimate("x", va, a.exit, false).mean == estimate("x", vb, b.exit, false).mean);
}

TEST_CASE("paths leaving the box are frozen and reported twice") {
  const auto f = lq();
  const auto g = std::make_shared<const Grid>(std::vector<double>{-1.0}, std::vector<double>{1.0},
                                              std::vector<int>{41});
  const auto drift = TiltedDrift::from_values(f, g, std::vector<double>(g->size(), 0.0));
  SimConfig c;
  c.n_paths = 400;
  c.dt = 1e-2;
  c.T = 2.0;
  const auto b = simulate_tilted(drift, point(0.8), c);
  CHECK(b.exit_fraction() > 0.0);
  CHECK(b.exit_fraction() < 1.0);
  std::vector<double> x(b.n_paths());
  for (std::size_t p = 0; p < x.size(); ++p) {
    x[p] = b.state(p, 1)[0];
    CHECK(std::abs(x[p]) <= 1.0);
    if (b.exit[p] != ExitKind::None) CHECK(b.exit_time[p] > 0.0);
  }
  const auto e = estimate("x", x, b.exit, false);
  CHECK(e.n_excl < e.n_effective);
  CHECK(e.exit_fraction == doctest::Approx(b.exit_fraction()));
}

TEST_CASE("CIR stationary mean and weak order") {
  const auto p = wishart(1, 2.0, -1.0, 1.0);
  const matrixdom::SpdPoint x0(Mat::Constant(1, 1, 2.0));
  SimConfig c;
  c.n_paths = 2000;
  c.dt = 1e-2;
  c.T = 20.0;
  const auto mean = wishart_time_average(p, x0, c, 2.0, [](const Mat& x) { return x(0, 0); }, "mean");
  CHECK(std::abs(mean.mean - 2.0) <= 3.0 * mean.se);

  // Euler keeps the stationary mean of an affine drift unbiased; the second moment
  // carries the O(dt) bias 2 dt / (1 - dt).
  auto m2 = [](const Mat& x) { return x(0, 0) * x(0, 0); };
  c.n_paths = 10000;
  c.T = 200.0;
  c.dt = 0.1;
  const auto coarse = wishart_time_average(p, x0, c, 10.0, m2, "m2");
  c.dt = 0.05;
  const auto fine = wishart_time_average(p, x0, c, 10.0, m2, "m2");
  const double ratio = (coarse.mean - 6.0) / (fine.mean - 6.0);
  MESSAGE("weak-order ratio " << ratio << " (coarse bias " << coarse.mean - 6.0 << " +- "
                              << coarse.se << ", fine bias " << fine.mean - 6.0 << " +- " << fine.se
                              << ")");
  CHECK(ratio >= 1.7);
  CHECK(ratio <= 2.3);
}

TEST_CASE("Wishart with negligible noise follows the matrix flow") {
  matrixdom::WishartParams p{Mat::Identity(2, 2) * 1.5, Mat{{-1.0, 0.3}, {0.0, -0.5}},
                             Mat::Identity(2, 2) * 1e-6};
  const matrixdom::SpdPoint x0(Mat{{1.0, 0.2}, {0.2, 0.5}});
  const Mat exact = flow(p, x0.matrix(), 1.0);
  double err[2];
  int i = 0;
  for (double dt : {1e-2, 5e-3}) {
    SimConfig c;
    c.n_paths = 2;
    c.dt = dt;
    const auto b = simulate_wishart(p, x0, c);
    const auto s = b.state(0, b.save_index(1.0));
    err[i++] = (Eigen::Map<const Mat>(s.data(), 2, 2) - exact).cwiseAbs().maxCoeff();
  }
  CHECK(err[0] <= 0.05);
  CHECK(err[0] / err[1] == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("gate-true Wishart in d = 2: symmetric states and rare clipping") {
  const auto p = wishart(2, 2.0, -1.0, 1.0);
  REQUIRE(matrixdom::check_wishart_gate(p));
  const matrixdom::SpdPoint x0(Mat::Identity(2, 2));
  SimConfig c;
  c.n_paths = 500;
  c.dt = 1e-3;
  c.T = 2.0;
  c.save_times = {0.5, 1.0, 1.5};
  const auto b = simulate_wishart(p, x0, c);
  CHECK(b.clip_fraction() < 1e-3);
  for (std::size_t q = 0; q < b.n_paths(); ++q)
    for (std::size_t s = 0; s < b.save_times.size(); ++s) {
      const auto x = b.state(q, s);
      CHECK(x[1] == x[2]);
    }
}

TEST_CASE("functionals vanish when v0 = vhat") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  const auto pair = pdesolve::solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0),
                                                          pdesolve::default_anchor(*g));
  const auto run = lq_history(f, g, pair.vhat, 2.0, 1.0, 1e-2);
  SimConfig c;
  c.n_paths = 200;
  c.dt = 1e-2;
  const auto fn = mc_functionals(f, run.history, pair, 1.0, 2.0, point(0.0), c);
  CHECK(std::abs(fn.f_est.mean) <= 1e-20);
  CHECK(std::abs(fn.supdev_est.mean) <= 1e-10);
  CHECK(std::abs(fn.identity_rhs) <= 1e-10);
  CHECK(std::abs(fn.z_energy.mean) <= 1e-20);
  CHECK(fn.exp_bound_holds);
  CHECK_THROWS_AS(mc_functionals(f, run.history, pair, 1.0, 4.0, point(0.0), c), Error);
}

TEST_CASE("LQ functionals decay in T and satisfy the identity") {
  const auto f = lq();
  const auto g = box_grid(f, 241);
  const auto pair = pdesolve::solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0),
                                                          pdesolve::default_anchor(*g));
  SimConfig c;
  c.n_paths = 4000;
  c.dt = 1e-3;
  std::vector<Functionals> out;
  for (double T : {2.0, 4.0}) {
    const auto run = lq_history(f, g, std::vector<double>(g->size(), 0.0), T, 1.0, c.dt);
    out.push_back(mc_functionals(f, run.history, pair, 1.0, T, point(0.0), c));
  }
  const auto& a = out[0];
  const auto& b = out[1];
  CHECK(a.f_est.mean > 0.0);
  CHECK(b.f_est.mean <= a.f_est.mean / 10.0);
  CHECK(a.f_est.mean - b.f_est.mean > 3.0 * std::hypot(a.f_est.se, b.f_est.se));
  CHECK(b.z_energy.mean <= a.z_energy.mean / 10.0);
  CHECK(a.z_score <= 3.0);
  CHECK(b.z_score <= 3.0);
  CHECK(a.exp_bound_holds);
  CHECK(a.routes_agree);
  // kappa = 1 and Abar = A: the energy is twice f.
  CHECK(a.z_energy.mean == doctest::Approx(2.0 * a.f_est.mean).epsilon(1e-9));

  const auto ic = mc_identity_check(f, lq_history(f, g, std::vector<double>(g->size(), 0.0), 2.0, 1.0, c.dt).history,
                                    pair, 1.0, 2.0, point(0.0), c);
  CHECK(ic.z_score == doctest::Approx(a.z_score));
  CHECK(ic.rhs == doctest::Approx(a.identity_rhs));
}

TEST_CASE("sandwich collapses to the PDE value for kappa_lo = kappa_hi") {
  const auto f = lq();
  const auto g = box_grid(f, 241);
  lyapunov::RdGrowthParams gp;
  gp.alpha1 = 1.0;
  gp.beta1 = 1.0;
  gp.gamma1 = gp.gamma2 = 1.5;
  const auto syn = lyapunov::synth_rd_lyapunov(gp);
  REQUIRE(syn.feasible);
  const auto phi0 = lyapunov::rd_phi0(1, syn);
  // v(1, 0) = b(1) from the Riccati system a' = -a^2 - 2a + 3, b' = -a/2.
  double a = 0.0, b = 0.0;
  const int n = 100000;
  const double h = 1.0 / n;
  for (int i = 0; i < n; ++i) {
    const double am = a + 0.5 * h * (-a * a - 2 * a + 3);
    b += h * (-am / 2);
    a += h * (-am * am - 2 * am + 3);
  }
  SimConfig c;
  c.n_paths = 10000;
  c.dt = 1e-3;
  auto zero = [](const Vec&) { return 0.0; };
  const auto s1 = mc_sandwich(f, g, phi0, zero, 1.0, 1.0, point(0.0), c);
  CHECK(s1.ess_ok);
  CHECK(std::abs(s1.psi.mean - b) <= 3.0 * s1.psi.se);
  const auto s2 = mc_sandwich(f, g, phi0, zero, 2.0, 1.0, point(0.0), c);
  CHECK(s2.psi.mean >= s1.psi.mean - 3.0 * std::hypot(s1.psi.se, s2.psi.se));
}
