#include "hjblab/error.hpp"
#include "hjblab/matrixdom.hpp"
#include "hjblab/pdesolve.hpp"

#include <doctest.h>

#include <cmath>

using namespace hjblab;
using namespace hjblab::pdesolve;

namespace {

coeffs::CoefficientField lq(double beta = 1.0, double gamma = 1.5, double half = 6.0) {
  coeffs::LqParams p;
  p.beta = beta;
  p.gamma = gamma;
  p.half_width = half;
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

// Riccati system for v = -a x^2 / 2 + b on the default LQ instance, by RK4.
struct Riccati {
  double a = 0.0, b = 0.0;
  void advance(double T, double h = 1e-4) {
    auto fa = [](double a) { return -a * a - 2.0 * a + 3.0; };
    const int n = static_cast<int>(std::ceil(T / h));
    const double dt = T / n;
    for (int i = 0; i < n; ++i) {
      const double k1 = fa(a), k2 = fa(a + 0.5 * dt * k1), k3 = fa(a + 0.5 * dt * k2),
                   k4 = fa(a + dt * k3);
      const double l1 = -a / 2, l2 = -(a + 0.5 * dt * k1) / 2, l3 = -(a + 0.5 * dt * k2) / 2,
                   l4 = -(a + dt * k3) / 2;
      a += dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6;
      b += dt * (l1 + 2 * l2 + 2 * l3 + l4) / 6;
    }
  }
};

double sup_diff(const Grid& g, const std::vector<double>& u, const std::vector<double>& w,
                double radius) {
  double m = 0.0;
  for (std::size_t n = 0; n < g.size(); ++n)
    if (g.active(n) && std::abs(g.node(n)[0]) <= radius + 1e-12) m = std::max(m, std::abs(u[n] - w[n]));
  return m;
}

coeffs::CoefficientField cir_field() {
  auto c = matrixdom::wishart_coefficients({Mat::Constant(1, 1, 2.0), Mat::Constant(1, 1, -1.0),
                                            Mat::Constant(1, 1, 1.0)});
  c.V = [](const Mat& x) { return -x.trace(); };
  c.Abar = matrixdom::proportional_abar(c, 1.0);
  c.kappa_lo = c.kappa_hi = 1.0;
  return matrixdom::vectorize(c, {0.05}, {8.0});
}

}  // namespace

TEST_CASE("constant data with zero potential is stationary") {
  const auto f = lq(1.0, 0.0);
  const auto g = box_grid(f, 61);
  for (Scheme sc : {Scheme::Explicit, Scheme::Imex}) {
    CauchyOptions opt;
    opt.solver.scheme = sc;
    const auto run = solve_cauchy(f, g, std::vector<double>(g->size(), 5.0), 1.0, opt);
    CHECK(run.final.t == doctest::Approx(1.0));
    for (double x : run.final.values) CHECK(x == doctest::Approx(5.0).epsilon(1e-12));
  }
}

TEST_CASE("LQ Cauchy solution follows the Riccati oracle") {
  const auto f = lq();
  const auto g = box_grid(f, 241);
  CauchyOptions opt;
  opt.solver.cfl = 0.1;
  opt.save_times = {0.5, 1.0, 2.0};
  const auto run = solve_cauchy(f, g, std::vector<double>(g->size(), 0.0), 2.0, opt);
  Riccati r;
  double t = 0.0;
  for (double s : opt.save_times) {
    r.advance(s - t);
    t = s;
    const auto exact = sample(*g, [&](double x) { return -r.a * x * x / 2 + r.b; });
    CHECK(sup_diff(*g, run.history.at(s), exact, 3.0) <= 1e-3);
  }
  CHECK(run.cfl_refreshes >= 1);
  CHECK_THROWS_AS(run.history.at(0.75), Error);
}

TEST_CASE("IMEX scheme matches the Riccati oracle") {
  const auto f = lq();
  const auto g = box_grid(f, 241);
  CauchyOptions opt;
  opt.solver.scheme = Scheme::Imex;
  opt.solver.dt_max = 1e-3;
  const auto run = solve_cauchy(f, g, std::vector<double>(g->size(), 0.0), 1.0, opt);
  Riccati r;
  r.advance(1.0);
  const auto exact = sample(*g, [&](double x) { return -r.a * x * x / 2 + r.b; });
  CHECK(sup_diff(*g, run.final.values, exact, 3.0) <= 1e-3);
}

TEST_CASE("nonlinear stepper agrees with the Cole-Hopf linear stepper") {
  auto base = lq(1.0, 1.5, 4.0);
  const auto f = base.with_potential(
      [](const Vec& x) { return -1.5 * x[0] * x[0] + 0.3 * std::cos(x[0]); }, "cos");
  const auto g = box_grid(f, 1601);
  const auto v0 = sample(*g, [](double x) { return 0.2 * std::sin(x); });
  CauchyOptions nl;
  const auto v = solve_cauchy(f, g, v0, 1.0, nl).final;
  CauchyOptions li;
  li.solver.equation = Equation::Linear;
  std::vector<double> w0(v0.size());
  for (std::size_t i = 0; i < v0.size(); ++i) w0[i] = std::exp(v0[i]);
  auto w = solve_cauchy(f, g, w0, 1.0, li).final;
  for (double& x : w.values) x = std::log(x);
  CHECK(sup_diff(*g, v.values, w.values, 2.0) <= 1e-4);
}

TEST_CASE("normalization recovers the LQ ergodic pair") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  const auto pair =
      solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0), default_anchor(*g));
  CHECK(pair.lambdahat == doctest::Approx(-0.5).epsilon(1e-6));
  CHECK(pair.vhat[pair.anchor] == 0.0);
  const auto exact = sample(*g, [](double x) { return -x * x / 2; });
  CHECK(sup_diff(*g, pair.vhat, exact, 6.0) <= 1e-6);
  CHECK(pair.residual <= 10.0 * (pair.truncation_estimate + 1e-9));
}

TEST_CASE("normalization: pure potential and zero potential") {
  {
    const auto f = lq(0.0, 1.0);
    const auto g = box_grid(f, 121);
    const auto pair =
        solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0), default_anchor(*g));
    CHECK(pair.lambdahat == doctest::Approx(-std::sqrt(0.5)).epsilon(1e-6));
  }
  {
    const auto f = lq(1.0, 0.0);
    const auto g = box_grid(f, 61);
    const auto pair =
        solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0), default_anchor(*g));
    CHECK(pair.lambdahat == 0.0);
    for (double x : pair.vhat) CHECK(x == 0.0);
  }
}

TEST_CASE("normalization reports non-convergence with the trace") {
  const auto f = lq();
  const auto g = box_grid(f, 61);
  NormalizationOptions opt;
  opt.T_max = 1.0;
  try {
    solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0), default_anchor(*g), opt);
    FAIL("expected non-convergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NonConvergence);
    CHECK(std::string(e.what()).find("trace") != std::string::npos);
  }
}

TEST_CASE("eigen method: LQ, pure potential, zero potential") {
  const auto f = lq();
  const auto g = box_grid(f, 241);
  const auto eig = solve_ergodic_eigen(f, g, 1.0, default_anchor(*g));
  CHECK(std::abs(eig.lambdahat + 0.5) <= 1e-3);
  CHECK(eig.residual <= 10.0 * (eig.truncation_estimate + 1e-9));
  const auto nrm =
      solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0), default_anchor(*g));
  CHECK(std::abs(eig.lambdahat - nrm.lambdahat) <= 2e-3);

  const auto fp = lq(0.0, 1.0);
  const auto pp = solve_ergodic_eigen(fp, box_grid(fp, 241), 1.0, default_anchor(*g));
  CHECK(std::abs(pp.lambdahat + std::sqrt(0.5)) <= 1e-3);

  const auto f0 = lq(1.0, 0.0);
  const auto z = solve_ergodic_eigen(f0, box_grid(f0, 121), 1.0, default_anchor(*g));
  CHECK(std::abs(z.lambdahat) <= 1e-9);
  for (double x : z.vhat) CHECK(std::abs(x) <= 1e-8);
}

TEST_CASE("CIR ergodic pair on the vectorized half-line") {
  // vhat = -a x with 2a^2 + 2a - 1 = 0 and lambdahat = -4a.
  const double a = (std::sqrt(3.0) - 1.0) / 2.0;
  const auto f = cir_field();
  const auto g = box_grid(f, 400);
  const auto anchor = g->nearest(Vec::Constant(1, 1.0));
  NormalizationOptions opt;
  opt.solver.scheme = Scheme::Imex;
  const auto pair = solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0), anchor, opt);
  CHECK(pair.lambdahat == doctest::Approx(-4.0 * a).epsilon(1e-6));
  const double x0 = g->node(anchor)[0];
  double err = 0.0;
  for (std::size_t n = 0; n < g->size(); ++n)
    err = std::max(err, std::abs(pair.vhat[n] + a * (g->node(n)[0] - x0)));
  CHECK(err <= 1e-6);
  const auto eig = solve_ergodic_eigen(f, g, 1.0, anchor);
  CHECK(std::abs(eig.lambdahat - pair.lambdahat) <= 2e-3);
}

TEST_CASE("difference function and pointwise convergence") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  const auto pair =
      solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0), default_anchor(*g));

  const auto h0 = compute_h(*g, 0.0, pair.vhat, pair);
  for (double x : h0.h) CHECK(x == 0.0);

  CauchyOptions opt;
  opt.save_times = {5.0, 10.0, 20.0};
  const auto run = solve_cauchy(f, g, std::vector<double>(g->size(), 0.0), 20.0, opt);
  std::vector<HField> hs;
  for (double t : opt.save_times) hs.push_back(compute_h(*g, t, run.history.at(t), pair));
  const auto& h20 = hs.back();
  double dev = 0.0;
  for (std::size_t n = 0; n < g->size(); ++n)
    if (std::abs(g->node(n)[0]) <= 3.0) dev = std::max(dev, std::abs(h20.h[n] - h20.C_est));
  CHECK(dev <= 1e-3);
  const auto rep = pointwise_convergence_report(hs, inner_half(*g));
  CHECK(rep.pass);
  CHECK(rep.grad_sup.back() <= 1e-3);
  CHECK(rep.h_increment.size() == 2);
  CHECK(rep.C_trace.size() == 3);

  // v0 = vhat: h stays at round-off.
  const auto rs = solve_cauchy(f, g, pair.vhat, 2.0, CauchyOptions{{}, {1.0, 2.0}, true});
  std::vector<HField> flat;
  for (double t : {0.0, 1.0, 2.0}) flat.push_back(compute_h(*g, t, rs.history.at(t), pair));
  const auto rf = pointwise_convergence_report(flat, inner_half(*g));
  for (double x : rf.h_increment) CHECK(x <= 1e-10);
  for (double x : rf.grad_sup) CHECK(x <= 1e-10);

  const auto other = box_grid(f, 61);
  CHECK_THROWS_AS(compute_h(*other, 0.0, std::vector<double>(other->size(), 0.0), pair), Error);
  CHECK_THROWS_AS(pointwise_convergence_report({hs[0], hs[1]}, inner_half(*g)), Error);
}

TEST_CASE("non-convergent setup surfaces an error") {
  const auto f = lq(1.0, -0.6);
  const auto g = box_grid(f, 61);
  CHECK_THROWS_AS(solve_cauchy(f, g, std::vector<double>(g->size(), 0.0), 20.0, CauchyOptions{}),
                  Error);
}

TEST_CASE("shift invariance and comparison") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  Stepper st(f, g, {});
  SolutionField a{g, 0.0, sample(*g, [](double x) { return 0.3 * std::cos(x); })};
  SolutionField b = a;
  for (double& x : b.values) x += 10.0;
  SolutionField c{g, 0.0, sample(*g, [](double x) { return 0.3 * std::cos(x) + 0.1 * x * x / 36; })};
  const double dt = 0.5 * st.stable_dt(c.values);
  for (int k = 0; k < 400; ++k) {
    st.step(a, dt);
    st.step(b, dt);
    st.step(c, dt);
    double norm = 0.0;
    for (double x : c.values) norm = std::max(norm, std::abs(x));
    for (std::size_t n = 0; n < g->size(); ++n) {
      CHECK(std::abs(b.values[n] - a.values[n] - 10.0) <= 1e-11);
      CHECK(a.values[n] <= c.values[n] + 1e-8 * norm);
    }
  }
}

TEST_CASE("step size and grid errors") {
  const auto f = lq();
  const auto g = box_grid(f, 121);
  Stepper st(f, g, {});
  SolutionField s{g, 0.0, std::vector<double>(g->size(), 0.0)};
  const double bound = st.stable_dt(s.values);
  try {
    st.step(s, 2.0 * bound);
    FAIL("expected step-size error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::StepSize);
  }
  SolutionField wrong{box_grid(f, 61), 0.0, std::vector<double>(61, 0.0)};
  CHECK_THROWS_AS(st.step(wrong, bound), Error);
  const auto one = step_cauchy(s, f, bound);
  CHECK(one.steps == 1);
  CHECK(one.t == doctest::Approx(bound));
}

TEST_CASE("save grid and history lookup") {
  const auto t = save_grid(0.0, 1.0, 0.25);
  REQUIRE(t.size() == 4);
  CHECK(t.back() == doctest::Approx(1.0));
  CHECK_THROWS_AS(save_grid(0.0, 1.0, 0.0), Error);
}

TEST_CASE("doubling the box barely moves the LQ pair") {
  const auto f = lq(1.0, 1.5, 3.0);
  const auto g = box_grid(f, 61);
  const auto pair =
      solve_ergodic_normalization(f, g, std::vector<double>(g->size(), 0.0), default_anchor(*g));
  FieldFactory make = [](const std::vector<double>& lo, const std::vector<double>& hi) {
    coeffs::LqParams p;
    p.half_width = hi[0];
    (void)lo;
    return coeffs::make_lq(p);
  };
  const auto bi = boundary_influence_study(make, *g, [](const Vec&) { return 0.0; }, pair, {});
  CHECK(bi.doubled_hi[0] == doctest::Approx(6.0));
  CHECK(bi.lambda_diff <= 1e-8);
  CHECK(bi.vhat_diff <= 1e-8);
}
