#include "hjblab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>

namespace hjblab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

json strip_timing(const json& report) {
  json out = report;
  out.erase("timing");
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json estimate_json(const stochsim::MCEstimate& e) {
  return {{"mean", num(e.mean)},         {"se", num(e.se)},         {"n_effective", e.n_effective},
          {"mean_excl", num(e.mean_excl)}, {"se_excl", num(e.se_excl)}, {"n_excl", e.n_excl},
          {"exit_fraction", num(e.exit_fraction)}};
}

json vec_json(const Vec& x) { return std::vector<double>(x.data(), x.data() + x.size()); }

struct Stage {
  std::string name;
  std::string status = "pass";
  json results = json::object();
  json verdicts = json::array();
  std::optional<std::string> error;
  std::optional<std::string> reason;  // skipped or short-circuited
  double seconds = 0.0;

  bool check(const std::string& invariant, double value, const std::string& relation,
             double tolerance) {
    bool ok = false;
    if (relation == "<=") ok = value <= tolerance;
    else if (relation == ">=") ok = value >= tolerance;
    else if (relation == "<") ok = value < tolerance;
    else if (relation == ">") ok = value > tolerance;
    verdicts.push_back({{"invariant", invariant},
                        {"value", num(value)},
                        {"relation", relation},
                        {"tolerance", num(tolerance)},
                        {"pass", ok}});
    return ok;
  }
  bool holds(const std::string& invariant, bool ok) {
    verdicts.push_back({{"invariant", invariant}, {"pass", ok}});
    return ok;
  }
  bool passed() const {
    for (const auto& v : verdicts)
      if (!v["pass"].get<bool>()) return false;
    return true;
  }
  json to_json() const {
    json j = {{"name", name}, {"status", status}, {"results", results}, {"verdicts", verdicts}};
    j["error"] = error ? json(*error) : json(nullptr);
    j["reason"] = reason ? json(*reason) : json(nullptr);
    return j;
  }
};

class Csv {
 public:
  Csv(const fs::path& path, const std::vector<std::string>& header) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw Error(ErrorKind::Runtime, "cannot write " + path.string());
    row(header);
    rows_ = 0;
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << csv_field(cells[i]);
    out_ << "\r\n";
    ++rows_;
  }
  std::size_t rows() const { return rows_; }
  const fs::path& path() const { return path_; }
  void close() { out_.close(); }

 private:
  fs::path path_;
  std::ofstream out_;
  std::size_t rows_ = 0;
};

struct Context {
  const ExperimentConfig& cfg;
  fs::path out;
  int threads = 1;
  std::optional<coeffs::CoefficientField> field{};
  std::optional<matrixdom::MatrixCoefficients> mcoef{};
  GridPtr grid{};
  std::optional<lyapunov::SynthesisResult> synth{};
  std::optional<pdesolve::ErgodicPair> pair{};
  std::optional<double> kappa{};  // Abar = kappa A on the grid
  json manifest = json::array();

  bool matrix() const { return cfg.model.family == "wishart-vec"; }
  int dim() const { return cfg.model.dim; }

  void record(Csv& csv, const std::string& description) {
    csv.close();
    manifest.push_back({{"file", csv.path().filename().string()},
                        {"kind", "csv"},
                        {"rows", csv.rows()},
                        {"bytes", fs::file_size(csv.path())},
                        {"content", description}});
  }

  stochsim::SimConfig sim() const {
    auto c = cfg.simulation.sim;
    c.threads = threads;
    return c;
  }

  pdesolve::SolverConfig solver() const {
    pdesolve::SolverConfig s;
    s.scheme = cfg.solver.scheme;
    s.cfl = cfg.solver.cfl;
    s.cfl_refresh = cfg.solver.cfl_refresh;
    s.dt_max = cfg.solver.dt;
    return s;
  }

  std::vector<double> sample(const std::function<double(const Vec&)>& f) const {
    std::vector<double> v(grid->size(), 0.0);
    for (std::size_t n = 0; n < grid->size(); ++n)
      if (grid->active(n)) v[n] = f(grid->node(n));
    return v;
  }

  std::vector<double> v0() const {
    const auto& p = cfg.solver.v0;
    return sample([&](const Vec& x) { return p.value(x); });
  }

  std::vector<std::string> coord_headers() const {
    std::vector<std::string> h;
    for (int i = 0; i < dim(); ++i) h.push_back("x" + std::to_string(i + 1));
    return h;
  }
};

matrixdom::MatrixCoefficients build_matrix(const ModelBlock& m) {
  auto c = matrixdom::wishart_coefficients(m.wishart);
  const Polynomial V = m.V;
  c.V = [V](const Mat& x) { return V.value(matrixdom::ell(x)); };
  c.Abar = matrixdom::proportional_abar(c, m.kappa);
  c.kappa_lo = c.kappa_hi = m.kappa;
  return c;
}

coeffs::CoefficientField build_field(const ModelBlock& m, const std::vector<double>& lo,
                                     const std::vector<double>& hi) {
  if (m.family == "lq") {
    auto p = m.lq;
    p.half_width = std::max(std::abs(lo[0]), std::abs(hi[0]));
    return coeffs::make_lq(p);
  }
  if (m.family == "custom-poly") {
    auto p = m.poly;
    p.lo = lo;
    p.hi = hi;
    return coeffs::make_custom_poly(p, m.samples_per_axis);
  }
  return matrixdom::vectorize(build_matrix(m), lo, hi);
}

Vec box_center(const Grid& g) {
  Vec c(g.dim());
  for (int i = 0; i < g.dim(); ++i) c[i] = 0.5 * (g.lo(i) + g.hi(i));
  return c;
}

double lq_lambda_oracle(const coeffs::LqParams& p) {
  const double disc = p.beta * p.beta + 2.0 * p.kappa * p.a0 * p.gamma;
  if (!(disc >= 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const double a = (-p.beta + std::sqrt(disc)) / (p.kappa * p.a0);
  return -0.5 * p.a0 * a * p.dim + p.v0;
}

// Riccati pair (a, b) of v = -a |x|^2 / 2 + b from v0 = 0, by RK4 at the given times.
std::vector<std::pair<double, double>> lq_riccati(const coeffs::LqParams& p,
                                                  const std::vector<double>& times) {
  auto f = [&](double a) {
    return std::pair{-p.kappa * p.a0 * a * a - 2.0 * p.beta * a + 2.0 * p.gamma,
                     -0.5 * p.a0 * a * p.dim + p.v0};
  };
  std::vector<std::pair<double, double>> out;
  double a = 0.0, b = 0.0, t = 0.0;
  for (double target : times) {
    const int n = std::max(1, static_cast<int>(std::ceil((target - t) / 1e-4)));
    const double h = (target - t) / n;
    for (int i = 0; i < n; ++i) {
      const auto k1 = f(a);
      const auto k2 = f(a + 0.5 * h * k1.first);
      const auto k3 = f(a + 0.5 * h * k2.first);
      const auto k4 = f(a + h * k3.first);
      a += h * (k1.first + 2 * k2.first + 2 * k3.first + k4.first) / 6;
      b += h * (k1.second + 2 * k2.second + 2 * k3.second + k4.second) / 6;
    }
    t = target;
    out.emplace_back(a, b);
  }
  return out;
}

std::function<bool(const Vec&)> inner_region(const Context& ctx) {
  if (ctx.cfg.solver.inner_radius) {
    const double r = *ctx.cfg.solver.inner_radius;
    const Vec c = ctx.matrix() ? box_center(*ctx.grid) : Vec::Zero(ctx.dim());
    return [r, c](const Vec& x) { return (x - c).norm() <= r + 1e-12; };
  }
  return pdesolve::inner_half(*ctx.grid);
}

// Stages ----------------------------------------------------------------------

json trend_json(const lyapunov::TrendReport& t) {
  return {{"shell_values", t.shell_values}, {"monotone", t.monotone}, {"sign_ok", t.sign_ok},
          {"growth", num(t.growth)},        {"pass", t.pass}};
}

json synth_json(const lyapunov::SynthesisResult& s) {
  json j = {{"setting", s.setting}, {"feasible", s.feasible}, {"inconclusive", s.inconclusive},
            {"eps0", num(s.eps0)},  {"delta", num(s.delta)},  {"alpha", num(s.alpha)}};
  if (s.setting == "rd") {
    j["c"] = num(s.c);
    j["c_tilde"] = num(s.c_tilde);
    j["c_interval"] = {num(s.c_interval.first), num(s.c_interval.second)};
    j["zero_roots"] = {num(s.zero_roots.first), num(s.zero_roots.second)};
  } else {
    for (const auto& [k, v] : std::vector<std::pair<std::string, double>>{
             {"c_lo", s.c_lo}, {"c_hi", s.c_hi}, {"C", s.C}, {"k_lo", s.k_lo}, {"k_hi", s.k_hi},
             {"K", s.K}, {"n0", s.n0}})
      j[k] = num(v);
    j["c_hi_interval"] = {num(s.c_hi_interval.first), num(s.c_hi_interval.second)};
  }
  return j;
}

json slack_json(const lyapunov::SynthesisResult& s) {
  json j = json::object();
  for (const auto& [k, v] : s.slack) j[k] = num(v);
  return j;
}

void stage_assumptions_rd(Context& ctx, Stage& st) {
  const auto& field = *ctx.field;
  const int d = ctx.dim();
  const auto& m = ctx.cfg.model;
  double R = kInf;
  for (int i = 0; i < d; ++i) R = std::min({R, -m.lo[i], m.hi[i]});
  if (!(R > 0.0)) throw Error(ErrorKind::Coverage, "probe shells need the origin inside the model box");

  std::vector<double> radii;
  for (int k = 1; k <= 12; ++k) radii.push_back(R * k / 12.0);
  std::vector<Vec> samples;
  for (const auto& sh : lyapunov::sphere_shells(d, radii)) samples.insert(samples.end(), sh.begin(), sh.end());
  const auto ell = coeffs::check_ellipticity(field, samples);
  st.results["ellipticity"] = {{"kappa_lo", num(ell.kappa_lo)}, {"kappa_hi", num(ell.kappa_hi)}, {"pass", ell.pass}};

  lyapunov::RdGrowthParams gp;
  if (ctx.cfg.growth.present) {
    gp = ctx.cfg.growth.rd;
    gp.kappa_lo = field.kappa_lo();
    gp.kappa_hi = field.kappa_hi();
  } else {
    gp = lyapunov::estimate_rd_growth(field, samples, R / 3.0);
  }
  json g = {{"alpha1", gp.alpha1}, {"beta1", gp.beta1},       {"gamma1", gp.gamma1},
            {"gamma2", gp.gamma2}, {"C1", gp.C1},             {"C2", gp.C2},
            {"kappa_lo", gp.kappa_lo}, {"kappa_hi", gp.kappa_hi}, {"empirical", gp.empirical}};
  g["alpha2"] = gp.alpha2 ? json(*gp.alpha2) : json(nullptr);
  g["C3"] = gp.C3 ? json(*gp.C3) : json(nullptr);
  st.results["growth"] = g;

  const auto cr = lyapunov::check_rd_case(gp);
  st.results["case"] = lyapunov::to_string(cr.tag);
  st.results["pass"] = cr.pass;
  st.results["gate_value"] = cr.gate_value ? json(num(*cr.gate_value)) : json(nullptr);
  st.results["detail"] = cr.detail;

  const auto s = lyapunov::synth_rd_lyapunov(gp);
  st.results["feasible"] = s.feasible;
  st.results["synthesized_params"] = synth_json(s);
  st.results["slack_per_inequality"] = slack_json(s);
  st.results["diagnostics"] = s.diagnostics;
  st.holds("case-gate", cr.pass);
  if (!st.holds("lyapunov-feasible", s.feasible)) {
    std::string reason = "case " + lyapunov::to_string(cr.tag) + " fails";
    if (cr.gate_value) reason += " with inequality value " + csv_number(*cr.gate_value);
    st.reason = reason;
    return;
  }
  const auto shells = lyapunov::sphere_shells(d, lyapunov::default_radii(R));
  const auto phi = lyapunov::rd_phi0(d, s);
  const auto t1 = lyapunov::verify_lyapunov_divergence(field, phi, shells, lyapunov::Direction::MinusInfinity);
  const auto t2 = lyapunov::verify_lyapunov_divergence(field, coeffs::scale(phi, s.delta), shells,
                                                      lyapunov::Direction::MinusInfinity);
  const auto t3 = lyapunov::verify_lyapunov_divergence(field, lyapunov::rd_psi0(d, s), shells,
                                                      lyapunov::Direction::PlusInfinity);
  st.results["trends"] = {{"phi0", trend_json(t1)}, {"delta_phi0", trend_json(t2)}, {"psi0", trend_json(t3)},
                          {"radii", lyapunov::default_radii(R)}};
  st.holds("phi0-diverges-down", t1.pass);
  st.holds("delta-phi0-diverges-down", t2.pass);
  st.holds("psi0-diverges-up", t3.pass);
  ctx.synth = s;
  if (!(t1.pass && t2.pass && t3.pass)) st.reason = "divergence trend fails on the probe shells";
}

void stage_assumptions_matrix(Context& ctx, Stage& st) {
  const auto& c = *ctx.mcoef;
  const auto& gp = ctx.cfg.growth.matrix;
  const bool gate = matrixdom::check_wishart_gate(ctx.cfg.model.wishart);
  st.results["wishart_gate"] = gate;
  const auto probe = lyapunov::default_matrix_probe(c.d, gp.n0);
  const auto rep = lyapunov::check_matrix_assumptions(c, gp, probe);
  st.results["case"] = lyapunov::to_string(rep.tag);
  st.results["pass"] = rep.pass;
  st.results["gate_value"] = rep.gate_value ? json(num(*rep.gate_value)) : json(nullptr);
  st.results["alpha3_empirical"] = num(rep.alpha3_empirical);
  json ineq = json::array(), lim = json::array();
  for (const auto& ic : rep.inequalities)
    ineq.push_back({{"name", ic.name}, {"worst_slack", num(ic.worst_slack)}, {"pass", ic.pass}});
  bool h0 = true;
  for (const auto& lc : rep.limits) {
    lim.push_back({{"name", lc.name}, {"trend", trend_json(lc.trend)}, {"pass", lc.pass}});
    if (lc.name.rfind("lim H_0", 0) == 0) h0 = lc.pass;
  }
  st.results["inequalities"] = ineq;
  st.results["limits"] = lim;
  st.results["diagnostics"] = rep.diagnostics;
  st.holds("wishart-gate-matches-h0-trend", gate == h0);
  if (!st.holds("matrix-assumptions", rep.pass)) {
    st.results["feasible"] = false;
    st.reason = h0 ? "assumption check failed" : "H₀ trend fail";
    return;
  }
  const auto s = lyapunov::synth_matrix_lyapunov(c, gp, probe);
  st.results["feasible"] = s.feasible;
  st.results["synthesized_params"] = synth_json(s);
  st.results["slack_per_inequality"] = slack_json(s);
  st.results["synthesis_diagnostics"] = s.diagnostics;
  if (!st.holds("lyapunov-feasible", s.feasible)) {
    st.reason = s.inconclusive ? "synthesis inconclusive" : "synthesis infeasible";
    return;
  }
  ctx.synth = s;
}

void stage_assumptions(Context& ctx, Stage& st) {
  if (ctx.matrix())
    stage_assumptions_matrix(ctx, st);
  else
    stage_assumptions_rd(ctx, st);
  Csv csv(ctx.out / "assumptions.csv", {"kind", "name", "value", "pass"});
  const json slack = st.results.value("slack_per_inequality", json::object());
  for (const auto& [k, v] : slack.items())
    csv.row({"slack", k, v.is_null() ? "nan" : csv_number(v.get<double>()), v.is_number() && v.get<double>() >= 0 ? "true" : "false"});
  for (const auto& v : st.verdicts) csv.row({"verdict", v["invariant"].get<std::string>(), "", v["pass"].get<bool>() ? "true" : "false"});
  ctx.record(csv, "assumption slacks and verdicts");
}

void stage_ergodic(Context& ctx, Stage& st) {
  const auto& s = ctx.cfg.solver;
  const auto& field = *ctx.field;
  const Grid& g = *ctx.grid;
  const std::size_t anchor = g.nearest(s.anchor);
  st.results["anchor"] = vec_json(g.node(anchor));
  const bool want_n = s.ergodic_method != "eigen";
  const bool want_e = s.ergodic_method != "normalization";
  std::optional<pdesolve::ErgodicPair> pn, pe;
  json methods = json::object();
  auto pair_json = [](const pdesolve::ErgodicPair& p) {
    return json{{"lambda_hat", num(p.lambdahat)},
                {"residual", num(p.residual)},
                {"truncation_estimate", num(p.truncation_estimate)},
                {"iterations", p.iterations},
                {"T", num(p.T)},
                {"lambda_trace_tail", std::vector<double>(p.lambda_trace.end() - std::min<std::size_t>(p.lambda_trace.size(), 8), p.lambda_trace.end())}};
  };
  pdesolve::NormalizationOptions no;
  no.solver = ctx.solver();
  no.probe_interval = s.probe_interval;
  no.tol = s.tol;
  no.tol_v = s.tol_v;
  no.T_max = s.T_max;
  if (want_n) {
    pn = pdesolve::solve_ergodic_normalization(field, ctx.grid, ctx.v0(), anchor, no);
    methods["normalization"] = pair_json(*pn);
  }
  if (want_e) {
    if (!ctx.kappa) {
      if (s.ergodic_method == "eigen")
        throw Error(ErrorKind::Validation, "the eigen method needs Abar = kappa A on the grid");
      methods["eigen"] = "not applicable: Abar is not proportional to A";
    } else {
      pdesolve::EigenOptions eo;
      eo.tol = s.eigen_tol;
      eo.max_iter = s.eigen_max_iter;
      pe = pdesolve::solve_ergodic_eigen(field, ctx.grid, *ctx.kappa, anchor, eo);
      methods["eigen"] = pair_json(*pe);
    }
  }
  st.results["methods"] = methods;
  const auto& primary = pn ? *pn : *pe;
  ctx.pair = primary;
  st.results["method"] = pdesolve::to_string(primary.method);
  st.results["lambda_hat"] = num(primary.lambdahat);
  st.results["residual"] = num(primary.residual);

  if (pn) {
    // Grids without a half-resolution companion carry no truncation estimate.
    const double trunc = std::isfinite(pn->truncation_estimate) ? pn->truncation_estimate : 0.0;
    st.check("normalization-residual", pn->residual, "<=", 10.0 * (trunc + s.tol_v));
  }
  if (pn && pe) st.check("ergodic-methods-agree", std::abs(pn->lambdahat - pe->lambdahat), "<=", s.lambda_tol);
  if (ctx.cfg.model.family == "lq") {
    const double oracle = lq_lambda_oracle(ctx.cfg.model.lq);
    st.results["lambda_closed_form"] = num(oracle);
    if (std::isfinite(oracle)) {
      if (pn) st.check("normalization-lambda-closed-form", std::abs(pn->lambdahat - oracle), "<=", s.lambda_tol);
      if (pe) st.check("eigen-lambda-closed-form", std::abs(pe->lambdahat - oracle), "<=", s.lambda_tol);
    }
  }

  st.results["boundary_influence"] = nullptr;
  if (s.boundary_study && pn) {
    const auto& m = ctx.cfg.model;
    const auto v0p = s.v0;
    const auto bi = pdesolve::boundary_influence_study(
        [&m](const std::vector<double>& lo, const std::vector<double>& hi) { return build_field(m, lo, hi); },
        g, [v0p](const Vec& x) { return v0p.value(x); }, *pn, no);
    st.results["boundary_influence"] = {{"lambda_diff", num(bi.lambda_diff)},
                                        {"vhat_diff", num(bi.vhat_diff)},
                                        {"doubled_lo", bi.doubled_lo},
                                        {"doubled_hi", bi.doubled_hi}};
  }

  auto header = ctx.coord_headers();
  header.insert(header.begin(), "method");
  header.push_back("vhat");
  Csv csv(ctx.out / "ergodic.csv", header);
  for (const auto* p : {pn ? &*pn : nullptr, pe ? &*pe : nullptr}) {
    if (!p) continue;
    for (std::size_t n = 0; n < g.size(); ++n) {
      if (!g.active(n)) continue;
      std::vector<std::string> row{pdesolve::to_string(p->method)};
      const Vec x = g.node(n);
      for (int i = 0; i < x.size(); ++i) row.push_back(csv_number(x[i]));
      row.push_back(csv_number(p->vhat[n]));
      csv.row(row);
    }
  }
  ctx.record(csv, "ergodic potential per method and node");
}

double sup_norm(const Grid& g, const std::vector<double>& v) {
  double m = 0.0;
  for (std::size_t n = 0; n < g.size(); ++n)
    if (g.active(n)) m = std::max(m, std::abs(v[n]));
  return m;
}

void stage_cauchy(Context& ctx, Stage& st) {
  const auto& s = ctx.cfg.solver;
  const auto& field = *ctx.field;
  const Grid& g = *ctx.grid;
  pdesolve::CauchyOptions opt;
  opt.solver = ctx.solver();
  opt.save_times = pdesolve::save_grid(0.0, s.T, s.save_every);
  if (opt.save_times.empty() || std::abs(opt.save_times.back() - s.T) > 1e-12 * s.T) opt.save_times.push_back(s.T);
  const auto v0 = ctx.v0();
  const auto run = pdesolve::solve_cauchy(field, ctx.grid, v0, s.T, opt);
  st.results["T"] = s.T;
  st.results["steps"] = run.final.steps;
  st.results["cfl_refreshes"] = run.cfl_refreshes;
  st.results["save_times"] = run.history.times;

  auto header = ctx.coord_headers();
  header.insert(header.begin(), "t");
  for (const char* c : {"v", "h", "grad_h_norm"}) header.push_back(c);
  Csv csv(ctx.out / "cauchy.csv", header);
  const int d = g.dim();
  for (std::size_t k = 0; k < run.history.times.size(); ++k) {
    const double t = run.history.times[k];
    const auto hf = pdesolve::compute_h(g, t, run.history.slices[k], *ctx.pair);
    for (std::size_t n = 0; n < g.size(); ++n) {
      if (!g.active(n)) continue;
      std::vector<std::string> row{csv_number(t)};
      const Vec x = g.node(n);
      for (int i = 0; i < d; ++i) row.push_back(csv_number(x[i]));
      double gn = 0.0;
      for (int i = 0; i < d; ++i) gn += hf.grad[n * d + i] * hf.grad[n * d + i];
      row.push_back(csv_number(run.history.slices[k][n]));
      row.push_back(csv_number(hf.h[n]));
      row.push_back(csv_number(std::sqrt(gn)));
      csv.row(row);
    }
  }
  ctx.record(csv, "Cauchy solution, difference function and its gradient norm at the save times");

  // Riccati oracle.
  if (ctx.cfg.model.family == "lq") {
    if (!s.v0_zero) {
      st.results["riccati"] = "not applicable: v0 is not zero";
    } else {
      std::vector<double> times(run.history.times.begin() + 1, run.history.times.end());
      const auto ab = lq_riccati(ctx.cfg.model.lq, times);
      double err = 0.0;
      for (std::size_t k = 0; k < times.size(); ++k) {
        const auto& v = run.history.slices[k + 1];
        for (std::size_t n = 0; n < g.size(); ++n) {
          const Vec x = g.node(n);
          if (!g.active(n) || x.norm() > s.riccati_radius + 1e-12) continue;
          err = std::max(err, std::abs(v[n] - (-0.5 * ab[k].first * x.squaredNorm() + ab[k].second)));
        }
      }
      st.results["riccati"] = {{"sup_error", num(err)}, {"radius", s.riccati_radius}};
      st.check("riccati-trajectory", err, "<=", s.riccati_tol);
    }
  }

  // Cole-Hopf image stepped with the linear equation.
  if (ctx.kappa) {
    const double kappa = *ctx.kappa;
    auto nopt = opt;
    nopt.solver.dt_max = s.cole_hopf_dt;
    nopt.save_times = pdesolve::save_grid(0.0, s.cole_hopf_T, s.save_every);
    if (nopt.save_times.empty() || std::abs(nopt.save_times.back() - s.cole_hopf_T) > 1e-12 * s.cole_hopf_T)
      nopt.save_times.push_back(s.cole_hopf_T);
    const bool reuse = s.cole_hopf_dt == s.dt && s.cole_hopf_T == s.T;
    const auto nonlinear = reuse ? pdesolve::CauchyRun{} : pdesolve::solve_cauchy(field, ctx.grid, v0, s.cole_hopf_T, nopt);
    const auto& ref = reuse ? run.history : nonlinear.history;
    auto lopt = nopt;
    lopt.solver.equation = pdesolve::Equation::Linear;
    lopt.solver.kappa = kappa;
    std::vector<double> w0(v0.size());
    for (std::size_t n = 0; n < v0.size(); ++n) w0[n] = std::exp(kappa * v0[n]);
    const auto lin = pdesolve::solve_cauchy(field, ctx.grid, w0, s.cole_hopf_T, lopt);
    const auto inner = pdesolve::inner_half(g);
    double err = 0.0;
    for (std::size_t k = 0; k < ref.times.size(); ++k) {
      const auto& v = ref.slices[k];
      const auto& w = lin.history.at(ref.times[k]);
      for (std::size_t n = 0; n < g.size(); ++n) {
        if (!g.active(n) || !inner(g.node(n))) continue;
        err = std::max(err, w[n] > 0.0 ? std::abs(v[n] - std::log(w[n]) / kappa) : kInf);
      }
    }
    st.results["cole_hopf"] = {{"kappa", kappa},
                               {"dt", s.cole_hopf_dt},
                               {"T", s.cole_hopf_T},
                               {"sup_error_inner_half", num(err)}};
    st.check("cole-hopf-equivalence", err, "<=", s.cole_hopf_tol);
  } else {
    st.results["cole_hopf"] = "not applicable: Abar is not proportional to A";
  }

  // Comparison against a raised initial condition.
  {
    const Vec c = box_center(g);
    std::vector<double> up = v0;
    for (std::size_t n = 0; n < g.size(); ++n)
      if (g.active(n)) up[n] += 0.5 * std::exp(-(g.node(n) - c).squaredNorm());
    const auto upper = pdesolve::solve_cauchy(field, ctx.grid, up, s.T, opt);
    double worst = -kInf;
    for (std::size_t k = 0; k < run.history.times.size(); ++k) {
      const auto& v = run.history.slices[k];
      const auto& u = upper.history.at(run.history.times[k]);
      const double scale = sup_norm(g, u);
      for (std::size_t n = 0; n < g.size(); ++n)
        if (g.active(n)) worst = std::max(worst, (v[n] - u[n]) / std::max(scale, 1e-300));
    }
    st.results["comparison"] = {{"max_relative_excess", num(worst)}};
    st.check("comparison-principle", worst, "<=", s.comparison_tol);
  }
}

void stage_convergence(Context& ctx, Stage& st) {
  const auto& s = ctx.cfg.solver;
  const Grid& g = *ctx.grid;
  pdesolve::CauchyOptions opt;
  opt.solver = ctx.solver();
  opt.save_times = s.convergence_times;
  opt.save_initial = false;
  const auto run = pdesolve::solve_cauchy(*ctx.field, ctx.grid, ctx.v0(), s.convergence_times.back(), opt);
  std::vector<pdesolve::HField> hs;
  for (double t : s.convergence_times) hs.push_back(pdesolve::compute_h(g, t, run.history.at(t), *ctx.pair));
  const auto rep = pdesolve::pointwise_convergence_report(hs, inner_region(ctx), s.grad_tol, s.noise_floor);
  st.results["times"] = rep.times;
  st.results["h_increment"] = rep.h_increment;
  st.results["grad_sup"] = rep.grad_sup;
  st.results["C_trace"] = rep.C_trace;
  st.results["flags"] = rep.flags;
  st.results["finite"] = rep.finite;
  st.holds("h-finite", rep.finite);
  st.check("grad-h-vanishes", rep.grad_sup.empty() ? kInf : rep.grad_sup.back(), "<=", s.grad_tol);
  st.holds("h-increments-decrease", rep.h_monotone);
  st.holds("grad-h-decreases", rep.grad_monotone);

  Csv csv(ctx.out / "convergence.csv", {"t", "h_increment", "grad_sup", "C"});
  for (std::size_t k = 0; k < rep.times.size(); ++k)
    csv.row({csv_number(rep.times[k]), k < rep.h_increment.size() ? csv_number(rep.h_increment[k]) : "",
             csv_number(rep.grad_sup[k]), csv_number(rep.C_trace[k])});
  ctx.record(csv, "sup-norm deviations of the difference function on the inner region");
}

pdesolve::History horizon_history(const Context& ctx, double T, double t, double dt) {
  pdesolve::CauchyOptions opt;
  opt.solver = ctx.solver();
  if (T - t > 1e-12) opt.save_times.push_back(T - t);
  for (double s : pdesolve::save_grid(T - t, T, dt)) opt.save_times.push_back(s);
  return pdesolve::solve_cauchy(*ctx.field, ctx.grid, ctx.v0(), T, opt).history;
}

void stage_mc(Context& ctx, Stage& st) {
  const auto& b = ctx.cfg.simulation;
  const auto sim = ctx.sim();
  std::vector<stochsim::Functionals> out;
  json horizons = json::array(), z = json::array();
  double exit_max = 0.0;
  Csv csv(ctx.out / "functionals.csv",
          {"T", "functional", "mean", "se", "mean_excl", "se_excl", "n_excl", "exit_fraction"});
  for (double T : b.horizons) {
    const auto hist = horizon_history(ctx, T, b.t, sim.dt);
    const auto fn = stochsim::mc_functionals(*ctx.field, hist, *ctx.pair, b.t, T, b.x0, sim);
    out.push_back(fn);
    horizons.push_back({{"T", T},
                        {"f_est", estimate_json(fn.f_est)},
                        {"supdev_est", estimate_json(fn.supdev_est)},
                        {"z_energy", estimate_json(fn.z_energy)},
                        {"y_supdev", estimate_json(fn.y_supdev)},
                        {"h_T_x0", num(fn.h_T_x0)},
                        {"end_h", estimate_json(fn.end_h)},
                        {"identity_rhs", num(fn.identity_rhs)},
                        {"identity_se", num(fn.identity_se)},
                        {"z_score", num(fn.z_score)},
                        {"exp_bound_lhs", num(fn.exp_bound_lhs)},
                        {"exp_bound_se", num(fn.exp_bound_se)},
                        {"exp_bound_holds", fn.exp_bound_holds},
                        {"route_gap", num(fn.route_gap)},
                        {"routes_agree", fn.routes_agree},
                        {"exit_fraction", num(fn.exit_fraction)}});
    z.push_back(num(fn.z_score));
    exit_max = std::max(exit_max, fn.exit_fraction);
    for (const auto& [name, e] : std::vector<std::pair<std::string, const stochsim::MCEstimate*>>{
             {"f_est", &fn.f_est}, {"supdev_est", &fn.supdev_est}, {"z_energy", &fn.z_energy},
             {"y_supdev", &fn.y_supdev}, {"end_h", &fn.end_h}})
      csv.row({csv_number(T), name, csv_number(e->mean), csv_number(e->se), csv_number(e->mean_excl),
               csv_number(e->se_excl), std::to_string(e->n_excl), csv_number(e->exit_fraction)});
    const std::string tag = "@T=" + csv_number(T);
    st.check("identity-z-score" + tag, std::abs(fn.z_score), "<=", b.z_max);
    st.holds("exponential-bound" + tag, fn.exp_bound_holds);
    st.holds("bsde-routes-agree" + tag, fn.routes_agree);
  }
  ctx.record(csv, "Monte-Carlo functional estimates per horizon");
  st.results["t"] = b.t;
  st.results["x0"] = vec_json(b.x0);
  st.results["horizons"] = horizons;
  st.results["z_scores"] = z;
  st.results["exit_fraction"] = exit_max;
  st.results["clip_fraction"] = 0.0;
  if (out.size() >= 2) {
    const auto& a = out.front();
    const auto& c = out.back();
    auto decay = [&](const std::string& name, const stochsim::MCEstimate& x, const stochsim::MCEstimate& y) {
      const double ratio = y.mean > 0.0 ? x.mean / y.mean : (x.mean > 0.0 ? kInf : 0.0);
      st.check(name + "-decay-ratio", ratio, ">=", b.decay_factor);
      st.check(name + "-decay-significance", x.mean - y.mean, ">", b.se_multiple * std::hypot(x.se, y.se));
      st.results[name + "_decay_ratio"] = num(ratio);
    };
    decay("f", a.f_est, c.f_est);
    decay("z-energy", a.z_energy, c.z_energy);
  }
}

void stage_sandwich(Context& ctx, Stage& st) {
  const auto& b = ctx.cfg.simulation;
  const auto& field = *ctx.field;
  const Grid& g = *ctx.grid;
  pdesolve::CauchyOptions opt;
  opt.solver = ctx.solver();
  opt.save_times = {b.t};
  const auto run = pdesolve::solve_cauchy(field, ctx.grid, ctx.v0(), b.t, opt);
  const double pde = g.interpolate(run.final.values, b.x0);
  const auto phi0 = lyapunov::rd_phi0(ctx.dim(), *ctx.synth);
  const auto v0p = ctx.cfg.solver.v0;
  auto v0 = [v0p](const Vec& x) { return v0p.value(x); };
  const auto sim = ctx.sim();
  const double z1 = field.kappa_lo(), z2 = field.kappa_hi();
  const auto s1 = stochsim::mc_sandwich(field, ctx.grid, phi0, v0, z1, b.t, b.x0, sim);
  const auto s2 = stochsim::mc_sandwich(field, ctx.grid, phi0, v0, z2, b.t, b.x0, sim);
  auto sj = [](const stochsim::SandwichResult& s, double zeta) {
    return json{{"zeta", zeta}, {"psi", estimate_json(s.psi)}, {"ess", num(s.ess)}, {"ess_ok", s.ess_ok},
                {"warnings", s.warnings}};
  };
  st.results["pde_value"] = num(pde);
  st.results["t"] = b.t;
  st.results["x0"] = vec_json(b.x0);
  st.results["psi1"] = sj(s1, z1);
  st.results["psi2"] = sj(s2, z2);
  const double k = b.se_multiple;
  st.check("sandwich-lower", s1.psi.mean - k * s1.psi.se, "<=", pde);
  st.check("sandwich-upper", s2.psi.mean + k * s2.psi.se, ">=", pde);
  if (z1 == z2) {
    st.check("sandwich-psi1-equals-pde", std::abs(s1.psi.mean - pde), "<=", k * s1.psi.se);
    st.check("sandwich-psi2-equals-pde", std::abs(s2.psi.mean - pde), "<=", k * s2.psi.se);
  }
  st.holds("sandwich-ess-floor", s1.ess_ok && s2.ess_ok);
  Csv csv(ctx.out / "sandwich.csv", {"zeta", "psi", "se", "ess", "ess_ok", "pde_value"});
  for (const auto& [s, zeta] : {std::pair{&s1, z1}, std::pair{&s2, z2}})
    csv.row({csv_number(zeta), csv_number(s->psi.mean), csv_number(s->psi.se), csv_number(s->ess),
             s->ess_ok ? "true" : "false", csv_number(pde)});
  ctx.record(csv, "sandwich estimates against the PDE value");
}

void write_paths(Context& ctx, const stochsim::PathBundle& pb, const std::string& description) {
  std::vector<std::string> header{"path", "seed", "exit", "exit_time"};
  for (int i = 0; i < pb.dim; ++i) header.push_back("xT_" + std::to_string(i + 1));
  Csv csv(ctx.out / "paths.csv", header);
  const std::size_t last = pb.save_times.size() - 1;
  for (std::size_t p = 0; p < pb.n_paths(); ++p) {
    std::vector<std::string> row{std::to_string(p), std::to_string(pb.seeds[p]), stochsim::to_string(pb.exit[p]),
                                 std::isnan(pb.exit_time[p]) ? "" : csv_number(pb.exit_time[p])};
    for (double x : pb.state(p, last)) row.push_back(csv_number(x));
    csv.row(row);
  }
  ctx.record(csv, description);
}

void stage_simulate(Context& ctx, Stage& st) {
  const auto sim = ctx.sim();
  const auto drift = stochsim::TiltedDrift::from_values(*ctx.field, ctx.grid, ctx.pair->vhat);
  const auto pb = stochsim::simulate_tilted(drift, ctx.cfg.simulation.x0, sim);
  const std::size_t last = pb.save_times.size() - 1;
  json means = json::array();
  for (int i = 0; i < pb.dim; ++i) {
    std::vector<double> x(pb.n_paths());
    for (std::size_t p = 0; p < x.size(); ++p) x[p] = pb.state(p, last)[i];
    means.push_back(estimate_json(stochsim::estimate("x" + std::to_string(i + 1), x, pb.exit, sim.antithetic)));
  }
  st.results["T"] = sim.T;
  st.results["n_paths"] = pb.n_paths();
  st.results["exit_fraction"] = pb.exit_fraction();
  st.results["final_state_mean"] = means;
  st.results["warnings"] = pb.warnings;
  write_paths(ctx, pb, "paths under the ergodic tilt: exit status and state at T");
}

void stage_wishart(Context& ctx, Stage& st) {
  const auto& m = ctx.cfg.model;
  const auto& b = ctx.cfg.simulation;
  const auto sim = ctx.sim();
  const matrixdom::SpdPoint x0 = matrixdom::ell_inv(b.x0);
  const auto pb = stochsim::simulate_wishart(m.wishart, x0, sim);
  st.results["clip_fraction"] = pb.clip_fraction();
  st.results["warnings"] = pb.warnings;
  st.check("clip-fraction", pb.clip_fraction(), "<", sim.clip_warn);
  write_paths(ctx, pb, "Wishart paths: state at T (column-stacked entries)");

  // Stationary mean from LL' + K X + X K' = 0 when K is stable.
  const int d = static_cast<int>(m.wishart.L.rows());
  const Eigen::VectorXcd ev = m.wishart.K.eigenvalues();
  const bool stable = (ev.real().array() < 0.0).all();
  st.results["K_stable"] = stable;
  if (!stable) return;
  const Mat I = Mat::Identity(d, d);
  const Mat op = matrixdom::kron(I, m.wishart.K) + matrixdom::kron(m.wishart.K, I);
  const Mat LL = m.wishart.L * m.wishart.L.transpose();
  const Vec rhs = -Eigen::Map<const Vec>(LL.data(), d * d);
  const Vec xs = op.lu().solve(rhs);
  const double exact = Eigen::Map<const Mat>(xs.data(), d, d).trace();
  double clip = 0.0;
  const auto e = stochsim::wishart_time_average(m.wishart, x0, sim, b.burn_in,
                                                [](const Mat& x) { return x.trace(); }, "trace", &clip);
  st.results["stationary_trace"] = {{"exact", exact}, {"estimate", estimate_json(e)}, {"burn_in", b.burn_in},
                                    {"clip_fraction", clip}};
  st.check("stationary-mean-trace", std::abs(e.mean - exact), "<=", b.se_multiple * e.se);
}

struct StagePlan {
  std::string name;
  std::function<void(Context&, Stage&)> fn;
  std::vector<std::string> needs;
};

std::vector<StagePlan> plan(const ExperimentConfig& cfg) {
  const bool mat = cfg.model.family == "wishart-vec";
  const StagePlan A{"assumptions", stage_assumptions, {}};
  const StagePlan E{"ergodic", stage_ergodic, {}};
  const StagePlan C{"cauchy", stage_cauchy, {"ergodic"}};
  const StagePlan V{"convergence", stage_convergence, {"ergodic"}};
  const StagePlan M{"mc", stage_mc, {"ergodic"}};
  const StagePlan S{"sandwich", stage_sandwich, {"assumptions"}};
  const StagePlan P{"simulate", stage_simulate, {"ergodic"}};
  const StagePlan W{"wishart", stage_wishart, {}};
  switch (cfg.pipeline) {
    case Pipeline::CheckAssumptions: return {A};
    case Pipeline::SolveErgodic: return {E};
    case Pipeline::SolveCauchy: return {E, C};
    case Pipeline::ConvergePde: return {E, V};
    case Pipeline::ConvergeMc: return {E, M};
    case Pipeline::Sandwich: return {A, S};
    case Pipeline::Simulate: return mat ? std::vector<StagePlan>{W} : std::vector<StagePlan>{E, P};
    case Pipeline::FullBattery:
      return mat ? std::vector<StagePlan>{A, E, C, V, M, S, W} : std::vector<StagePlan>{A, E, C, V, M, S};
  }
  return {};
}

}  // namespace

RunResult run(const ExperimentConfig& cfg, const RunOptions& opt) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();
  const fs::path out(opt.out_dir);
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw Error(ErrorKind::Validation, "output path '" + out.string() + "' is not a directory");
    if (!fs::is_empty(out) && !opt.overwrite)
      throw Error(ErrorKind::Validation,
                  "output directory '" + out.string() + "' is not empty; pass --overwrite to replace it");
  }
  fs::create_directories(out);

  Context ctx{cfg, out, std::max(1, opt.threads)};
  json stages = json::array(), timing = json::object();
  json short_circuit = nullptr;
  bool any_error = false, any_fail = false;
  std::map<std::string, bool> ok;  // stage name -> usable downstream

  std::optional<std::string> setup_error;
  try {
    const auto& m = cfg.model;
    if (m.family == "wishart-vec") ctx.mcoef = build_matrix(m);
    ctx.field = build_field(m, m.lo, m.hi);
    if (!cfg.grid.nodes.empty()) {
      ctx.grid = std::make_shared<const Grid>(cfg.grid.lo, cfg.grid.hi, cfg.grid.nodes,
                                              ctx.field->domain().membership);
      const auto samples = coeffs::grid_samples(*ctx.grid);
      ctx.kappa = coeffs::cole_hopf_kappa(*ctx.field, samples, 1e-9);
    }
  } catch (const std::exception& e) {
    setup_error = e.what();
  }

  for (const auto& p : plan(cfg)) {
    Stage st;
    st.name = p.name;
    const auto t0 = clock::now();
    std::string blocked;
    for (const auto& n : p.needs)
      if (!ok.count(n) || !ok[n]) blocked = n;
    if (setup_error) {
      st.status = "error";
      st.error = *setup_error;
      any_error = true;
    } else if (!short_circuit.is_null()) {
      st.status = "skipped";
      st.reason = "short-circuited after stage " + short_circuit["stage"].get<std::string>();
    } else if (!blocked.empty()) {
      st.status = "skipped";
      st.reason = "stage " + blocked + " did not complete";
    } else if (p.name == "sandwich" && (ctx.matrix() || !ctx.synth)) {
      st.status = "skipped";
      st.reason = ctx.matrix() ? "the sandwich estimator needs an R^d Lyapunov pair" : "no feasible Lyapunov pair";
    } else {
      try {
        p.fn(ctx, st);
        st.status = st.passed() ? "pass" : "fail";
        if (p.name == "assumptions" && st.reason) short_circuit = {{"stage", p.name}, {"reason", *st.reason}};
      } catch (const std::exception& e) {
        st.status = "error";
        st.error = e.what();
        any_error = true;
      }
    }
    ok[p.name] = st.status == "pass" || st.status == "fail";
    if (p.name == "ergodic" && !ctx.pair) ok[p.name] = false;
    if (st.status == "fail") any_fail = true;
    st.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    timing[p.name] = st.seconds;
    stages.push_back(st.to_json());
  }
  if (!short_circuit.is_null()) any_fail = true;

  json report;
  report["schema_version"] = std::string(kSchemaVersion);
  report["pipeline"] = to_string(cfg.pipeline);
  report["config"] = cfg.echo;
  report["stages"] = stages;
  report["short_circuit"] = short_circuit;
  report["verdict"] = any_error ? "error" : (any_fail ? "fail" : "pass");
  ctx.manifest.push_back({{"file", "report.json"}, {"kind", "json"}, {"content", "this report"}});
  report["manifest"] = ctx.manifest;
  report["timing"] = {{"threads", ctx.threads},
                      {"stages_s", timing},
                      {"total_s", std::chrono::duration<double>(clock::now() - t_start).count()}};
  {
    std::ofstream f(out / "report.json", std::ios::binary);
    f << report.dump(2) << "\n";
    if (!f) throw Error(ErrorKind::Runtime, "cannot write report.json");
  }
  RunResult r;
  r.report = std::move(report);
  r.exit_code = any_error ? 3 : (any_fail ? 1 : 0);
  return r;
}

}  // namespace hjblab::cli
