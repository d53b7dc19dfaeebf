#include "hjblab/pdesolve.hpp"

#include "hjblab/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace hjblab::pdesolve {

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string point_str(const Vec& x) {
  std::ostringstream os;
  os << "(";
  for (Eigen::Index i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x[i];
  os << ")";
  return os.str();
}

int pair_index(int a, int b) { return a == 0 ? b - 1 : 2; }  // (0,1) (0,2) (1,2)

}  // namespace

std::string to_string(Scheme s) { return s == Scheme::Explicit ? "explicit" : "imex"; }

Scheme scheme_from_string(const std::string& s) {
  if (s == "explicit") return Scheme::Explicit;
  if (s == "imex") return Scheme::Imex;
  throw Error(ErrorKind::Validation, "unknown scheme '" + s + "'");
}

std::string to_string(ErgodicMethod m) {
  return m == ErgodicMethod::Normalization ? "normalization" : "eigen";
}

struct Stepper::Factor {
  double dt = 0.0;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
};

Stepper::Stepper(const coeffs::CoefficientField& field, GridPtr grid, SolverConfig cfg)
    : grid_(std::move(grid)), cfg_(cfg), kappa_hi_(field.kappa_hi()) {
  if (!grid_) throw Error(ErrorKind::Validation, "stepper needs a grid");
  if (!(cfg_.cfl > 0.0) || !(cfg_.dt_max > 0.0) || cfg_.cfl_refresh < 1)
    throw Error(ErrorKind::Validation, "solver CFL, dt_max and refresh must be positive");
  cache_ = coeffs::CoefficientCache::build(field, *grid_);
  const Grid& g = *grid_;
  const int d = g.dim();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.interior(i)) stepped_.push_back(i);
  for (std::size_t i : g.unreachable_boundary()) stepped_.push_back(i);
  std::sort(stepped_.begin(), stepped_.end());
  is_interior_.resize(stepped_.size());
  axis_nb_.resize(stepped_.size());
  cross_nb_.resize(stepped_.size());
  for (std::size_t k = 0; k < stepped_.size(); ++k) {
    const std::size_t n = stepped_[k];
    is_interior_[k] = g.interior(n);
    if (!is_interior_[k]) continue;
    for (int a = 0; a < d; ++a) {
      axis_nb_[k][2 * a] = n - g.stride(a);
      axis_nb_[k][2 * a + 1] = n + g.stride(a);
    }
    for (int a = 0; a < d; ++a)
      for (int b = a + 1; b < d; ++b) {
        const std::size_t sa = g.stride(a), sb = g.stride(b);
        auto& c = cross_nb_[k];
        const int p = pair_index(a, b);
        c[4 * p + 0] = n + sa + sb;
        c[4 * p + 1] = n + sa - sb;
        c[4 * p + 2] = n - sa + sb;
        c[4 * p + 3] = n - sa - sb;
      }
  }
}

Stepper::~Stepper() = default;

double Stepper::node_rhs(const std::vector<double>& v, std::size_t k) const {
  const Grid& g = *grid_;
  const int d = g.dim();
  const std::size_t n = stepped_[k];
  const double* A = &cache_.A[n * d * d];
  const double* Ab = &cache_.Abar[n * d * d];
  const double* B = &cache_.B[n * d];
  std::array<double, kMaxGridDim> grad{};
  std::array<std::array<double, kMaxGridDim>, kMaxGridDim> H{};
  if (is_interior_[k]) {
    const double u0 = v[n];
    for (int a = 0; a < d; ++a) {
      const double h = g.spacing(a);
      const double um = v[axis_nb_[k][2 * a]], up = v[axis_nb_[k][2 * a + 1]];
      grad[a] = (up - um) / (2.0 * h);
      H[a][a] = (up - 2.0 * u0 + um) / (h * h);
    }
    for (int a = 0; a < d; ++a)
      for (int b = a + 1; b < d; ++b) {
        const auto& c = cross_nb_[k];
        const int p = pair_index(a, b);
        H[a][b] = H[b][a] = (v[c[4 * p]] - v[c[4 * p + 1]] - v[c[4 * p + 2]] + v[c[4 * p + 3]]) /
                            (4.0 * g.spacing(a) * g.spacing(b));
      }
  } else {
    const auto der = derivatives_at(g, v, n);
    grad = der.grad;
    H = der.hess;
  }
  double second = 0.0, quad = 0.0, drift = 0.0;
  for (int r = 0; r < d; ++r) {
    drift += B[r] * grad[r];
    for (int s = 0; s < d; ++s) {
      second += A[r * d + s] * H[r][s];
      quad += grad[r] * Ab[r * d + s] * grad[s];
    }
  }
  if (cfg_.equation == Equation::Linear)
    return 0.5 * second + drift + cfg_.kappa * cache_.V[n] * v[n];
  return 0.5 * second + 0.5 * quad + drift + cache_.V[n];
}

std::vector<double> Stepper::rhs(const std::vector<double>& v) const {
  std::vector<double> out(grid_->size(), 0.0);
  for (std::size_t k = 0; k < stepped_.size(); ++k) out[stepped_[k]] = node_rhs(v, k);
  return out;
}

std::vector<double> Stepper::operator_values(const std::vector<double>& v) const {
  std::vector<double> out(grid_->size(), kNaN);
  for (std::size_t k = 0; k < stepped_.size(); ++k) out[stepped_[k]] = node_rhs(v, k);
  return out;
}

double Stepper::stable_dt(const std::vector<double>& v) const {
  const Grid& g = *grid_;
  const int d = g.dim();
  const auto grad = gradient_field(g, v);
  double hmin = std::numeric_limits<double>::infinity();
  for (int a = 0; a < d; ++a) hmin = std::min(hmin, g.spacing(a));
  double worst = 0.0;
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!g.active(n)) continue;
    const double* A = &cache_.A[n * d * d];
    const double* Ab = &cache_.Abar[n * d * d];
    double trA = 0.0, bnorm = 0.0, agn = 0.0, abgn = 0.0;
    for (int r = 0; r < d; ++r) {
      trA += A[r * d + r];
      bnorm += cache_.B[n * d + r] * cache_.B[n * d + r];
      double ag = 0.0, abg = 0.0;
      for (int s = 0; s < d; ++s) {
        ag += A[r * d + s] * grad[n * d + s];
        abg += Ab[r * d + s] * grad[n * d + s];
      }
      agn += ag * ag;
      abgn += abg * abg;
    }
    bnorm = std::sqrt(bnorm);
    if (cfg_.scheme == Scheme::Explicit) {
      double denom = 0.0;
      if (cfg_.equation == Equation::Linear)
        denom = trA + hmin * bnorm + hmin * hmin * std::abs(cfg_.kappa * cache_.V[n]);
      else
        denom = trA + hmin * (bnorm + kappa_hi_ * std::sqrt(agn));
      worst = std::max(worst, denom / (hmin * hmin));
    } else if (cfg_.equation == Equation::Nonlinear) {
      worst = std::max(worst, std::sqrt(abgn) / hmin);
    }
  }
  if (worst <= 0.0) return cfg_.dt_max;
  return std::min(cfg_.dt_max, cfg_.cfl / worst);
}

Stepper::Factor& Stepper::factor_for(double dt) {
  for (auto& f : factors_)
    if (std::abs(f->dt - dt) <= 1e-9 * f->dt) return *f;
  const Grid& g = *grid_;
  const int d = g.dim();
  const std::size_t N = g.size();
  std::vector<Eigen::Triplet<double>> trip;
  std::vector<char> row_done(N, 0);
  for (std::size_t k = 0; k < stepped_.size(); ++k) {
    const std::size_t n = stepped_[k];
    if (!is_interior_[k]) continue;
    row_done[n] = 1;
    const double* A = &cache_.A[n * d * d];
    const double* B = &cache_.B[n * d];
    double diag = 1.0;
    for (int a = 0; a < d; ++a) {
      const double h = g.spacing(a);
      const double aa = 0.5 * A[a * d + a] / (h * h);
      const double bb = B[a] / (2.0 * h);
      trip.emplace_back(n, axis_nb_[k][2 * a], -dt * (aa - bb));
      trip.emplace_back(n, axis_nb_[k][2 * a + 1], -dt * (aa + bb));
      diag += dt * 2.0 * aa;
    }
    for (int a = 0; a < d; ++a)
      for (int b = a + 1; b < d; ++b) {
        const double w = A[a * d + b] / (4.0 * g.spacing(a) * g.spacing(b));
        const auto& c = cross_nb_[k];
        const int p = pair_index(a, b);
        trip.emplace_back(n, c[4 * p], -dt * w);
        trip.emplace_back(n, c[4 * p + 1], dt * w);
        trip.emplace_back(n, c[4 * p + 2], dt * w);
        trip.emplace_back(n, c[4 * p + 3], -dt * w);
      }
    if (cfg_.equation == Equation::Linear) diag -= dt * cfg_.kappa * cache_.V[n];
    trip.emplace_back(n, n, diag);
  }
  for (const auto& r : g.extrapolation_rules()) {
    row_done[r.node] = 1;
    trip.emplace_back(r.node, r.node, 1.0);
    trip.emplace_back(r.node, r.sources[0], -3.0);
    trip.emplace_back(r.node, r.sources[1], 3.0);
    trip.emplace_back(r.node, r.sources[2], -1.0);
  }
  for (std::size_t n = 0; n < N; ++n)
    if (!row_done[n]) trip.emplace_back(n, n, 1.0);
  Eigen::SparseMatrix<double> M(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(N));
  M.setFromTriplets(trip.begin(), trip.end());
  auto f = std::make_unique<Factor>();
  f->dt = dt;
  f->lu.analyzePattern(M);
  f->lu.factorize(M);
  if (f->lu.info() != Eigen::Success)
    throw Error(ErrorKind::Runtime, "implicit operator factorization failed");
  if (factors_.size() >= 4) factors_.erase(factors_.begin());
  factors_.push_back(std::move(f));
  return *factors_.back();
}

void Stepper::step(SolutionField& s, double dt) {
  if (!s.grid || !s.grid->same_layout(*grid_))
    throw Error(ErrorKind::GridMismatch, "solution grid differs from the stepper grid");
  advance(s, dt, stable_dt(s.values));
}

void Stepper::advance(SolutionField& s, double dt, double bound) {
  const Grid& g = *grid_;
  if (!s.grid || !s.grid->same_layout(g))
    throw Error(ErrorKind::GridMismatch, "solution grid differs from the stepper grid");
  if (!(dt > 0.0)) throw Error(ErrorKind::StepSize, "time step must be positive");
  if (cfg_.scheme == Scheme::Explicit) {
    if (dt > bound * (1.0 + 1e-9))
      throw Error(ErrorKind::StepSize, "dt = " + std::to_string(dt) +
                                           " exceeds the explicit stability bound " +
                                           std::to_string(bound));
  }
  std::vector<double> next(g.size());
  if (cfg_.scheme == Scheme::Explicit) {
    next = s.values;
    for (std::size_t k = 0; k < stepped_.size(); ++k) {
      const std::size_t n = stepped_[k];
      next[n] = s.values[n] + dt * node_rhs(s.values, k);
    }
  } else {
    const int d = g.dim();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(g.size()));
    for (std::size_t n = 0; n < g.size(); ++n)
      if (!g.active(n)) b[n] = s.values[n];
    for (std::size_t k = 0; k < stepped_.size(); ++k) {
      const std::size_t n = stepped_[k];
      if (!is_interior_[k]) {
        b[n] = s.values[n] + dt * node_rhs(s.values, k);
        continue;
      }
      if (cfg_.equation == Equation::Linear) {
        b[n] = s.values[n];
        continue;
      }
      const double* Ab = &cache_.Abar[n * d * d];
      std::array<double, kMaxGridDim> grad{};
      for (int a = 0; a < d; ++a)
        grad[a] = (s.values[axis_nb_[k][2 * a + 1]] - s.values[axis_nb_[k][2 * a]]) /
                  (2.0 * g.spacing(a));
      double quad = 0.0;
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) quad += grad[r] * Ab[r * d + c] * grad[c];
      b[n] = s.values[n] + dt * (0.5 * quad + cache_.V[n]);
    }
    const Eigen::VectorXd x = factor_for(dt).lu.solve(b);
    for (std::size_t n = 0; n < g.size(); ++n) next[n] = x[n];
  }
  g.extrapolate(next);
  for (std::size_t n = 0; n < g.size(); ++n)
    if (g.active(n) && !std::isfinite(next[n]))
      throw Error(ErrorKind::BlowUp, "non-finite value at node " + point_str(g.node(n)) +
                                         " at t = " + std::to_string(s.t + dt));
  s.values = std::move(next);
  s.t += dt;
  s.dt = dt;
  ++s.steps;
  s.scheme = cfg_.scheme;
}

SolutionField step_cauchy(const SolutionField& s, const coeffs::CoefficientField& field,
                          double dt, const SolverConfig& cfg) {
  Stepper st(field, s.grid, cfg);
  SolutionField out = s;
  st.step(out, dt);
  return out;
}

bool History::has(double t) const {
  for (double x : times)
    if (std::abs(x - t) <= 1e-9 * std::max(1.0, std::abs(t))) return true;
  return false;
}

const std::vector<double>& History::at(double t) const {
  auto it = std::lower_bound(times.begin(), times.end(), t - 1e-9 * std::max(1.0, std::abs(t)));
  if (it == times.end() || std::abs(*it - t) > 1e-9 * std::max(1.0, std::abs(t)))
    throw Error(ErrorKind::MissingSlice, "no PDE slice stored at t = " + std::to_string(t));
  return slices[static_cast<std::size_t>(it - times.begin())];
}

std::vector<double> save_grid(double t0, double t1, double step) {
  if (!(step > 0.0)) throw Error(ErrorKind::Validation, "save spacing must be positive");
  std::vector<double> out;
  const long long n = std::llround((t1 - t0) / step);
  for (long long k = 1; k <= n; ++k) out.push_back(t0 + k * step);
  return out;
}

CauchyRun solve_cauchy(Stepper& stepper, SolutionField s, double T, const CauchyOptions& opt) {
  CauchyRun run;
  run.history.grid = s.grid;
  if (opt.save_initial) {
    run.history.times.push_back(s.t);
    run.history.slices.push_back(s.values);
  }
  std::vector<double> saves = opt.save_times;
  std::sort(saves.begin(), saves.end());
  const double eps = 1e-12 * std::max(1.0, T);
  std::size_t next = 0;
  while (next < saves.size() && saves[next] <= s.t + eps) ++next;
  const int refresh = stepper.config().cfl_refresh;
  double bound = 0.0;
  int age = refresh;
  while (s.t < T - eps) {
    const double target = next < saves.size() ? std::min(saves[next], T) : T;
    if (age >= refresh) {
      bound = stepper.stable_dt(s.values);
      age = 0;
      ++run.cfl_refreshes;
    }
    double dt = std::min(bound, stepper.config().dt_max);
    if (stepper.config().scheme == Scheme::Imex) {
      double q = stepper.config().dt_max;
      while (q > dt) q *= 0.5;
      dt = q;
    }
    bool land = false;
    const double remaining = target - s.t;
    const bool imex = stepper.config().scheme == Scheme::Imex;
    if (remaining <= dt + (imex ? eps : 0.0)) {
      dt = remaining;
      land = true;
    } else if (remaining < 2.0 * dt && !imex) {
      dt = 0.5 * remaining;
    }
    stepper.advance(s, dt, bound);
    ++age;
    if (land) {
      s.t = target;
      if (next < saves.size() && target == std::min(saves[next], T)) {
        if (saves[next] <= T + eps) {
          run.history.times.push_back(s.t);
          run.history.slices.push_back(s.values);
        }
        ++next;
      }
    }
  }
  run.final = std::move(s);
  return run;
}

CauchyRun solve_cauchy(const coeffs::CoefficientField& field, GridPtr grid, std::vector<double> v0,
                       double T, const CauchyOptions& opt) {
  if (v0.size() != grid->size()) throw Error(ErrorKind::GridMismatch, "initial data size");
  Stepper st(field, grid, opt.solver);
  SolutionField s;
  s.grid = grid;
  s.values = std::move(v0);
  s.scheme = opt.solver.scheme;
  return solve_cauchy(st, std::move(s), T, opt);
}

std::size_t default_anchor(const Grid& grid, const std::optional<Vec>& center) {
  return grid.nearest(center ? *center : Vec::Zero(grid.dim()));
}

double ergodic_residual(const coeffs::CoefficientField& field, const Grid& grid,
                        const std::vector<double>& vhat, double lambdahat) {
  const auto cache = coeffs::CoefficientCache::build(field, grid);
  double r = 0.0;
  for (std::size_t n = 0; n < grid.size(); ++n)
    if (grid.interior(n))
      r = std::max(r, std::abs(coeffs::eval_operator(cache, grid, vhat, n) - lambdahat));
  return r;
}

double truncation_estimate(const coeffs::CoefficientField& field, const Grid& grid,
                           const std::vector<double>& vhat) {
  const int d = grid.dim();
  std::vector<double> lo(d), hi(d);
  std::vector<int> counts(d);
  for (int a = 0; a < d; ++a) {
    if (grid.count(a) % 2 == 0 || grid.count(a) < 9) return kNaN;
    lo[a] = grid.lo(a);
    hi[a] = grid.hi(a);
    counts[a] = (grid.count(a) - 1) / 2 + 1;
  }
  Grid coarse(lo, hi, counts, field.domain().membership);
  std::vector<double> cv(coarse.size(), 0.0);
  for (std::size_t n = 0; n < coarse.size(); ++n) {
    auto idx = coarse.multi_index(n);
    for (int a = 0; a < d; ++a) idx[a] *= 2;
    cv[n] = vhat[grid.flat_index(idx)];
  }
  const auto fine_cache = coeffs::CoefficientCache::build(field, grid);
  const auto coarse_cache = coeffs::CoefficientCache::build(field, coarse);
  double est = 0.0;
  for (std::size_t n = 0; n < coarse.size(); ++n) {
    if (!coarse.interior(n)) continue;
    auto idx = coarse.multi_index(n);
    for (int a = 0; a < d; ++a) idx[a] *= 2;
    const std::size_t f = grid.flat_index(idx);
    if (!grid.interior(f)) continue;
    const double Fh = coeffs::eval_operator(fine_cache, grid, vhat, f);
    const double F2h = coeffs::eval_operator(coarse_cache, coarse, cv, n);
    est = std::max(est, std::abs(F2h - Fh) / 3.0);
  }
  return est;
}

ErgodicPair solve_ergodic_normalization(const coeffs::CoefficientField& field, GridPtr grid,
                                        std::vector<double> v0, std::size_t anchor,
                                        const NormalizationOptions& opt) {
  if (!(opt.probe_interval > 0.0) || !(opt.tol > 0.0) || !(opt.tol_v > 0.0))
    throw Error(ErrorKind::Validation, "normalization probe and tolerances must be positive");
  if (v0.size() != grid->size()) throw Error(ErrorKind::GridMismatch, "initial data size");
  if (!grid->active(anchor)) throw Error(ErrorKind::Domain, "anchor node is masked");
  Stepper st(field, grid, opt.solver);
  SolutionField s;
  s.grid = grid;
  s.values = std::move(v0);
  ErgodicPair pair;
  pair.grid = grid;
  pair.anchor = anchor;
  pair.method = ErgodicMethod::Normalization;
  double prev_lambda = kNaN;
  CauchyOptions copt;
  copt.solver = opt.solver;
  copt.save_initial = false;
  while (true) {
    const std::vector<double> prev = s.values;
    const double T = s.t + opt.probe_interval;
    auto run = solve_cauchy(st, std::move(s), T, copt);
    s = std::move(run.final);
    const double lam = (s.values[anchor] - prev[anchor]) / opt.probe_interval;
    pair.lambda_trace.push_back(lam);
    double dv = 0.0;
    for (std::size_t n : st.stepped_nodes())
      dv = std::max(dv, std::abs(s.values[n] - prev[n] - lam * opt.probe_interval));
    const bool done = std::abs(lam - prev_lambda) < opt.tol && dv < opt.tol_v;
    prev_lambda = lam;
    if (done) break;
    if (s.t >= opt.T_max - 1e-12) {
      std::ostringstream os;
      os << "lambda not converged by T = " << s.t << "; trace:";
      const std::size_t from = pair.lambda_trace.size() > 8 ? pair.lambda_trace.size() - 8 : 0;
      for (std::size_t i = from; i < pair.lambda_trace.size(); ++i) os << " " << pair.lambda_trace[i];
      throw Error(ErrorKind::NonConvergence, os.str());
    }
  }
  pair.T = s.t;
  pair.lambdahat = prev_lambda;
  pair.vhat.assign(grid->size(), 0.0);
  for (std::size_t n = 0; n < grid->size(); ++n)
    if (grid->active(n)) pair.vhat[n] = s.values[n] - s.values[anchor];
  pair.residual = ergodic_residual(field, *grid, pair.vhat, pair.lambdahat);
  pair.truncation_estimate = truncation_estimate(field, *grid, pair.vhat);
  pair.iterations = static_cast<int>(pair.lambda_trace.size());
  return pair;
}

ErgodicPair solve_ergodic_eigen(const coeffs::CoefficientField& field, GridPtr grid, double kappa,
                                std::size_t anchor, const EigenOptions& opt) {
  if (!(kappa > 0.0)) throw Error(ErrorKind::Validation, "eigen method needs kappa > 0");
  const Grid& g = *grid;
  if (!g.active(anchor)) throw Error(ErrorKind::Domain, "anchor node is masked");
  const int d = g.dim();
  const auto cache = coeffs::CoefficientCache::build(field, g);
  std::vector<std::size_t> row(g.size(), kNone), node_of;
  for (std::size_t n = 0; n < g.size(); ++n)
    if (g.active(n)) {
      row[n] = node_of.size();
      node_of.push_back(n);
    }
  const auto N = static_cast<Eigen::Index>(node_of.size());
  std::vector<Eigen::Triplet<double>> trip;
  for (std::size_t r = 0; r < node_of.size(); ++r) {
    const std::size_t n = node_of[r];
    const double* A = &cache.A[n * d * d];
    const double* B = &cache.B[n * d];
    double diag = kappa * cache.V[n];
    for (int a = 0; a < d; ++a) {
      const double h = g.spacing(a);
      auto m = g.neighbor(n, a, -1);
      auto p = g.neighbor(n, a, +1);
      if (!m && !p) continue;
      if (!m || !p) {
        const std::size_t in = m ? *m : *p;
        const double inward = m ? -B[a] : B[a];
        if (inward > 0.0) {
          // Inflow face: zero-curvature ghost, one-sided drift.
          trip.emplace_back(r, row[in], inward / h);
          diag -= inward / h;
          continue;
        }
        // Outflow face: the missing neighbor mirrors the present one.
        m = p = in;
      }
      const double diff = 0.5 * A[a * d + a] / (h * h);
      double cm, cp;
      if (std::abs(B[a]) * h <= A[a * d + a]) {
        cm = diff - B[a] / (2.0 * h);
        cp = diff + B[a] / (2.0 * h);
      } else if (B[a] > 0.0) {
        cm = diff;
        cp = diff + B[a] / h;
      } else {
        cm = diff - B[a] / h;
        cp = diff;
      }
      trip.emplace_back(r, row[*m], cm);
      trip.emplace_back(r, row[*p], cp);
      diag -= cm + cp;
    }
    if (g.interior(n)) {
      for (int a = 0; a < d; ++a)
        for (int b = a + 1; b < d; ++b) {
          const double w = A[a * d + b] / (4.0 * g.spacing(a) * g.spacing(b));
          if (w == 0.0) continue;
          const std::size_t sa = g.stride(a), sb = g.stride(b);
          trip.emplace_back(r, row[n + sa + sb], w);
          trip.emplace_back(r, row[n + sa - sb], -w);
          trip.emplace_back(r, row[n - sa + sb], -w);
          trip.emplace_back(r, row[n - sa - sb], w);
        }
    }
    trip.emplace_back(r, r, diag);
  }
  Eigen::SparseMatrix<double> M(N, N);
  M.setFromTriplets(trip.begin(), trip.end());
  M.makeCompressed();

  double gersh = -std::numeric_limits<double>::infinity();
  double row_norm = 0.0;
  {
    std::vector<double> radius(node_of.size(), 0.0), dg(node_of.size(), 0.0);
    for (Eigen::Index c = 0; c < M.outerSize(); ++c)
      for (Eigen::SparseMatrix<double>::InnerIterator it(M, c); it; ++it) {
        if (it.row() == it.col())
          dg[it.row()] += it.value();
        else
          radius[it.row()] += std::abs(it.value());
      }
    for (std::size_t r = 0; r < node_of.size(); ++r) {
      gersh = std::max(gersh, dg[r] + radius[r]);
      row_norm = std::max(row_norm, std::abs(dg[r]) + radius[r]);
    }
  }
  Eigen::SparseMatrix<double> I(N, N);
  I.setIdentity();

  ErgodicPair pair;
  pair.grid = grid;
  pair.anchor = anchor;
  pair.method = ErgodicMethod::Eigen;
  Eigen::VectorXd gv = Eigen::VectorXd::Ones(N);
  double sigma = gersh + 1.0;
  double factored = kNaN;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  double mu = kNaN;
  bool converged = false;
  for (int it = 0; it < opt.max_iter; ++it) {
    if (!(sigma == factored)) {
      Eigen::SparseMatrix<double> S = sigma * I - M;
      lu.compute(S);
      if (lu.info() != Eigen::Success)
        throw Error(ErrorKind::EigenFailure, "shifted operator factorization failed");
      factored = sigma;
    }
    Eigen::VectorXd y = lu.solve(gv);
    const double scale = y.cwiseAbs().maxCoeff();
    if (!(scale > 0.0) || !std::isfinite(scale))
      throw Error(ErrorKind::EigenFailure, "inverse iteration produced a degenerate iterate");
    gv = y / scale;
    if (gv.minCoeff() <= 0.0)
      throw Error(ErrorKind::EigenFailure, "inverse iteration lost positivity (min " + std::to_string(gv.minCoeff()) + ", sigma " + std::to_string(sigma) + ") at iteration " +
                                               std::to_string(it));
    const Eigen::VectorXd Mg = M * gv;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (Eigen::Index r = 0; r < N; ++r) {
      const double q = Mg[r] / gv[r];
      lo = std::min(lo, q);
      hi = std::max(hi, q);
    }
    mu = 0.5 * (lo + hi);
    pair.lambda_trace.push_back(mu / kappa);
    pair.iterations = it + 1;
    // Rayleigh-type quotients cancel terms of size row_norm.
    const double floor = 64.0 * std::numeric_limits<double>::epsilon() * row_norm;
    if (hi - lo < opt.tol * std::max(1.0, std::abs(mu)) + floor) {
      converged = true;
      break;
    }
    // Collatz-Wielandt: hi bounds the principal eigenvalue from above, so the
    // shifted operator stays a nonsingular M-matrix.
    const double next = hi + std::max(0.1 * (hi - lo), 1e-12 * std::max(1.0, std::abs(hi)));
    if (next < sigma) sigma = next;
  }
  if (!converged)
    throw Error(ErrorKind::NonConvergence, "inverse iteration did not converge in " +
                                               std::to_string(opt.max_iter) + " iterations");
  pair.lambdahat = mu / kappa;
  pair.vhat.assign(g.size(), 0.0);
  const double ga = std::log(gv[static_cast<Eigen::Index>(row[anchor])]);
  for (std::size_t r = 0; r < node_of.size(); ++r)
    pair.vhat[node_of[r]] = (std::log(gv[static_cast<Eigen::Index>(r)]) - ga) / kappa;
  pair.residual = ergodic_residual(field, g, pair.vhat, pair.lambdahat);
  pair.truncation_estimate = truncation_estimate(field, g, pair.vhat);
  return pair;
}

HField compute_h(const Grid& grid, double t, const std::vector<double>& v, const ErgodicPair& pair) {
  if (!pair.grid || !pair.grid->same_layout(grid) || v.size() != grid.size())
    throw Error(ErrorKind::GridMismatch, "solution and ergodic pair live on different grids");
  HField hf;
  hf.grid = pair.grid;
  hf.t = t;
  hf.h.assign(grid.size(), 0.0);
  for (std::size_t n = 0; n < grid.size(); ++n)
    if (grid.active(n)) hf.h[n] = v[n] - pair.lambdahat * t - pair.vhat[n];
  hf.grad = gradient_field(grid, hf.h);
  hf.C_est = hf.h[pair.anchor];
  return hf;
}

HField compute_h(const SolutionField& sol, const ErgodicPair& pair) {
  if (!sol.grid) throw Error(ErrorKind::GridMismatch, "solution has no grid");
  return compute_h(*sol.grid, sol.t, sol.values, pair);
}

ConvergenceReport pointwise_convergence_report(const std::vector<HField>& hf,
                                               const std::function<bool(const Vec&)>& inner,
                                               double grad_tol, double noise_floor) {
  if (hf.size() < 3) throw Error(ErrorKind::InsufficientProbe, "convergence report needs >= 3 times");
  const Grid& g = *hf.front().grid;
  for (const auto& f : hf)
    if (!f.grid->same_layout(g)) throw Error(ErrorKind::GridMismatch, "h fields on different grids");
  const int d = g.dim();
  std::vector<std::size_t> nodes;
  for (std::size_t n = 0; n < g.size(); ++n)
    if (g.active(n) && inner(g.node(n))) nodes.push_back(n);
  ConvergenceReport rep;
  for (const auto& f : hf) {
    rep.times.push_back(f.t);
    rep.C_trace.push_back(f.C_est);
    double gs = 0.0;
    for (std::size_t n : nodes) {
      double q = 0.0;
      for (int a = 0; a < d; ++a) q += f.grad[n * d + a] * f.grad[n * d + a];
      if (!std::isfinite(q)) rep.finite = false;
      gs = std::max(gs, std::sqrt(q));
    }
    rep.grad_sup.push_back(gs);
  }
  for (std::size_t k = 0; k + 1 < hf.size(); ++k) {
    double m = 0.0;
    for (std::size_t n : nodes) {
      const double diff = std::abs(hf[k + 1].h[n] - hf[k].h[n]);
      if (!std::isfinite(diff)) rep.finite = false;
      m = std::max(m, diff);
    }
    rep.h_increment.push_back(m);
  }
  auto decreasing = [noise_floor](const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i)
      if (!(v[i] < v[i - 1]) && !(v[i] <= noise_floor)) return false;
    return true;
  };
  rep.h_monotone = decreasing(rep.h_increment);
  rep.grad_monotone = decreasing(rep.grad_sup);
  rep.grad_within_tol = rep.grad_sup.back() <= grad_tol;
  if (!rep.finite) rep.flags.push_back("non-finite h values");
  if (!rep.h_monotone) rep.flags.push_back("h increments not decreasing");
  if (!rep.grad_monotone) rep.flags.push_back("grad h sup not decreasing");
  if (!rep.grad_within_tol) rep.flags.push_back("grad h above tolerance at the last time");
  rep.pass = rep.finite && rep.h_monotone && rep.grad_monotone && rep.grad_within_tol;
  return rep;
}

std::function<bool(const Vec&)> inner_half(const Grid& grid) {
  const int d = grid.dim();
  std::vector<double> c(d), r(d);
  for (int a = 0; a < d; ++a) {
    c[a] = 0.5 * (grid.lo(a) + grid.hi(a));
    r[a] = 0.25 * (grid.hi(a) - grid.lo(a)) * (1.0 + 1e-12);
  }
  return [c, r, d](const Vec& x) {
    for (int a = 0; a < d; ++a)
      if (std::abs(x[a] - c[a]) > r[a]) return false;
    return true;
  };
}

BoundaryInfluence boundary_influence_study(const FieldFactory& make, const Grid& base,
                                           const std::function<double(const Vec&)>& v0,
                                           const ErgodicPair& base_pair,
                                           const NormalizationOptions& opt) {
  const int d = base.dim();
  BoundaryInfluence bi;
  bi.doubled_lo.resize(d);
  bi.doubled_hi.resize(d);
  std::vector<int> counts(d);
  for (int a = 0; a < d; ++a) {
    const double c = 0.5 * (base.lo(a) + base.hi(a));
    bi.doubled_lo[a] = c - 2.0 * (c - base.lo(a));
    bi.doubled_hi[a] = c + 2.0 * (base.hi(a) - c);
    counts[a] = 2 * (base.count(a) - 1) + 1;
  }
  const auto field = make(bi.doubled_lo, bi.doubled_hi);
  auto big = std::make_shared<const Grid>(bi.doubled_lo, bi.doubled_hi, counts,
                                          field.domain().membership);
  std::vector<double> init(big->size(), 0.0);
  for (std::size_t n = 0; n < big->size(); ++n)
    if (big->active(n)) init[n] = v0(big->node(n));
  const Vec x0 = base.node(base_pair.anchor);
  const std::size_t anchor = big->nearest(x0);
  const auto pair = solve_ergodic_normalization(field, big, std::move(init), anchor, opt);
  bi.lambda_diff = std::abs(pair.lambdahat - base_pair.lambdahat);
  const auto inner = inner_half(base);
  for (std::size_t n = 0; n < base.size(); ++n) {
    if (!base.active(n) || !inner(base.node(n))) continue;
    const std::size_t m = big->nearest(base.node(n));
    bi.vhat_diff = std::max(bi.vhat_diff, std::abs(pair.vhat[m] - base_pair.vhat[n]));
  }
  return bi;
}

}  // namespace hjblab::pdesolve
