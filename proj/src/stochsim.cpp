#include "hjblab/stochsim.hpp"

#include "hjblab/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <thread>

namespace hjblab::stochsim {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t steps_of(double T, double dt) {
  const double r = T / dt;
  const auto n = static_cast<std::size_t>(std::llround(r));
  if (n == 0 || std::abs(r - static_cast<double>(n)) > 1e-6 * std::max(1.0, r))
    throw Error(ErrorKind::Validation, "sim.T must be a positive multiple of sim.dt");
  return n;
}

std::vector<std::size_t> save_steps(const SimConfig& cfg, std::size_t N) {
  std::vector<std::size_t> out{0};
  for (double t : cfg.save_times) {
    const double r = t / cfg.dt;
    const auto k = static_cast<std::size_t>(std::llround(r));
    if (std::abs(r - static_cast<double>(k)) > 1e-6 * std::max(1.0, r) || k > N)
      throw Error(ErrorKind::Validation, "sim.save_times must be multiples of sim.dt within [0, T]");
    out.push_back(k);
  }
  out.push_back(N);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Runs body(path) for every path, split into contiguous blocks per thread.
template <class F>
void for_paths(std::size_t n, int threads, F&& body) {
  const std::size_t T = std::max<std::size_t>(1, std::min<std::size_t>(threads, n));
  if (T == 1) {
    for (std::size_t p = 0; p < n; ++p) body(p);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < T; ++k)
    pool.emplace_back([&, k] {
      for (std::size_t p = k * n / T; p < (k + 1) * n / T; ++p) body(p);
    });
  for (auto& th : pool) th.join();
}

struct Stream {
  std::mt19937_64 rng;
  std::normal_distribution<double> normal{0.0, 1.0};
  double sign = 1.0;
  Stream(const SimConfig& cfg, std::size_t path)
      : rng(path_seed(cfg.seed, cfg.antithetic ? path / 2 : path)),
        sign(cfg.antithetic && path % 2 == 1 ? -1.0 : 1.0) {}
  double next() { return sign * normal(rng); }
};

PathBundle empty_bundle(const SimConfig& cfg, int dim, int matrix_dim, std::size_t N,
                        const std::vector<std::size_t>& saves) {
  PathBundle b;
  b.dim = dim;
  b.matrix_dim = matrix_dim;
  for (std::size_t k : saves) b.save_times.push_back(static_cast<double>(k) * cfg.dt);
  b.states.assign(cfg.n_paths, std::vector<double>(saves.size() * dim, 0.0));
  b.seeds.resize(cfg.n_paths);
  for (std::size_t p = 0; p < cfg.n_paths; ++p)
    b.seeds[p] = path_seed(cfg.seed, cfg.antithetic ? p / 2 : p);
  b.exit.assign(cfg.n_paths, ExitKind::None);
  b.exit_time.assign(cfg.n_paths, kNaN);
  b.steps = N;
  return b;
}

double mean_of(std::span<const double> v) {
  return v.empty() ? kNaN : pairwise_sum(v) / static_cast<double>(v.size());
}

void summarize(std::span<const double> units, double& mean, double& se) {
  mean = mean_of(units);
  if (units.size() < 2) {
    se = units.empty() ? kNaN : 0.0;
    return;
  }
  std::vector<double> sq(units.size());
  for (std::size_t i = 0; i < units.size(); ++i) sq[i] = (units[i] - mean) * (units[i] - mean);
  const double var = pairwise_sum(sq) / static_cast<double>(units.size() - 1);
  se = std::sqrt(var / static_cast<double>(units.size()));
}

}  // namespace

void validate(const SimConfig& cfg) {
  if (cfg.n_paths < 1) throw Error(ErrorKind::Validation, "sim.n_paths must be at least 1");
  if (!(cfg.dt > 0.0)) throw Error(ErrorKind::Validation, "sim.dt must be positive");
  if (!(cfg.T > 0.0)) throw Error(ErrorKind::Validation, "sim.T must be positive");
  if (!(cfg.pde_floor >= 0.0)) throw Error(ErrorKind::Validation, "sim.pde_floor must be non-negative");
  if (!(cfg.eps_psd >= 0.0)) throw Error(ErrorKind::Validation, "sim.eps_psd must be non-negative");
  if (cfg.threads < 1) throw Error(ErrorKind::Validation, "sim.threads must be at least 1");
  if (cfg.antithetic && cfg.n_paths % 2 != 0)
    throw Error(ErrorKind::Validation, "sim.n_paths must be even with antithetic pairing");
  steps_of(cfg.T, cfg.dt);
}

std::uint64_t path_seed(std::uint64_t base, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

CellWeights locate(const Grid& g, const double* x) {
  const int d = g.dim();
  std::array<int, kMaxGridDim> base{};
  std::array<double, kMaxGridDim> frac{};
  for (int a = 0; a < d; ++a) {
    const double r = (x[a] - g.lo(a)) / g.spacing(a);
    int i = static_cast<int>(std::floor(r));
    i = std::clamp(i, 0, g.count(a) - 2);
    base[a] = i;
    frac[a] = std::clamp(r - i, 0.0, 1.0);
  }
  CellWeights c;
  c.count = 1 << d;
  bool masked = false;
  for (int k = 0; k < c.count; ++k) {
    auto idx = base;
    double w = 1.0;
    for (int a = 0; a < d; ++a) {
      const int bit = (k >> a) & 1;
      idx[a] += bit;
      w *= bit ? frac[a] : 1.0 - frac[a];
    }
    c.node[k] = g.flat_index(idx);
    c.w[k] = w;
    if (!g.active(c.node[k])) masked = true;
  }
  if (masked) {
    Vec p(d);
    for (int a = 0; a < d; ++a) p[a] = x[a];
    c.count = 1;
    c.node[0] = g.nearest(p);
    c.w[0] = 1.0;
  }
  return c;
}

// TiltedDrift -----------------------------------------------------------------

namespace {

std::vector<double> node_drift(const coeffs::CoefficientCache& cache, const Grid& g,
                               const std::vector<double>& grad) {
  const int d = g.dim();
  std::vector<double> out(g.size() * d, 0.0);
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!g.active(n)) continue;
    for (int i = 0; i < d; ++i) {
      double s = cache.B[n * d + i];
      for (int j = 0; j < d; ++j) s += cache.Abar[n * d * d + i * d + j] * grad[n * d + j];
      out[n * d + i] = s;
    }
  }
  return out;
}

}  // namespace

void TiltedDrift::cache_diffusion(const coeffs::CoefficientField& field) {
  const Grid& g = *grid_;
  const int d = g.dim();
  sqrtA_.assign(g.size() * d * d, 0.0);
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!g.active(n)) continue;
    const Mat a = sqrtm_psd(field.A(g.node(n)));
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) sqrtA_[n * d * d + i * d + j] = a(i, j);
  }
  member_ = field.domain().membership;
}

TiltedDrift TiltedDrift::from_values(const coeffs::CoefficientField& field, GridPtr grid,
                                     const std::vector<double>& phi) {
  if (phi.size() != grid->size()) throw Error(ErrorKind::GridMismatch, "tilt values size");
  TiltedDrift t;
  t.grid_ = std::move(grid);
  const auto cache = coeffs::CoefficientCache::build(field, *t.grid_);
  t.drift_.push_back(node_drift(cache, *t.grid_, gradient_field(*t.grid_, phi)));
  t.cache_diffusion(field);
  return t;
}

TiltedDrift TiltedDrift::from_function(const coeffs::CoefficientField& field, GridPtr grid,
                                       const coeffs::SmoothFunction& phi) {
  TiltedDrift t;
  t.grid_ = std::move(grid);
  const Grid& g = *t.grid_;
  const int d = g.dim();
  std::vector<double> grad(g.size() * d, 0.0);
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!g.active(n)) continue;
    const Vec gr = phi.grad(g.node(n));
    for (int i = 0; i < d; ++i) grad[n * d + i] = gr[i];
  }
  const auto cache = coeffs::CoefficientCache::build(field, g);
  t.drift_.push_back(node_drift(cache, g, grad));
  t.cache_diffusion(field);
  return t;
}

TiltedDrift TiltedDrift::from_history(const coeffs::CoefficientField& field,
                                      const pdesolve::History& history, double T, double t,
                                      double dt) {
  TiltedDrift td;
  td.grid_ = history.grid;
  const auto cache = coeffs::CoefficientCache::build(field, *td.grid_);
  const std::size_t K = steps_of(t, dt);
  for (std::size_t k = 0; k <= K; ++k) {
    const auto& v = history.at(T - static_cast<double>(k) * dt);
    td.drift_.push_back(node_drift(cache, *td.grid_, gradient_field(*td.grid_, v)));
  }
  td.cache_diffusion(field);
  return td;
}

ExitKind TiltedDrift::classify(const double* x) const {
  const Grid& g = *grid_;
  for (int a = 0; a < g.dim(); ++a)
    if (!(x[a] >= g.lo(a) && x[a] <= g.hi(a))) return ExitKind::LeftBox;
  if (member_ && !member_(Eigen::Map<const Vec>(x, g.dim()))) return ExitKind::LeftCone;
  return ExitKind::None;
}

void TiltedDrift::eval(std::size_t slice, const CellWeights& c, double* drift, double* a) const {
  const int d = dim();
  const auto& dr = drift_[std::min(slice, drift_.size() - 1)];
  for (int i = 0; i < d; ++i) drift[i] = interpolate(c, dr.data(), d, i);
  for (int i = 0; i < d * d; ++i) a[i] = interpolate(c, sqrtA_.data(), d * d, i);
}

Vec TiltedDrift::drift(const Vec& x, std::size_t slice) const {
  const int d = dim();
  const auto c = locate(*grid_, x.data());
  Vec out(d);
  std::vector<double> a(d * d);
  eval(slice, c, out.data(), a.data());
  return out;
}

std::string to_string(ExitKind k) {
  switch (k) {
    case ExitKind::None: return "none";
    case ExitKind::LeftBox: return "left-box";
    case ExitKind::LeftCone: return "left-cone";
    case ExitKind::NonFinite: return "non-finite";
  }
  return "?";
}

// PathBundle ------------------------------------------------------------------

double PathBundle::exit_fraction() const {
  if (exit.empty()) return 0.0;
  std::size_t n = 0;
  for (auto e : exit) n += e != ExitKind::None;
  return static_cast<double>(n) / static_cast<double>(exit.size());
}

double PathBundle::clip_fraction() const {
  const double total = static_cast<double>(steps) * static_cast<double>(states.size());
  return total > 0 ? static_cast<double>(clip_events) / total : 0.0;
}

std::span<const double> PathBundle::state(std::size_t path, std::size_t save) const {
  return std::span<const double>(states[path]).subspan(save * dim, dim);
}

std::size_t PathBundle::save_index(double t) const {
  for (std::size_t i = 0; i < save_times.size(); ++i)
    if (std::abs(save_times[i] - t) <= 1e-9 * std::max(1.0, std::abs(t))) return i;
  throw Error(ErrorKind::MissingSlice, "no saved state at t = " + std::to_string(t));
}

// Simulation ------------------------------------------------------------------

PathBundle simulate_tilted(const TiltedDrift& drift, const Vec& x0, const SimConfig& cfg,
                           const PathVisitor& visit) {
  validate(cfg);
  const int d = drift.dim();
  if (x0.size() != d) throw Error(ErrorKind::Dimension, "start point dimension");
  if (!drift.inside(x0.data())) throw Error(ErrorKind::Domain, "start point outside the grid box");
  const std::size_t N = steps_of(cfg.T, cfg.dt);
  const auto saves = save_steps(cfg, N);
  PathBundle b = empty_bundle(cfg, d, 0, N, saves);
  const double sq = std::sqrt(cfg.dt);
  const Grid& g = drift.grid();

  for_paths(cfg.n_paths, cfg.threads, [&](std::size_t p) {
    Stream rs(cfg, p);
    std::array<double, kMaxGridDim> x{}, xn{}, mu{}, z{};
    std::array<double, kMaxGridDim * kMaxGridDim> a{};
    for (int i = 0; i < d; ++i) x[i] = x0[i];
    bool frozen = false;
    std::size_t si = 0;
    auto save = [&](std::size_t k) {
      while (si < saves.size() && saves[si] == k) {
        for (int i = 0; i < d; ++i) b.states[p][si * d + i] = x[i];
        ++si;
      }
    };
    save(0);
    if (visit) visit(p, 0, 0.0, x.data(), false);
    for (std::size_t k = 1; k <= N; ++k) {
      if (!frozen) {
        const auto c = locate(g, x.data());
        drift.eval(k - 1, c, mu.data(), a.data());
        for (int i = 0; i < d; ++i) z[i] = rs.next();
        bool finite = true;
        for (int i = 0; i < d; ++i) {
          double s = x[i] + mu[i] * cfg.dt;
          for (int j = 0; j < d; ++j) s += a[i * d + j] * z[j] * sq;
          xn[i] = s;
          finite = finite && std::isfinite(s);
        }
        const ExitKind e = finite ? drift.classify(xn.data()) : ExitKind::NonFinite;
        if (e != ExitKind::None) {
          frozen = true;
          b.exit[p] = e;
          b.exit_time[p] = static_cast<double>(k) * cfg.dt;
        } else {
          x = xn;
        }
      }
      save(k);
      if (visit) visit(p, k, static_cast<double>(k) * cfg.dt, x.data(), frozen);
    }
  });
  if (b.exit_fraction() >= 1.0)
    throw Error(ErrorKind::EmptyEstimate, "every simulated path left the domain");
  if (b.exit_fraction() > 0.0)
    b.warnings.push_back("exit fraction " + std::to_string(b.exit_fraction()));
  return b;
}

PathBundle simulate_wishart(const matrixdom::WishartParams& p, const matrixdom::SpdPoint& x0,
                            const SimConfig& cfg, const PathVisitor& visit) {
  validate(cfg);
  matrixdom::validate_wishart(p);
  const int d = x0.dim();
  if (p.L.rows() != d) throw Error(ErrorKind::Dimension, "Wishart parameters and start point");
  const std::size_t N = steps_of(cfg.T, cfg.dt);
  const auto saves = save_steps(cfg, N);
  PathBundle b = empty_bundle(cfg, d * d, d, N, saves);
  const Mat LL = p.L * p.L.transpose();
  const double sq = std::sqrt(cfg.dt);
  std::vector<std::size_t> clips(cfg.n_paths, 0);

  for_paths(cfg.n_paths, cfg.threads, [&](std::size_t path) {
    Stream rs(cfg, path);
    Mat X = x0.matrix();
    Mat dW(d, d);
    bool frozen = false;
    std::size_t si = 0;
    auto save = [&](std::size_t k) {
      while (si < saves.size() && saves[si] == k) {
        for (int i = 0; i < d * d; ++i) b.states[path][si * d * d + i] = X.data()[i];
        ++si;
      }
    };
    save(0);
    if (visit) visit(path, 0, 0.0, X.data(), false);
    for (std::size_t k = 1; k <= N; ++k) {
      if (!frozen) {
        for (int j = 0; j < d; ++j)
          for (int i = 0; i < d; ++i) dW(i, j) = rs.next() * sq;
        Mat Xn;
        if (d == 1) {
          const double x = X(0, 0);
          const double n1 = std::sqrt(std::max(x, 0.0)) * dW(0, 0) * p.Lambda(0, 0);
          Xn = Mat::Constant(1, 1, x + (LL(0, 0) + 2.0 * p.K(0, 0) * x) * cfg.dt + 2.0 * n1);
          const double thr = cfg.eps_psd * std::max(1.0, Xn(0, 0));
          if (Xn(0, 0) < thr) {
            Xn(0, 0) = thr;
            ++clips[path];
          }
        } else {
          const Mat root = sqrtm_psd(X);
          const Mat P = p.K * X;
          const Mat Nz = root * dW * p.Lambda.transpose();
          const Mat drift = (LL + P + P.transpose()) * cfg.dt;
          const Mat noise = Nz + Nz.transpose();
          Xn = X + drift + noise;
          Eigen::SelfAdjointEigenSolver<Mat> es(Xn);
          const double lmax = es.eigenvalues().maxCoeff();
          const double thr = cfg.eps_psd * std::max(1.0, lmax);
          if (es.eigenvalues().minCoeff() < thr) {
            const Vec ev = es.eigenvalues().cwiseMax(thr);
            Xn = symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
            ++clips[path];
          }
        }
        if (!Xn.allFinite()) {
          frozen = true;
          b.exit[path] = ExitKind::NonFinite;
          b.exit_time[path] = static_cast<double>(k) * cfg.dt;
        } else {
          X = Xn;
        }
      }
      save(k);
      if (visit) visit(path, k, static_cast<double>(k) * cfg.dt, X.data(), frozen);
    }
  });
  for (std::size_t c : clips) b.clip_events += c;
  if (b.exit_fraction() >= 1.0)
    throw Error(ErrorKind::EmptyEstimate, "every simulated path became non-finite");
  if (b.clip_fraction() > cfg.clip_warn)
    b.warnings.push_back("scheme warning: clip fraction " + std::to_string(b.clip_fraction()) +
                         " above " + std::to_string(cfg.clip_warn));
  return b;
}

// Estimates -------------------------------------------------------------------

MCEstimate estimate(std::string tag, std::span<const double> values, std::span<const ExitKind> exit,
                    bool antithetic) {
  if (values.size() != exit.size()) throw Error(ErrorKind::Dimension, "estimate inputs differ in size");
  if (values.empty()) throw Error(ErrorKind::EmptyEstimate, "no paths for " + tag);
  MCEstimate e;
  e.tag = std::move(tag);
  const std::size_t unit = antithetic ? 2 : 1;
  if (values.size() % unit != 0) throw Error(ErrorKind::Validation, "odd path count with antithetic pairs");
  std::vector<double> all, kept;
  std::size_t exited = 0;
  for (std::size_t i = 0; i < values.size(); i += unit) {
    double s = 0.0;
    bool out = false;
    for (std::size_t j = 0; j < unit; ++j) {
      s += values[i + j];
      out = out || exit[i + j] != ExitKind::None;
    }
    all.push_back(s / static_cast<double>(unit));
    if (!out) kept.push_back(s / static_cast<double>(unit));
  }
  for (auto x : exit) exited += x != ExitKind::None;
  summarize(all, e.mean, e.se);
  e.n_effective = all.size();
  summarize(kept, e.mean_excl, e.se_excl);
  e.n_excl = kept.size();
  e.exit_fraction = static_cast<double>(exited) / static_cast<double>(exit.size());
  return e;
}

MCEstimate time_average(const TiltedDrift& drift, const Vec& x0, const SimConfig& cfg, double t_from,
                        const std::function<double(const double*)>& f, std::string tag) {
  std::vector<double> sum(cfg.n_paths, 0.0);
  std::vector<std::size_t> cnt(cfg.n_paths, 0);
  const auto b = simulate_tilted(drift, x0, cfg, [&](std::size_t p, std::size_t, double s,
                                                    const double* x, bool) {
    if (s >= t_from - 1e-12) {
      sum[p] += f(x);
      ++cnt[p];
    }
  });
  for (std::size_t p = 0; p < sum.size(); ++p) sum[p] /= static_cast<double>(std::max<std::size_t>(1, cnt[p]));
  return estimate(std::move(tag), sum, b.exit, cfg.antithetic);
}

MCEstimate wishart_time_average(const matrixdom::WishartParams& p, const matrixdom::SpdPoint& x0,
                                const SimConfig& cfg, double t_from,
                                const std::function<double(const Mat&)>& f, std::string tag,
                                double* clip_fraction) {
  const int d = x0.dim();
  std::vector<double> sum(cfg.n_paths, 0.0);
  std::vector<std::size_t> cnt(cfg.n_paths, 0);
  const auto b = simulate_wishart(p, x0, cfg, [&](std::size_t path, std::size_t, double s,
                                                 const double* x, bool) {
    if (s >= t_from - 1e-12) {
      sum[path] += f(Eigen::Map<const Mat>(x, d, d));
      ++cnt[path];
    }
  });
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= static_cast<double>(std::max<std::size_t>(1, cnt[i]));
  if (clip_fraction) *clip_fraction = b.clip_fraction();
  return estimate(std::move(tag), sum, b.exit, cfg.antithetic);
}

double Histogram::l1_distance(const std::function<double(double)>& pdf) const {
  const double w = (hi - lo) / static_cast<double>(density.size());
  double l1 = 0.0;
  for (std::size_t i = 0; i < density.size(); ++i)
    l1 += std::abs(density[i] - pdf(lo + (static_cast<double>(i) + 0.5) * w)) * w;
  return l1;
}

Histogram occupation_histogram(const TiltedDrift& drift, const Vec& x0, const SimConfig& cfg,
                               double t_from, double lo, double hi, int bins) {
  if (!(hi > lo) || bins < 1) throw Error(ErrorKind::Validation, "histogram range and bins");
  std::vector<std::atomic<std::uint64_t>> counts(bins);
  std::atomic<std::uint64_t> total{0};
  const double w = (hi - lo) / bins;
  simulate_tilted(drift, x0, cfg, [&](std::size_t, std::size_t, double s, const double* x, bool) {
    if (s < t_from - 1e-12) return;
    total.fetch_add(1, std::memory_order_relaxed);
    const double r = (x[0] - lo) / w;
    if (r >= 0.0 && r < bins) counts[static_cast<int>(r)].fetch_add(1, std::memory_order_relaxed);
  });
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.density.resize(bins);
  for (int i = 0; i < bins; ++i)
    h.density[i] = static_cast<double>(counts[i].load()) / (static_cast<double>(total.load()) * w);
  return h;
}

// Functionals -----------------------------------------------------------------

HSlices h_slices(const pdesolve::History& history, const pdesolve::ErgodicPair& pair, double T,
                 double t, double dt) {
  if (!history.grid || !pair.grid || !history.grid->same_layout(*pair.grid))
    throw Error(ErrorKind::GridMismatch, "history and ergodic pair live on different grids");
  HSlices hs;
  hs.grid = pair.grid;
  const std::size_t K = steps_of(t, dt);
  for (std::size_t k = 0; k <= K; ++k) {
    const double tau = T - static_cast<double>(k) * dt;
    const auto hf = pdesolve::compute_h(*pair.grid, tau, history.at(tau), pair);
    hs.h.push_back(hf.h);
    hs.grad.push_back(hf.grad);
  }
  return hs;
}

Functionals mc_functionals(const coeffs::CoefficientField& field, const pdesolve::History& history,
                           const pdesolve::ErgodicPair& pair, double t, double T, const Vec& x0,
                           const SimConfig& cfg) {
  SimConfig c = cfg;
  c.T = t;
  c.save_times.clear();
  const auto hs = h_slices(history, pair, T, t, c.dt);
  const auto drift = TiltedDrift::from_values(field, pair.grid, pair.vhat);
  const Grid& g = *pair.grid;
  const int d = g.dim();
  const auto cache = coeffs::CoefficientCache::build(field, g);
  std::vector<double> sqrtA(g.size() * d * d, 0.0);
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!g.active(n)) continue;
    const Mat a = sqrtm_psd(field.A(g.node(n)));
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) sqrtA[n * d * d + i * d + j] = a(i, j);
  }
  const std::size_t K = hs.h.size() - 1;
  const double hT = interpolate(locate(g, x0.data()), hs.h[0].data());

  const std::size_t P = c.n_paths;
  std::vector<double> f(P, 0.0), sup(P, 0.0), za(P, 0.0), zb(P, 0.0), end(P, 0.0);
  const auto bundle = simulate_tilted(drift, x0, c, [&](std::size_t p, std::size_t k, double,
                                                       const double* x, bool) {
    const auto cw = locate(g, x);
    const double hv = interpolate(cw, hs.h[k].data());
    sup[p] = std::max(sup[p], std::abs(hT - hv));
    if (k == K) {
      end[p] = hv;
      return;
    }
    std::array<double, kMaxGridDim> gr{};
    for (int i = 0; i < d; ++i) gr[i] = interpolate(cw, hs.grad[k].data(), d, i);
    double qbar = 0.0, qa = 0.0, qz = 0.0;
    for (int i = 0; i < d; ++i) {
      double az = 0.0;  // (a' grad h)_i
      for (int j = 0; j < d; ++j) {
        qbar += gr[i] * interpolate(cw, cache.Abar.data(), d * d, i * d + j) * gr[j];
        qa += gr[i] * interpolate(cw, cache.A.data(), d * d, i * d + j) * gr[j];
        az += interpolate(cw, sqrtA.data(), d * d, j * d + i) * gr[j];
      }
      qz += az * az;
    }
    f[p] += 0.5 * qbar * c.dt;
    za[p] += qz * c.dt;
    zb[p] += qa * c.dt;
  });

  Functionals out;
  out.exit_fraction = bundle.exit_fraction();
  out.f_est = estimate("f_est", f, bundle.exit, c.antithetic);
  out.supdev_est = estimate("supdev_est", sup, bundle.exit, c.antithetic);
  out.z_energy = estimate("z_energy", za, bundle.exit, c.antithetic);
  out.y_supdev = estimate("y_supdev", sup, bundle.exit, c.antithetic);
  out.end_h = estimate("h_end", end, bundle.exit, c.antithetic);
  out.h_T_x0 = hT;
  out.identity_rhs = hT - out.end_h.mean;
  std::vector<double> diff(P);
  for (std::size_t p = 0; p < P; ++p) diff[p] = f[p] + end[p] - hT;
  const auto de = estimate("identity_diff", diff, bundle.exit, c.antithetic);
  out.identity_se = de.se;
  // Gap beyond the accuracy floor of the PDE-derived h, in standard errors.
  const double gap = std::max(0.0, std::abs(de.mean) - c.pde_floor);
  out.z_score = de.se > 0.0 ? gap / de.se : (gap == 0.0 ? 0.0 : kNaN);

  const double kl = field.kappa_lo();
  const double m = *std::max_element(end.begin(), end.end());
  std::vector<double> w(P);
  for (std::size_t p = 0; p < P; ++p) w[p] = std::exp(kl * (end[p] - m));
  const auto we = estimate("exp_weight", w, bundle.exit, c.antithetic);
  out.exp_bound_lhs = m + std::log(we.mean) / kl;
  out.exp_bound_se = we.se / (we.mean * kl);
  out.exp_bound_holds = out.exp_bound_lhs <= hT + 3.0 * out.exp_bound_se + c.pde_floor;

  double zmax = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    out.route_gap = std::max(out.route_gap, std::abs(za[p] - zb[p]));
    zmax = std::max(zmax, zb[p]);
  }
  out.routes_agree = out.route_gap <= c.dt * std::max(1.0, zmax);
  return out;
}

ConvergenceFunctionals mc_convergence_functionals(const coeffs::CoefficientField& field,
                                                  const pdesolve::History& history,
                                                  const pdesolve::ErgodicPair& pair, double t,
                                                  double T, const Vec& x0, const SimConfig& cfg) {
  const auto f = mc_functionals(field, history, pair, t, T, x0, cfg);
  return {f.f_est, f.supdev_est};
}

IdentityCheck mc_identity_check(const coeffs::CoefficientField& field,
                                const pdesolve::History& history, const pdesolve::ErgodicPair& pair,
                                double t, double T, const Vec& x0, const SimConfig& cfg) {
  const auto f = mc_functionals(field, history, pair, t, T, x0, cfg);
  IdentityCheck out;
  out.lhs = f.f_est;
  out.rhs = f.identity_rhs;
  out.z_score = f.z_score;
  out.exp_bound_lhs = f.exp_bound_lhs;
  out.exp_bound_rhs = f.h_T_x0 + 3.0 * f.exp_bound_se + cfg.pde_floor;
  out.exp_bound_holds = f.exp_bound_holds;
  return out;
}

BsdeResiduals bsde_residuals(const coeffs::CoefficientField& field, const pdesolve::History& history,
                             const pdesolve::ErgodicPair& pair, double t, double T, const Vec& x0,
                             const SimConfig& cfg) {
  const auto f = mc_functionals(field, history, pair, t, T, x0, cfg);
  return {f.z_energy, f.y_supdev, f.route_gap, f.routes_agree};
}

SandwichResult mc_sandwich(const coeffs::CoefficientField& field, GridPtr grid,
                           const coeffs::SmoothFunction& phi0,
                           const std::function<double(const Vec&)>& v0, double zeta, double t,
                           const Vec& x0, const SimConfig& cfg) {
  if (!(zeta > 0.0)) throw Error(ErrorKind::Validation, "sandwich exponent must be positive");
  SimConfig c = cfg;
  c.T = t;
  c.save_times.clear();
  const Grid& g = *grid;
  std::vector<double> Fphi(g.size(), 0.0), gap(g.size(), 0.0);
  for (std::size_t n = 0; n < g.size(); ++n) {
    if (!g.active(n)) continue;
    const Vec x = g.node(n);
    Fphi[n] = coeffs::eval_operator(field, phi0, x);
    gap[n] = v0(x) - phi0.value(x);
  }
  const auto drift = TiltedDrift::from_function(field, grid, phi0);
  const std::size_t K = steps_of(t, c.dt);
  std::vector<double> Y(c.n_paths, 0.0);
  const auto b = simulate_tilted(drift, x0, c, [&](std::size_t p, std::size_t k, double,
                                                  const double* x, bool) {
    const auto cw = locate(g, x);
    if (k == K)
      Y[p] += zeta * interpolate(cw, gap.data());
    else
      Y[p] += zeta * interpolate(cw, Fphi.data()) * c.dt;
  });
  const double m = *std::max_element(Y.begin(), Y.end());
  std::vector<double> w(c.n_paths);
  for (std::size_t p = 0; p < w.size(); ++p) w[p] = std::exp(Y[p] - m);
  const auto we = estimate("psi_weight", w, b.exit, c.antithetic);
  SandwichResult out;
  const double base = phi0.value(x0);
  out.psi = we;
  out.psi.tag = "psi";
  out.psi.mean = base + (m + std::log(we.mean)) / zeta;
  out.psi.se = we.se / (we.mean * zeta);
  out.psi.mean_excl = base + (m + std::log(we.mean_excl)) / zeta;
  out.psi.se_excl = we.se_excl / (we.mean_excl * zeta);
  std::vector<double> w2(w.size());
  for (std::size_t p = 0; p < w.size(); ++p) w2[p] = w[p] * w[p];
  const double s1 = pairwise_sum(w), s2 = pairwise_sum(w2);
  out.ess = s1 * s1 / s2;
  out.ess_ok = out.ess >= static_cast<double>(c.ess_floor);
  if (!out.ess_ok)
    out.warnings.push_back("variance warning: effective sample size " + std::to_string(out.ess) +
                           " below " + std::to_string(c.ess_floor));
  for (const auto& wmsg : b.warnings) out.warnings.push_back(wmsg);
  return out;
}

}  // namespace hjblab::stochsim
