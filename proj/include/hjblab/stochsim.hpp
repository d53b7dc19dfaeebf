#pragma once

#include "hjblab/coeffs.hpp"
#include "hjblab/grid.hpp"
#include "hjblab/matrixdom.hpp"
#include "hjblab/pdesolve.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace hjblab::stochsim {

struct SimConfig {
  std::size_t n_paths = 10000;
  double dt = 1e-3;
  double T = 1.0;              // horizon; a multiple of dt
  std::uint64_t seed = 0;
  bool antithetic = false;     // paths 2k and 2k+1 share normals up to sign
  double eps_psd = 1e-12;      // scale-relative eigenvalue clip (matrix case)
  double clip_warn = 1e-3;     // clip-event rate above which a warning is raised
  std::size_t ess_floor = 100;
  double pde_floor = 1e-9;     // absolute accuracy of PDE-derived h in one-sided checks
  int threads = 1;
  std::vector<double> save_times;  // multiples of dt in [0, T]; 0 and T always saved
};

/// Throws Error(Validation) naming the offending field.
void validate(const SimConfig& cfg);

/// Seed of the stream for a path: a function of (base seed, stream index) only.
std::uint64_t path_seed(std::uint64_t base, std::uint64_t index);

/// Multilinear interpolation weights of a point in a grid cell. Cells that
/// touch a masked node collapse onto the nearest active node.
struct CellWeights {
  std::array<std::size_t, 8> node{};
  std::array<double, 8> w{};
  int count = 0;
};
CellWeights locate(const Grid& grid, const double* x);

inline double interpolate(const CellWeights& c, const double* values, int stride = 1, int offset = 0) {
  double s = 0.0;
  for (int k = 0; k < c.count; ++k) s += c.w[k] * values[c.node[k] * stride + offset];
  return s;
}

enum class ExitKind : std::uint8_t { None, LeftBox, LeftCone, NonFinite };
std::string to_string(ExitKind k);

/// drift = B + Abar grad(phi) at the grid nodes, interpolated multilinearly
/// between them; the diffusion factor sqrt(A) is cached on the same nodes.
/// Time-dependent tilts hold one drift slice per simulation step.
class TiltedDrift {
 public:
  static TiltedDrift from_values(const coeffs::CoefficientField& field, GridPtr grid,
                                 const std::vector<double>& phi);
  static TiltedDrift from_function(const coeffs::CoefficientField& field, GridPtr grid,
                                   const coeffs::SmoothFunction& phi);
  /// phi(s) = v(T - s) for s = k dt, k = 0..t/dt, from stored slices.
  static TiltedDrift from_history(const coeffs::CoefficientField& field,
                                  const pdesolve::History& history, double T, double t, double dt);

  const Grid& grid() const { return *grid_; }
  GridPtr grid_ptr() const { return grid_; }
  int dim() const { return grid_->dim(); }
  std::size_t slices() const { return drift_.size(); }
  bool inside(const double* x) const { return classify(x) == ExitKind::None; }
  /// None inside the box and the domain, otherwise the reason for leaving.
  ExitKind classify(const double* x) const;

  /// Drift and diffusion factor (row-major d x d) at the located point.
  void eval(std::size_t slice, const CellWeights& c, double* drift, double* a) const;
  Vec drift(const Vec& x, std::size_t slice = 0) const;

 private:
  TiltedDrift() = default;
  void cache_diffusion(const coeffs::CoefficientField& field);

  GridPtr grid_;
  std::vector<std::vector<double>> drift_;
  std::vector<double> sqrtA_;
  std::function<bool(const Vec&)> member_;
};

/// Called for every path at s = 0 and after each step with the current
/// (possibly frozen) state. Calls for different paths may run concurrently.
using PathVisitor = std::function<void(std::size_t path, std::size_t step, double s,
                                       const double* x, bool frozen)>;

struct PathBundle {
  int dim = 0;         // state length (d, or d*d column-stacked in the matrix case)
  int matrix_dim = 0;  // 0 for R^d paths
  std::vector<double> save_times;
  std::vector<std::vector<double>> states;  // [path][save * dim + i]
  std::vector<std::uint64_t> seeds;
  std::vector<ExitKind> exit;
  std::vector<double> exit_time;  // NaN when still inside
  std::size_t steps = 0;          // per path
  std::size_t clip_events = 0;    // steps with an eigenvalue clip, over all paths
  std::vector<std::string> warnings;

  std::size_t n_paths() const { return states.size(); }
  double exit_fraction() const;
  double clip_fraction() const;
  /// State of a path at a save time.
  std::span<const double> state(std::size_t path, std::size_t save) const;
  std::size_t save_index(double t) const;  // throws Error(MissingSlice)
};

/// Euler-Maruyama under the tilted drift. Paths that leave the box or the
/// domain are frozen at their last interior state and flagged. Throws
/// Error(EmptyEstimate) when every path exits.
PathBundle simulate_tilted(const TiltedDrift& drift, const Vec& x0, const SimConfig& cfg,
                           const PathVisitor& visit = {});

/// Euler-Maruyama on the matrix entries with sqrt(X) by eigendecomposition,
/// eigenvalues clipped at eps_psd * max(1, lambda_max) after each step.
PathBundle simulate_wishart(const matrixdom::WishartParams& p, const matrixdom::SpdPoint& x0,
                            const SimConfig& cfg, const PathVisitor& visit = {});

// Estimates -------------------------------------------------------------------

struct MCEstimate {
  std::string tag;
  double mean = 0.0;
  double se = 0.0;
  std::size_t n_effective = 0;
  // Same estimate over paths that never exited.
  double mean_excl = 0.0;
  double se_excl = 0.0;
  std::size_t n_excl = 0;
  double exit_fraction = 0.0;
};

/// Sample mean and sd / sqrt(n). With antithetic pairing the unit is the
/// pair average. Sums are pairwise in path order.
MCEstimate estimate(std::string tag, std::span<const double> values,
                    std::span<const ExitKind> exit, bool antithetic);

/// Time average of f(state) over [t_from, T] per path, sampled every step.
MCEstimate time_average(const TiltedDrift& drift, const Vec& x0, const SimConfig& cfg,
                        double t_from, const std::function<double(const double*)>& f,
                        std::string tag);
MCEstimate wishart_time_average(const matrixdom::WishartParams& p, const matrixdom::SpdPoint& x0,
                                const SimConfig& cfg, double t_from,
                                const std::function<double(const Mat&)>& f, std::string tag,
                                double* clip_fraction = nullptr);

struct Histogram {
  double lo = 0.0, hi = 0.0;
  std::vector<double> density;
  /// L1 distance to a density, by the midpoint rule on the bins.
  double l1_distance(const std::function<double(double)>& pdf) const;
};

/// Occupation histogram of the first coordinate over [t_from, T].
Histogram occupation_histogram(const TiltedDrift& drift, const Vec& x0, const SimConfig& cfg,
                               double t_from, double lo, double hi, int bins);

// Functionals against the PDE stack -------------------------------------------

/// h(T - s) and grad h(T - s) at s = k dt, k = 0..t/dt. Throws Error(MissingSlice).
struct HSlices {
  GridPtr grid;
  std::vector<std::vector<double>> h;
  std::vector<std::vector<double>> grad;
};
HSlices h_slices(const pdesolve::History& history, const pdesolve::ErgodicPair& pair, double T,
                 double t, double dt);

struct Functionals {
  MCEstimate f_est;       // 1/2 int_0^t grad h' Abar grad h (T - s, X_s) ds
  MCEstimate supdev_est;  // sup_s |h(T, x0) - h(T - s, X_s)|
  // Identity: f = h(T, x0) - E h(T - t, X_t).
  double h_T_x0 = 0.0;
  MCEstimate end_h;       // h(T - t, X_t)
  double identity_rhs = 0.0;
  double identity_se = 0.0;  // of the pathwise difference f_i + h_i(T - t) - h(T, x0)
  double z_score = 0.0;       // max(0, |mean difference| - pde_floor) / identity_se
  // (1/kappa_lo) log E exp(kappa_lo h(T - t, X_t)) <= h(T, x0) + 3 se + pde_floor.
  double exp_bound_lhs = 0.0;
  double exp_bound_se = 0.0;
  bool exp_bound_holds = false;
  // BSDE residuals.
  MCEstimate z_energy;  // int |a' grad h|^2 ds
  MCEstimate y_supdev;
  double route_gap = 0.0;  // max over paths of |int |a' grad h|^2 - int grad h' A grad h|
  bool routes_agree = false;
  double exit_fraction = 0.0;
};

/// Paths under the vhat tilt started at x0 over [0, t]; cfg.T is replaced by t.
Functionals mc_functionals(const coeffs::CoefficientField& field, const pdesolve::History& history,
                           const pdesolve::ErgodicPair& pair, double t, double T, const Vec& x0,
                           const SimConfig& cfg);

struct ConvergenceFunctionals {
  MCEstimate f_est, supdev_est;
};
ConvergenceFunctionals mc_convergence_functionals(const coeffs::CoefficientField& field,
                                                  const pdesolve::History& history,
                                                  const pdesolve::ErgodicPair& pair, double t,
                                                  double T, const Vec& x0, const SimConfig& cfg);

struct IdentityCheck {
  MCEstimate lhs;
  double rhs = 0.0;
  double z_score = 0.0;
  double exp_bound_lhs = 0.0, exp_bound_rhs = 0.0;
  bool exp_bound_holds = false;
};
IdentityCheck mc_identity_check(const coeffs::CoefficientField& field,
                                const pdesolve::History& history, const pdesolve::ErgodicPair& pair,
                                double t, double T, const Vec& x0, const SimConfig& cfg);

struct BsdeResiduals {
  MCEstimate z_energy, y_supdev;
  double route_gap = 0.0;
  bool routes_agree = false;
};
BsdeResiduals bsde_residuals(const coeffs::CoefficientField& field, const pdesolve::History& history,
                             const pdesolve::ErgodicPair& pair, double t, double T, const Vec& x0,
                             const SimConfig& cfg);

struct SandwichResult {
  MCEstimate psi;
  double ess = 0.0;  // (sum w)^2 / sum w^2 of the exponential weights
  bool ess_ok = false;
  std::vector<std::string> warnings;
};

/// psi(t, x0; zeta) = phi0(x0) + (1/zeta) log E[exp(zeta (v0 - phi0)(X_t)
///   + zeta int_0^t F[phi0](X_s) ds)] under the phi0 tilt, with max-shift.
/// cfg.T is replaced by t.
SandwichResult mc_sandwich(const coeffs::CoefficientField& field, GridPtr grid,
                           const coeffs::SmoothFunction& phi0,
                           const std::function<double(const Vec&)>& v0, double zeta, double t,
                           const Vec& x0, const SimConfig& cfg);

}  // namespace hjblab::stochsim
