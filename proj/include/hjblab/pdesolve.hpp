#pragma once

#include "hjblab/coeffs.hpp"
#include "hjblab/grid.hpp"

#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hjblab::pdesolve {

enum class Scheme { Explicit, Imex };
std::string to_string(Scheme s);
Scheme scheme_from_string(const std::string& s);

/// Which right-hand side the stepper advances.
///   Nonlinear: F[v].
///   Linear:    1/2 A:D^2 w + B' grad w + kappa V w (the Cole-Hopf image).
enum class Equation { Nonlinear, Linear };

struct SolverConfig {
  Scheme scheme = Scheme::Explicit;
  double cfl = 0.4;
  int cfl_refresh = 16;      // steps between stability-bound recomputations
  double dt_max = 1e-2;      // upper cap on the step
  Equation equation = Equation::Nonlinear;
  double kappa = 1.0;        // Linear only
};

struct SolutionField {
  GridPtr grid;
  double t = 0.0;
  std::vector<double> values;
  double dt = 0.0;  // last step taken
  std::size_t steps = 0;
  Scheme scheme = Scheme::Explicit;
};

/// Owns the coefficient cache, the neighbor tables and (for IMEX) the
/// factorizations of the implicit operator.
class Stepper {
 public:
  Stepper(const coeffs::CoefficientField& field, GridPtr grid, SolverConfig cfg);
  ~Stepper();
  Stepper(const Stepper&) = delete;
  Stepper& operator=(const Stepper&) = delete;

  const Grid& grid() const { return *grid_; }
  const SolverConfig& config() const { return cfg_; }
  const coeffs::CoefficientCache& cache() const { return cache_; }

  /// Largest admissible step for the current state:
  /// explicit: CFL min_i h_i^2 / max_x (Tr A + h_i (|B| + kappa_hi |A grad v|));
  /// IMEX: CFL min_i h_i / max_x |Abar grad v| (the explicit quadratic part).
  double stable_dt(const std::vector<double>& v) const;

  /// One step. Throws Error(StepSize) when an explicit step exceeds the bound
  /// (checked against the state at entry), Error(BlowUp) on a non-finite update.
  void step(SolutionField& s, double dt);
  /// Same step validated against a previously computed bound; the Cauchy
  /// controller refreshes that bound every cfl_refresh steps.
  void advance(SolutionField& s, double dt, double bound);

  /// Right-hand side at every node (0 at masked and extrapolated face nodes).
  std::vector<double> rhs(const std::vector<double>& v) const;
  /// F[v] at every stepped node, using the grid stencils; NaN elsewhere.
  std::vector<double> operator_values(const std::vector<double>& v) const;

  /// Nodes advanced by the stencil (interior plus unreachable boundary).
  const std::vector<std::size_t>& stepped_nodes() const { return stepped_; }

 private:
  struct Factor;
  double node_rhs(const std::vector<double>& v, std::size_t k) const;
  Factor& factor_for(double dt);

  GridPtr grid_;
  SolverConfig cfg_;
  coeffs::CoefficientCache cache_;
  double kappa_hi_;
  std::vector<std::size_t> stepped_;
  std::vector<char> is_interior_;
  // Per stepped node: neighbor table for interior central stencils.
  std::vector<std::array<std::size_t, 2 * kMaxGridDim>> axis_nb_;
  std::vector<std::array<std::size_t, 12>> cross_nb_;
  std::vector<std::unique_ptr<Factor>> factors_;
};

/// One-shot step: builds a stepper for the field and grid.
SolutionField step_cauchy(const SolutionField& s, const coeffs::CoefficientField& field,
                          double dt, const SolverConfig& cfg = {});

/// Saved time slices of a run.
struct History {
  GridPtr grid;
  std::vector<double> times;
  std::vector<std::vector<double>> slices;

  /// Slice at time t (within 1e-9 relative); throws Error(MissingSlice).
  const std::vector<double>& at(double t) const;
  bool has(double t) const;
};

struct CauchyOptions {
  SolverConfig solver;
  std::vector<double> save_times;  // ascending, within (0, T]
  bool save_initial = true;
};

struct CauchyRun {
  SolutionField final;
  History history;
  std::size_t cfl_refreshes = 0;
};

/// Steps from s.t to T, landing exactly on every save time. IMEX steps are
/// dt_max / 2^k so the factorization cache is reused.
CauchyRun solve_cauchy(Stepper& stepper, SolutionField s, double T, const CauchyOptions& opt);
CauchyRun solve_cauchy(const coeffs::CoefficientField& field, GridPtr grid,
                       std::vector<double> v0, double T, const CauchyOptions& opt);

/// Evenly spaced save times k * step in (t0, t1].
std::vector<double> save_grid(double t0, double t1, double step);

// Ergodic pair ---------------------------------------------------------------

enum class ErgodicMethod { Normalization, Eigen };
std::string to_string(ErgodicMethod m);

struct ErgodicPair {
  GridPtr grid;
  std::vector<double> vhat;
  double lambdahat = 0.0;
  std::size_t anchor = 0;
  ErgodicMethod method = ErgodicMethod::Normalization;
  double residual = 0.0;             // max interior |F[vhat] - lambdahat|
  double truncation_estimate = 0.0;  // Richardson estimate of the stencil error at vhat
  std::vector<double> lambda_trace;  // normalization probes or eigen iterates
  double T = 0.0;                    // normalization: time reached
  int iterations = 0;
};

struct NormalizationOptions {
  SolverConfig solver;
  double probe_interval = 0.25;
  double tol = 1e-10;       // |lambda(T) - lambda(T - probe)|
  double tol_v = 1e-9;      // sup |v(T) - v(T - probe) - lambda probe|
  double T_max = 60.0;
};

/// Anchor default: node nearest the origin (R^d) or the given star center.
std::size_t default_anchor(const Grid& grid, const std::optional<Vec>& center = std::nullopt);

/// Throws Error(NonConvergence) with the lambda trace when T_max is reached.
ErgodicPair solve_ergodic_normalization(const coeffs::CoefficientField& field, GridPtr grid,
                                        std::vector<double> v0, std::size_t anchor,
                                        const NormalizationOptions& opt = {});

struct EigenOptions {
  double tol = 1e-10;
  int max_iter = 500;
};

/// Principal eigenpair of the discretized 1/2 A:D^2 + B' grad + kappa V with
/// reflecting faces. Throws Error(EigenFailure) when the iterate loses positivity.
ErgodicPair solve_ergodic_eigen(const coeffs::CoefficientField& field, GridPtr grid,
                                double kappa, std::size_t anchor, const EigenOptions& opt = {});

/// Residual max over interior nodes of |F_h[vhat] - lambdahat|.
double ergodic_residual(const coeffs::CoefficientField& field, const Grid& grid,
                        const std::vector<double>& vhat, double lambdahat);
/// (F_{2h} - F_h)/3 on the nodes shared with the coarse grid, max-norm.
double truncation_estimate(const coeffs::CoefficientField& field, const Grid& grid,
                           const std::vector<double>& vhat);

// Difference function ----------------------------------------------------------

struct HField {
  GridPtr grid;
  double t = 0.0;
  std::vector<double> h;
  std::vector<double> grad;  // node * dim + axis
  double C_est = 0.0;        // h(t, x0)
};

/// Throws Error(GridMismatch) when the layouts differ.
HField compute_h(const SolutionField& sol, const ErgodicPair& pair);
HField compute_h(const Grid& grid, double t, const std::vector<double>& v,
                 const ErgodicPair& pair);

struct ConvergenceReport {
  std::vector<double> times;
  std::vector<double> h_increment;  // sup_inner |h(t_{k+1}) - h(t_k)|
  std::vector<double> grad_sup;     // sup_inner |grad h(t_k)|
  std::vector<double> C_trace;
  bool h_monotone = false;
  bool grad_monotone = false;
  bool finite = true;
  bool grad_within_tol = false;  // last grad_sup <= grad_tol
  bool pass = false;
  std::vector<std::string> flags;
};

/// Needs at least 3 fields on a common grid; inner(x) selects the region.
/// A sequence counts as decreasing when each entry is below its predecessor
/// or at most noise_floor.
ConvergenceReport pointwise_convergence_report(const std::vector<HField>& hfields,
                                               const std::function<bool(const Vec&)>& inner,
                                               double grad_tol = 1e-3, double noise_floor = 1e-10);

// Boundary influence -------------------------------------------------------

using FieldFactory =
    std::function<coeffs::CoefficientField(const std::vector<double>& lo, const std::vector<double>& hi)>;

struct BoundaryInfluence {
  double lambda_diff = 0.0;  // |lambda(box) - lambda(doubled box)|
  double vhat_diff = 0.0;    // sup over the inner half of the base box
  std::vector<double> doubled_lo, doubled_hi;
};

/// Re-solves on the box doubled about its center (same spacing) with the
/// normalization method and compares on the inner half of the base box.
BoundaryInfluence boundary_influence_study(const FieldFactory& make, const Grid& base,
                                           const std::function<double(const Vec&)>& v0,
                                           const ErgodicPair& base_pair,
                                           const NormalizationOptions& opt);

/// Inner half of a grid box: |x_i - c_i| <= (hi_i - lo_i)/4.
std::function<bool(const Vec&)> inner_half(const Grid& grid);

}  // namespace hjblab::pdesolve
