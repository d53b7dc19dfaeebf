#pragma once

#include "hjblab/coeffs.hpp"
#include "hjblab/matrixdom.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hjblab::lyapunov {

// Growth data ---------------------------------------------------------------

struct RdGrowthParams {
  double alpha1 = 1.0;  // x'A x <= alpha1 (1 + |x|^2)
  double beta1 = 0.0;   // B'x <= -beta1 |x|^2 + C1
  double gamma1 = 0.0;  // -gamma2 |x|^2 - C2 <= V <= -gamma1 |x|^2 + C2
  double gamma2 = 0.0;
  double C1 = 0.0;
  double C2 = 0.0;
  std::optional<double> alpha2;  // x'A x >= alpha2 |x|^2 - C3
  std::optional<double> C3;
  double kappa_lo = 1.0;
  double kappa_hi = 1.0;
  bool empirical = false;  // estimated from samples rather than supplied
};

struct MatrixGrowthParams {
  double n0 = 1.0;
  double alpha1 = 1.0;  // Tr f Tr g <= alpha1 |x|
  double beta1 = 0.0;   // Tr(B'x) <= -beta1 |x|^2 + C1
  double gamma1 = 0.0;  // -gamma2 |x| - C2 <= V <= -gamma1 |x| + C2
  double gamma2 = 0.0;
  double C1 = 0.0;
  double C2 = 0.0;
  std::optional<double> alpha3;  // Tr(f x g x) >= alpha3 |x|^3 - C3
  std::optional<double> C3;
  double eps = 1.0;
  double c0 = 1.0;
  double c1 = 1.0;
  double kappa_lo = 1.0;
  double kappa_hi = 1.0;
};

void validate(const RdGrowthParams& p);
void validate(const MatrixGrowthParams& p);

/// Envelope fits of the R^d growth inequalities over sample points; points with
/// |x| >= outer_radius determine the rates, all points the additive constants.
RdGrowthParams estimate_rd_growth(const coeffs::CoefficientField& field,
                                  const std::vector<Vec>& samples, double outer_radius);

// Case analysis -------------------------------------------------------------

enum class GrowthCase { BothPositive, MeanReversionOnly, PotentialOnly, Infeasible };
std::string to_string(GrowthCase c);

struct CaseReport {
  GrowthCase tag = GrowthCase::Infeasible;
  bool pass = false;
  std::optional<double> gate_value;  // value of the gating inequality when one applies
  std::string detail;
};

/// Throws Error(IncompleteParams) for the potential-only case without alpha2.
CaseReport check_rd_case(const RdGrowthParams& p);

// Synthesis -----------------------------------------------------------------

struct SynthesisResult {
  std::string setting;  // "rd" or "matrix"
  bool feasible = false;
  bool inconclusive = false;
  double eps0 = 0.0;
  // R^d: phi0 = c |x|^2 / 2, psi0 = -c_tilde |x|^2 / 2.
  double c = 0.0, c_tilde = 0.0;
  std::pair<double, double> c_interval{0.0, 0.0};
  std::pair<double, double> zero_roots{0.0, 0.0};
  // Matrix: phi0 = -c_lo log det + c_hi |x| eta + C, psi0 = k_lo log det - k_hi |x| eta.
  double c_lo = 0.0, c_hi = 0.0, C = 0.0, k_lo = 0.0, k_hi = 0.0, K = 0.0, n0 = 0.0;
  std::pair<double, double> c_hi_interval{0.0, 0.0};
  double delta = 0.0;
  double alpha = 0.0;
  std::map<std::string, double> slack;
  std::vector<std::string> diagnostics;
};

SynthesisResult synth_rd_lyapunov(const RdGrowthParams& p);

/// phi0, delta * phi0 and psi0 for an R^d synthesis result.
coeffs::SmoothFunction rd_phi0(int dim, const SynthesisResult& s);
coeffs::SmoothFunction rd_psi0(int dim, const SynthesisResult& s);

// Divergence trends ---------------------------------------------------------

enum class Direction { MinusInfinity, PlusInfinity };

struct TrendReport {
  Direction direction = Direction::MinusInfinity;
  std::vector<double> shell_values;  // shell max (toward -inf) or min (toward +inf)
  bool monotone = false;
  bool sign_ok = false;
  double growth = 0.0;  // |last| / |first|
  bool pass = false;
};

inline constexpr double kDefaultMargin = 10.0;

/// Trend check on precomputed shell values (one vector per shell, ordered outward).
/// Throws Error(InsufficientProbe) for fewer than 3 shells.
TrendReport verify_divergence(const std::vector<std::vector<double>>& values, Direction dir,
                              double margin = kDefaultMargin);

TrendReport verify_lyapunov_divergence(const coeffs::CoefficientField& field,
                                       const coeffs::SmoothFunction& phi,
                                       const std::vector<std::vector<Vec>>& shells, Direction dir,
                                       double margin = kDefaultMargin);

TrendReport verify_lyapunov_divergence(const matrixdom::MatrixCoefficients& c,
                                       const matrixdom::MatrixFunction& phi,
                                       const std::vector<std::vector<matrixdom::SpdPoint>>& shells,
                                       Direction dir, double margin = kDefaultMargin);

/// Points on spheres |x| = r for each radius: the 2d axis points plus, for
/// d >= 2, the 2^d diagonal directions.
std::vector<std::vector<Vec>> sphere_shells(int dim, const std::vector<double>& radii);

/// Geometric radii {R/4, R/2, R}.
std::vector<double> default_radii(double R);

// Matrix case ---------------------------------------------------------------

struct MatrixProbe {
  std::vector<std::vector<matrixdom::SpdPoint>> det_shells;   // det -> 0, ordered outward
  std::vector<std::vector<matrixdom::SpdPoint>> norm_shells;  // |x| -> inf, ordered outward
  std::vector<matrixdom::SpdPoint> compact;                   // bulk points for constants
};

/// det shells with lambda_min = 10^{-k}, k = 1..3 (other eigenvalues 1);
/// norm shells at |x| = (n0 + 2) {2, 8, 32}; a compact eigenvalue grid plus
/// radii across the cutoff band.
MatrixProbe default_matrix_probe(int d, double n0);

struct InequalityCheck {
  std::string name;
  double worst_slack = 0.0;  // min over probe of (rhs - lhs); >= 0 means satisfied
  bool pass = false;
};

/// A limit condition judged by a trend of shell minima. Lower-bound conditions
/// pass when the minima show no divergence to -inf.
struct LimitCheck {
  std::string name;
  TrendReport trend;
  bool pass = false;
};

struct MatrixAssumptionReport {
  GrowthCase tag = GrowthCase::Infeasible;
  bool pass = false;
  std::optional<double> gate_value;
  std::vector<InequalityCheck> inequalities;
  std::vector<LimitCheck> limits;
  double alpha3_empirical = 0.0;  // inf over norm shells of Tr(f x g x) / |x|^3
  std::vector<std::string> diagnostics;
};

/// Throws Error(Coverage) when the probe lacks 3 det shells or 3 norm shells.
MatrixAssumptionReport check_matrix_assumptions(const matrixdom::MatrixCoefficients& c,
                                                const MatrixGrowthParams& p,
                                                const MatrixProbe& probe,
                                                double margin = kDefaultMargin);

struct MatrixSynthOptions {
  double margin = kDefaultMargin;
  double k_hi_start = 1.0;
  double k_hi_cap = 1e6;
};

SynthesisResult synth_matrix_lyapunov(const matrixdom::MatrixCoefficients& c,
                                      const MatrixGrowthParams& p, const MatrixProbe& probe,
                                      const MatrixSynthOptions& opt = {});

matrixdom::Phi0Params matrix_phi0_params(const SynthesisResult& s);
matrixdom::Psi0Params matrix_psi0_params(const SynthesisResult& s);

/// Additive constant of the F[phi0] upper bound: the largest gap F[phi0] - shape
/// over the probe, plus one.
double calibrate_bound_constant(const matrixdom::MatrixCoefficients& c,
                                const SynthesisResult& s, const MatrixGrowthParams& p,
                                const MatrixProbe& probe);

}  // namespace hjblab::lyapunov
