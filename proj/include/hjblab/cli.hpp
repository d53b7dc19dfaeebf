#pragma once

#include "hjblab/coeffs.hpp"
#include "hjblab/error.hpp"
#include "hjblab/lyapunov.hpp"
#include "hjblab/matrixdom.hpp"
#include "hjblab/pdesolve.hpp"
#include "hjblab/polynomial.hpp"
#include "hjblab/stochsim.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hjblab::cli {

inline constexpr std::string_view kSchemaVersion = "hjblab.run-report/1";

enum class Pipeline {
  CheckAssumptions,
  SolveCauchy,
  SolveErgodic,
  ConvergePde,
  ConvergeMc,
  Sandwich,
  Simulate,
  FullBattery,
};

std::string to_string(Pipeline p);
std::optional<Pipeline> pipeline_from_string(std::string_view s);
std::vector<std::string> pipeline_names();

/// Aggregated validation failure; every issue names its field path.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

struct ModelBlock {
  std::string family;  // lq | custom-poly | wishart-vec
  int dim = 1;         // state dimension (d(d+1)/2 for wishart-vec)
  coeffs::LqParams lq;
  coeffs::PolyParams poly;
  int samples_per_axis = 21;
  matrixdom::WishartParams wishart;
  double kappa = 1.0;  // wishart-vec: Abar = kappa A
  Polynomial V;        // wishart-vec potential in the vectorized coordinates
  std::vector<double> lo, hi;
};

struct GrowthBlock {
  bool present = false;
  lyapunov::RdGrowthParams rd;
  lyapunov::MatrixGrowthParams matrix;
};

struct GridBlock {
  std::vector<int> nodes;
  std::vector<double> lo, hi;  // materialized from the model box when omitted
};

struct SolverBlock {
  pdesolve::Scheme scheme = pdesolve::Scheme::Explicit;
  double cfl = 0.4;
  int cfl_refresh = 16;
  double dt = 1e-2;
  double T = 5.0;
  double save_every = 0.5;
  Polynomial v0;
  bool v0_zero = true;
  std::string ergodic_method = "both";  // normalization | eigen | both
  double tol = 1e-10;
  double tol_v = 1e-9;
  double probe_interval = 0.25;
  double T_max = 60.0;
  double eigen_tol = 1e-10;
  int eigen_max_iter = 500;
  Vec anchor;
  std::vector<double> convergence_times{5.0, 10.0, 20.0};
  std::optional<double> inner_radius;  // nullopt: inner half of the box
  double grad_tol = 1e-3;
  double noise_floor = 1e-9;
  double lambda_tol = 1e-3;
  double riccati_tol = 1e-3;
  double riccati_radius = 3.0;
  double cole_hopf_tol = 1e-4;
  double cole_hopf_dt = 1e-2;  // step and horizon of the equivalence check
  double cole_hopf_T = 5.0;
  double comparison_tol = 1e-8;
  bool boundary_study = false;
};

struct SimulationBlock {
  stochsim::SimConfig sim;
  Vec x0;
  double t = 1.0;
  std::vector<double> horizons{2.0, 16.0};
  double burn_in = 0.1;
  double z_max = 3.0;
  double decay_factor = 10.0;
  double se_multiple = 3.0;
};

struct ExperimentConfig {
  Pipeline pipeline = Pipeline::FullBattery;
  ModelBlock model;
  GrowthBlock growth;
  GridBlock grid;
  SolverBlock solver;
  SimulationBlock simulation;
  std::optional<std::string> out_dir;
  /// Every key with its default materialized, grouped by block.
  nlohmann::json echo;
};

struct Overrides {
  std::optional<Pipeline> pipeline;
  std::optional<std::uint64_t> seed;
};

/// Parses and validates config text. Throws ConfigError listing every issue.
ExperimentConfig validate(std::string_view text, const Overrides& overrides = {});

/// Blocks a pipeline needs beyond [model].
std::vector<std::string> required_blocks(Pipeline p, const std::string& family);

struct RunOptions {
  std::string out_dir;
  bool overwrite = false;
  int threads = 1;
};

struct RunResult {
  nlohmann::json report;
  int exit_code = 0;  // 0 pass, 1 verdict failure, 3 stage error
};

/// Runs the pipeline stages in dependency order and writes the artifacts and
/// report.json into opt.out_dir. Throws Error(Validation) when the directory
/// is not empty and overwriting was not requested.
RunResult run(const ExperimentConfig& cfg, const RunOptions& opt);

/// Copy of a report without wall-clock data.
nlohmann::json strip_timing(const nlohmann::json& report);

/// RFC-4180 field quoting.
std::string csv_field(std::string_view s);
std::string csv_number(double v);

}  // namespace hjblab::cli
