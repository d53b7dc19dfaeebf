#include "hjblab/cli.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace hjblab::cli {

namespace {

using nlohmann::json;

constexpr std::string_view kLq = "lq";
constexpr std::string_view kPoly = "custom-poly";
constexpr std::string_view kWishart = "wishart-vec";

enum class Kind {
  Real,
  Positive,
  NonNegative,
  PositiveInt,
  Seed,
  Boolean,
  Choice,
  Text,
  RealList,
  IntList,
  Matrix,
  Poly,
  PolyMatrix,
  PolyVector,
  Point,
  Radius,
};

struct Key {
  std::string_view section;
  std::string_view name;
  Kind kind;
  std::optional<std::string_view> fallback;  // nullopt: required unless optional
  bool optional = false;
  std::vector<std::string_view> families;  // empty: all families
  std::vector<std::string_view> choices;
};

const std::vector<Key>& schema() {
  static const std::vector<Key> keys = [] {
    std::vector<std::string_view> rd{kLq, kPoly};
    std::vector<std::string_view> lq{kLq};
    std::vector<std::string_view> poly{kPoly};
    std::vector<std::string_view> wv{kWishart};
    std::vector<std::string_view> boxed{kPoly, kWishart};
    std::vector<std::string_view> pipes;
    static const auto names = pipeline_names();
    for (const auto& n : names) pipes.push_back(n);
    return std::vector<Key>{
        {"", "pipeline", Kind::Choice, std::nullopt, true, {}, pipes},

        {"model", "family", Kind::Choice, std::nullopt, false, {}, {kLq, kPoly, kWishart}},
        {"model", "dim", Kind::PositiveInt, "1", false, lq, {}},
        {"model", "dim", Kind::PositiveInt, std::nullopt, false, poly, {}},
        {"model", "a0", Kind::Positive, "1", false, lq, {}},
        {"model", "kappa", Kind::Positive, "1", false, {kLq, kWishart}, {}},
        {"model", "beta", Kind::Real, "1", false, lq, {}},
        {"model", "gamma", Kind::Real, "1.5", false, lq, {}},
        {"model", "v0", Kind::Real, "0", false, lq, {}},
        {"model", "half_width", Kind::Positive, "6", false, lq, {}},
        {"model", "A", Kind::PolyMatrix, std::nullopt, false, poly, {}},
        {"model", "Abar", Kind::PolyMatrix, std::nullopt, false, poly, {}},
        {"model", "B", Kind::PolyVector, std::nullopt, false, poly, {}},
        {"model", "V", Kind::Poly, std::nullopt, false, poly, {}},
        {"model", "V", Kind::Poly, "0", false, wv, {}},
        {"model", "samples_per_axis", Kind::PositiveInt, "21", false, poly, {}},
        {"model", "L", Kind::Matrix, std::nullopt, false, wv, {}},
        {"model", "K", Kind::Matrix, std::nullopt, false, wv, {}},
        {"model", "Lambda", Kind::Matrix, std::nullopt, false, wv, {}},
        {"model", "lo", Kind::RealList, std::nullopt, false, boxed, {}},
        {"model", "hi", Kind::RealList, std::nullopt, false, boxed, {}},

        {"growth", "alpha1", Kind::Positive, std::nullopt, false, {}, {}},
        {"growth", "beta1", Kind::Real, std::nullopt, false, {}, {}},
        {"growth", "gamma1", Kind::Real, std::nullopt, false, {}, {}},
        {"growth", "gamma2", Kind::Real, std::nullopt, false, {}, {}},
        {"growth", "C1", Kind::NonNegative, "0", false, {}, {}},
        {"growth", "C2", Kind::NonNegative, "0", false, {}, {}},
        {"growth", "C3", Kind::NonNegative, std::nullopt, true, {}, {}},
        {"growth", "alpha2", Kind::Positive, std::nullopt, true, rd, {}},
        {"growth", "alpha3", Kind::Positive, std::nullopt, true, wv, {}},
        {"growth", "n0", Kind::Positive, "1", false, wv, {}},
        {"growth", "eps", Kind::Positive, "1", false, wv, {}},
        {"growth", "c0", Kind::Positive, "1", false, wv, {}},
        {"growth", "c1", Kind::Positive, "1", false, wv, {}},

        {"grid", "nodes", Kind::IntList, std::nullopt, false, {}, {}},
        {"grid", "lo", Kind::RealList, std::nullopt, true, {}, {}},
        {"grid", "hi", Kind::RealList, std::nullopt, true, {}, {}},

        {"solver", "scheme", Kind::Choice, "explicit", false, {}, {"explicit", "imex"}},
        {"solver", "cfl", Kind::Positive, "0.4", false, {}, {}},
        {"solver", "cfl_refresh", Kind::PositiveInt, "16", false, {}, {}},
        {"solver", "dt", Kind::Positive, "0.01", false, {}, {}},
        {"solver", "T", Kind::Positive, "5", false, {}, {}},
        {"solver", "save_every", Kind::Positive, "0.5", false, {}, {}},
        {"solver", "v0", Kind::Poly, "0", false, {}, {}},
        {"solver", "ergodic_method", Kind::Choice, "both", false, {}, {"normalization", "eigen", "both"}},
        {"solver", "tol", Kind::Positive, "1e-10", false, {}, {}},
        {"solver", "tol_v", Kind::Positive, "1e-9", false, {}, {}},
        {"solver", "probe_interval", Kind::Positive, "0.25", false, {}, {}},
        {"solver", "T_max", Kind::Positive, "60", false, {}, {}},
        {"solver", "eigen_tol", Kind::Positive, "1e-10", false, {}, {}},
        {"solver", "eigen_max_iter", Kind::PositiveInt, "500", false, {}, {}},
        {"solver", "anchor", Kind::Point, "origin", false, rd, {}},
        {"solver", "anchor", Kind::Point, "identity", false, wv, {}},
        {"solver", "convergence_times", Kind::RealList, "5, 10, 20", false, {}, {}},
        {"solver", "inner_radius", Kind::Radius, "inner-half", false, {}, {}},
        {"solver", "grad_tol", Kind::Positive, "0.001", false, {}, {}},
        {"solver", "noise_floor", Kind::Positive, "1e-09", false, {}, {}},
        {"solver", "lambda_tol", Kind::Positive, "0.001", false, {}, {}},
        {"solver", "riccati_tol", Kind::Positive, "0.001", false, lq, {}},
        {"solver", "riccati_radius", Kind::Positive, "3", false, lq, {}},
        {"solver", "cole_hopf_tol", Kind::Positive, "0.0001", false, {}, {}},
        {"solver", "cole_hopf_dt", Kind::Positive, std::nullopt, true, {}, {}},
        {"solver", "cole_hopf_T", Kind::Positive, std::nullopt, true, {}, {}},
        {"solver", "comparison_tol", Kind::Positive, "1e-08", false, {}, {}},
        {"solver", "boundary_study", Kind::Boolean, "false", false, {}, {}},

        {"simulation", "n_paths", Kind::PositiveInt, "10000", false, {}, {}},
        {"simulation", "dt", Kind::Positive, "0.001", false, {}, {}},
        {"simulation", "T", Kind::Positive, "1", false, {}, {}},
        {"simulation", "seed", Kind::Seed, "0", false, {}, {}},
        {"simulation", "antithetic", Kind::Boolean, "false", false, {}, {}},
        {"simulation", "eps_psd", Kind::NonNegative, "1e-12", false, {}, {}},
        {"simulation", "clip_warn", Kind::Positive, "0.001", false, {}, {}},
        {"simulation", "ess_floor", Kind::PositiveInt, "100", false, {}, {}},
        {"simulation", "pde_floor", Kind::NonNegative, "1e-09", false, {}, {}},
        {"simulation", "x0", Kind::Point, "origin", false, rd, {}},
        {"simulation", "x0", Kind::Point, "identity", false, wv, {}},
        {"simulation", "t", Kind::Positive, "1", false, {}, {}},
        {"simulation", "horizons", Kind::RealList, "2, 16", false, {}, {}},
        {"simulation", "burn_in", Kind::NonNegative, std::nullopt, true, {}, {}},
        {"simulation", "z_max", Kind::Positive, "3", false, {}, {}},
        {"simulation", "decay_factor", Kind::Positive, "10", false, {}, {}},
        {"simulation", "se_multiple", Kind::Positive, "3", false, {}, {}},

        {"output", "dir", Kind::Text, std::nullopt, true, {}, {}},
    };
  }();
  return keys;
}

bool applies(const Key& k, const std::string& family) {
  return k.families.empty() ||
         std::find(k.families.begin(), k.families.end(), family) != k.families.end();
}

std::string path_of(std::string_view section, std::string_view name) {
  return section.empty() ? std::string(name) : std::string(section) + "." + std::string(name);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::optional<double> to_real(const std::string& s) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  if (!s.empty() && *b == '+') ++b;
  const auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<long long> to_int(const std::string& s) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<std::uint64_t> to_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<std::vector<double>> to_reals(const std::string& s) {
  std::vector<double> out;
  for (const auto& part : split(s, ',')) {
    const auto v = to_real(part);
    if (!v) return std::nullopt;
    out.push_back(*v);
  }
  return out;
}

std::optional<Mat> to_matrix(const std::string& s) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : split(s, ';')) {
    const auto v = to_reals(r);
    if (!v) return std::nullopt;
    rows.push_back(*v);
  }
  const std::size_t cols = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != cols) return std::nullopt;
  Mat m(rows.size(), cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = rows[i][j];
  return m;
}

const char* kind_hint(Kind k) {
  switch (k) {
    case Kind::Real:
    case Kind::Positive:
    case Kind::NonNegative: return "a number";
    case Kind::PositiveInt: return "a positive integer";
    case Kind::Seed: return "a non-negative integer";
    case Kind::Boolean: return "true or false";
    case Kind::RealList: return "a comma-separated list of numbers";
    case Kind::IntList: return "a comma-separated list of integers";
    case Kind::Matrix: return "a matrix with ';'-separated rows of ','-separated numbers";
    case Kind::Point: return "'origin', 'identity' or a comma-separated list of numbers";
    case Kind::Radius: return "'inner-half' or a positive number";
    default: return "a value";
  }
}

/// Syntax check of one value; fills `issues`. Polynomial kinds are checked
/// later, once the variable count is known.
void check_syntax(const Key& k, const std::string& path, const std::string& v,
                  std::vector<std::string>& issues) {
  auto bad = [&] { issues.push_back(path + ": expected " + kind_hint(k.kind) + ", got '" + v + "'"); };
  switch (k.kind) {
    case Kind::Real:
      if (!to_real(v)) bad();
      break;
    case Kind::Positive:
      if (const auto x = to_real(v); !x) bad();
      else if (!(*x > 0.0)) issues.push_back(path + " must be positive");
      break;
    case Kind::NonNegative:
      if (const auto x = to_real(v); !x) bad();
      else if (*x < 0.0) issues.push_back(path + " must be non-negative");
      break;
    case Kind::PositiveInt:
      if (const auto x = to_int(v); !x) bad();
      else if (*x <= 0) issues.push_back(path + " must be positive");
      break;
    case Kind::Seed:
      if (!to_u64(v)) bad();
      break;
    case Kind::Boolean:
      if (v != "true" && v != "false") bad();
      break;
    case Kind::Choice:
      if (std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) {
        std::string list;
        for (const auto& c : k.choices) list += (list.empty() ? "" : ", ") + std::string(c);
        issues.push_back(path + ": '" + v + "' is not one of " + list);
      }
      break;
    case Kind::Text:
      if (v.empty()) issues.push_back(path + " must not be empty");
      break;
    case Kind::RealList:
      if (!to_reals(v)) bad();
      break;
    case Kind::IntList:
      for (const auto& part : split(v, ','))
        if (const auto x = to_int(part); !x || *x <= 0) {
          bad();
          break;
        }
      break;
    case Kind::Matrix:
      if (!to_matrix(v)) bad();
      break;
    case Kind::Point:
      if (v != "origin" && v != "identity" && !to_reals(v)) bad();
      break;
    case Kind::Radius:
      if (v != "inner-half") {
        if (const auto x = to_real(v); !x) bad();
        else if (!(*x > 0.0)) issues.push_back(path + " must be positive");
      }
      break;
    case Kind::Poly:
    case Kind::PolyMatrix:
    case Kind::PolyVector:
      if (v.empty()) issues.push_back(path + " must not be empty");
      break;
  }
}

json echo_value(Kind k, const std::string& v) {
  switch (k) {
    case Kind::Real:
    case Kind::Positive:
    case Kind::NonNegative: return *to_real(v);
    case Kind::PositiveInt: return *to_int(v);
    case Kind::Seed: return *to_u64(v);
    case Kind::Boolean: return v == "true";
    case Kind::RealList: return *to_reals(v);
    case Kind::IntList: {
      json a = json::array();
      for (const auto& part : split(v, ',')) a.push_back(*to_int(part));
      return a;
    }
    case Kind::Matrix: {
      const Mat m = *to_matrix(v);
      json a = json::array();
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        a.push_back(r);
      }
      return a;
    }
    case Kind::Point:
      if (v == "origin" || v == "identity") return v;
      return *to_reals(v);
    case Kind::Radius:
      if (v == "inner-half") return v;
      return *to_real(v);
    default: return v;
  }
}

struct Resolved {
  std::string family;
  std::map<std::string, std::pair<const Key*, std::string>> values;  // path -> (key, text)

  bool has(const std::string& path) const { return values.count(path) > 0; }
  const std::string& text(const std::string& path) const { return values.at(path).second; }
  double real(const std::string& path) const { return *to_real(text(path)); }
  long long integer(const std::string& path) const { return *to_int(text(path)); }
  bool boolean(const std::string& path) const { return text(path) == "true"; }
  std::vector<double> reals(const std::string& path) const { return *to_reals(text(path)); }
  Mat matrix(const std::string& path) const { return *to_matrix(text(path)); }
  std::optional<double> maybe(const std::string& path) const {
    if (!has(path)) return std::nullopt;
    return real(path);
  }
};

std::optional<Polynomial> parse_poly(const std::string& path, const std::string& text, int nvars,
                                     std::vector<std::string>& issues) {
  try {
    return Polynomial::parse(text, nvars);
  } catch (const Error& e) {
    issues.push_back(path + ": " + e.what());
    return std::nullopt;
  }
}

std::vector<std::vector<std::string>> poly_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : split(text, ';')) rows.push_back(split(r, ','));
  return rows;
}

bool is_zero_poly(const Polynomial& p) {
  for (const auto& t : p.terms())
    if (t.coef != 0.0) return false;
  return true;
}

Vec resolve_point(const std::string& path, const std::string& text, const ModelBlock& m,
                  std::vector<std::string>& issues) {
  if (text == "origin") {
    if (m.family == kWishart) issues.push_back(path + ": the origin is not in the cone; use 'identity'");
    return Vec::Zero(m.dim);
  }
  if (text == "identity") {
    if (m.family != kWishart) {
      issues.push_back(path + ": 'identity' applies to family wishart-vec only");
      return Vec::Zero(m.dim);
    }
    return matrixdom::ell(Mat::Identity(m.wishart.L.rows(), m.wishart.L.rows()));
  }
  const auto v = *to_reals(text);
  if (static_cast<int>(v.size()) != m.dim) {
    issues.push_back(path + ": expected " + std::to_string(m.dim) + " coordinates, got " +
                     std::to_string(v.size()));
    return Vec::Zero(m.dim);
  }
  return Eigen::Map<const Vec>(v.data(), m.dim);
}

bool multiple_of(double a, double step) {
  const double r = a / step;
  return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, r);
}

void build_model(const Resolved& r, ModelBlock& m, std::vector<std::string>& issues) {
  m.family = r.family;
  if (m.family == kLq) {
    m.dim = static_cast<int>(r.integer("model.dim"));
    if (m.dim > kMaxGridDim) issues.push_back("model.dim must be at most " + std::to_string(kMaxGridDim));
    m.lq.dim = m.dim;
    m.lq.a0 = r.real("model.a0");
    m.lq.kappa = r.real("model.kappa");
    m.lq.beta = r.real("model.beta");
    m.lq.gamma = r.real("model.gamma");
    m.lq.v0 = r.real("model.v0");
    m.lq.half_width = r.real("model.half_width");
    m.lo.assign(m.dim, -m.lq.half_width);
    m.hi.assign(m.dim, m.lq.half_width);
    return;
  }
  m.lo = r.reals("model.lo");
  m.hi = r.reals("model.hi");
  if (m.family == kPoly) {
    m.dim = static_cast<int>(r.integer("model.dim"));
    if (m.dim > kMaxGridDim) issues.push_back("model.dim must be at most " + std::to_string(kMaxGridDim));
    m.samples_per_axis = static_cast<int>(r.integer("model.samples_per_axis"));
    m.poly.dim = m.dim;
    m.poly.lo = m.lo;
    m.poly.hi = m.hi;
    for (const char* name : {"A", "Abar"}) {
      const std::string path = std::string("model.") + name;
      const auto rows = poly_rows(r.text(path));
      bool square = static_cast<int>(rows.size()) == m.dim;
      for (const auto& row : rows) square = square && static_cast<int>(row.size()) == m.dim;
      if (!square) {
        issues.push_back(path + ": expected a " + std::to_string(m.dim) + " x " + std::to_string(m.dim) +
                         " matrix of polynomials");
        continue;
      }
      auto& upper = std::string(name) == "A" ? m.poly.A_upper : m.poly.Abar_upper;
      for (int i = 0; i < m.dim; ++i)
        for (int j = 0; j < m.dim; ++j) {
          const auto p = parse_poly(path, rows[i][j], m.dim, issues);
          if (p && i <= j) upper.push_back(*p);
          if (p && i > j && rows[i][j] != rows[j][i])
            issues.push_back(path + ": entries (" + std::to_string(i + 1) + ", " + std::to_string(j + 1) +
                             ") and (" + std::to_string(j + 1) + ", " + std::to_string(i + 1) + ") differ");
        }
    }
    const auto bs = split(r.text("model.B"), ',');
    if (static_cast<int>(bs.size()) != m.dim)
      issues.push_back("model.B: expected " + std::to_string(m.dim) + " polynomials");
    else
      for (const auto& b : bs)
        if (const auto p = parse_poly("model.B", b, m.dim, issues)) m.poly.B.push_back(*p);
    if (const auto p = parse_poly("model.V", r.text("model.V"), m.dim, issues)) m.poly.V = *p;
  } else {
    m.wishart.L = r.matrix("model.L");
    m.wishart.K = r.matrix("model.K");
    m.wishart.Lambda = r.matrix("model.Lambda");
    m.kappa = r.real("model.kappa");
    try {
      matrixdom::validate_wishart(m.wishart);
    } catch (const Error& e) {
      issues.push_back(std::string("model: ") + e.what());
      return;
    }
    const int d = static_cast<int>(m.wishart.L.rows());
    m.dim = d * (d + 1) / 2;
    if (m.dim > kMaxGridDim) issues.push_back("model: wishart-vec supports d <= 2");
    if (const auto p = parse_poly("model.V", r.text("model.V"), m.dim, issues)) m.V = *p;
  }
  if (static_cast<int>(m.lo.size()) != m.dim || static_cast<int>(m.hi.size()) != m.dim)
    issues.push_back("model.lo, model.hi: expected " + std::to_string(m.dim) + " bounds each");
  else
    for (int i = 0; i < m.dim; ++i)
      if (!(m.lo[i] < m.hi[i])) issues.push_back("model.lo must be below model.hi on every axis");
}

}  // namespace

std::string to_string(Pipeline p) {
  switch (p) {
    case Pipeline::CheckAssumptions: return "check-assumptions";
    case Pipeline::SolveCauchy: return "solve-cauchy";
    case Pipeline::SolveErgodic: return "solve-ergodic";
    case Pipeline::ConvergePde: return "converge-pde";
    case Pipeline::ConvergeMc: return "converge-mc";
    case Pipeline::Sandwich: return "sandwich";
    case Pipeline::Simulate: return "simulate";
    case Pipeline::FullBattery: return "full-battery";
  }
  return "unknown";
}

std::vector<std::string> pipeline_names() {
  return {"check-assumptions", "solve-cauchy", "solve-ergodic", "converge-pde",
          "converge-mc",       "sandwich",     "simulate",      "full-battery"};
}

std::optional<Pipeline> pipeline_from_string(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(Pipeline::FullBattery); ++i)
    if (to_string(static_cast<Pipeline>(i)) == s) return static_cast<Pipeline>(i);
  return std::nullopt;
}

ConfigError::ConfigError(std::vector<std::string> issues)
    : Error(ErrorKind::Validation,
            [&] {
              std::string s;
              for (const auto& i : issues) s += (s.empty() ? "" : "; ") + i;
              return s;
            }()),
      issues_(std::move(issues)) {}

std::vector<std::string> required_blocks(Pipeline p, const std::string& family) {
  std::vector<std::string> out{"model"};
  if (p != Pipeline::CheckAssumptions) {
    out.push_back("grid");
    out.push_back("solver");
  }
  if (p == Pipeline::ConvergeMc || p == Pipeline::Sandwich || p == Pipeline::Simulate ||
      p == Pipeline::FullBattery)
    out.push_back("simulation");
  const bool needs_assumptions =
      p == Pipeline::CheckAssumptions || p == Pipeline::Sandwich || p == Pipeline::FullBattery;
  if (needs_assumptions && family == kWishart) out.push_back("growth");
  return out;
}

ExperimentConfig validate(std::string_view text, const Overrides& overrides) {
  namespace pt = boost::property_tree;
  std::vector<std::string> issues;
  pt::ptree tree;
  {
    std::istringstream in{std::string(text)};
    try {
      pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
      throw ConfigError({"line " + std::to_string(e.line()) + ": " + e.message()});
    }
  }

  // Raw values by path, plus which blocks are present.
  std::map<std::string, std::string> raw;
  std::set<std::string> blocks;
  static const std::set<std::string> known_blocks{"model", "growth", "grid", "solver", "simulation", "output"};
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      raw[name] = trim(node.data());
      continue;
    }
    if (!known_blocks.count(name)) {
      issues.push_back("unknown block [" + name + "]");
      continue;
    }
    blocks.insert(name);
    for (const auto& [key, leaf] : node) raw[name + "." + key] = trim(leaf.data());
  }

  // The INI reader drops empty sections; an empty block still counts as present.
  {
    std::istringstream lines{std::string(text)};
    for (std::string line; std::getline(lines, line);) {
      const std::string t = trim(line);
      if (t.size() < 3 || t.front() != '[' || t.back() != ']') continue;
      const std::string name = trim(std::string_view(t).substr(1, t.size() - 2));
      if (!known_blocks.count(name)) {
        if (std::find(issues.begin(), issues.end(), "unknown block [" + name + "]") == issues.end())
          issues.push_back("unknown block [" + name + "]");
      } else {
        blocks.insert(name);
      }
    }
  }

  ExperimentConfig cfg;
  if (raw.count("pipeline") && !pipeline_from_string(raw["pipeline"])) {
    // Reported by the schema pass below.
  } else if (raw.count("pipeline")) {
    cfg.pipeline = *pipeline_from_string(raw["pipeline"]);
  }
  if (overrides.pipeline) {
    if (raw.count("pipeline") && pipeline_from_string(raw["pipeline"]) &&
        *pipeline_from_string(raw["pipeline"]) != *overrides.pipeline)
      issues.push_back("pipeline: config names '" + raw["pipeline"] + "' but '" +
                       to_string(*overrides.pipeline) + "' was requested");
    cfg.pipeline = *overrides.pipeline;
  } else if (!raw.count("pipeline")) {
    issues.push_back("pipeline: not given in the config or on the command line");
  }

  std::string family = raw.count("model.family") ? raw["model.family"] : "";
  for (const auto& b : required_blocks(cfg.pipeline, family))
    if (!blocks.count(b)) issues.push_back("missing required block [" + b + "]");
  if (blocks.count("model") && !raw.count("model.family")) issues.push_back("missing required key model.family");
  const bool family_known = family == kLq || family == kPoly || family == kWishart;

  Resolved r;
  r.family = family;
  // Unknown and inapplicable keys.
  for (const auto& [path, value] : raw) {
    const auto dot = path.find('.');
    const std::string section = dot == std::string::npos ? "" : path.substr(0, dot);
    const std::string name = dot == std::string::npos ? path : path.substr(dot + 1);
    const Key* match = nullptr;
    bool any = false;
    for (const auto& k : schema()) {
      if (k.section != section || k.name != name) continue;
      any = true;
      if (!family_known || applies(k, family)) {
        match = &k;
        break;
      }
    }
    if (!any) {
      issues.push_back("unknown key " + path);
      continue;
    }
    if (!match) {
      issues.push_back(path + " does not apply to family " + family);
      continue;
    }
    check_syntax(*match, path, value, issues);
    r.values[path] = {match, value};
  }
  if (!family_known) throw ConfigError(issues);

  // Defaults and required keys for present blocks.
  for (const auto& k : schema()) {
    if (k.section.empty() || !applies(k, family) || !blocks.count(std::string(k.section))) continue;
    const std::string path = path_of(k.section, k.name);
    if (r.has(path)) continue;
    if (k.fallback)
      r.values[path] = {&k, std::string(*k.fallback)};
    else if (!k.optional)
      issues.push_back("missing required key " + path);
  }
  if (!issues.empty()) throw ConfigError(issues);

  build_model(r, cfg.model, issues);
  if (!issues.empty()) throw ConfigError(issues);
  const ModelBlock& m = cfg.model;
  const int dim = m.dim;

  if (blocks.count("growth")) {
    cfg.growth.present = true;
    if (family == kWishart) {
      auto& g = cfg.growth.matrix;
      g.n0 = r.real("growth.n0");
      g.alpha1 = r.real("growth.alpha1");
      g.beta1 = r.real("growth.beta1");
      g.gamma1 = r.real("growth.gamma1");
      g.gamma2 = r.real("growth.gamma2");
      g.C1 = r.real("growth.C1");
      g.C2 = r.real("growth.C2");
      g.alpha3 = r.maybe("growth.alpha3");
      g.C3 = r.maybe("growth.C3");
      g.eps = r.real("growth.eps");
      g.c0 = r.real("growth.c0");
      g.c1 = r.real("growth.c1");
      g.kappa_lo = g.kappa_hi = m.kappa;
    } else {
      auto& g = cfg.growth.rd;
      g.alpha1 = r.real("growth.alpha1");
      g.beta1 = r.real("growth.beta1");
      g.gamma1 = r.real("growth.gamma1");
      g.gamma2 = r.real("growth.gamma2");
      g.C1 = r.real("growth.C1");
      g.C2 = r.real("growth.C2");
      g.alpha2 = r.maybe("growth.alpha2");
      g.C3 = r.maybe("growth.C3");
    }
  }

  if (blocks.count("grid")) {
    std::vector<int> nodes;
    for (const auto& part : split(r.text("grid.nodes"), ',')) nodes.push_back(static_cast<int>(*to_int(part)));
    if (nodes.size() == 1) nodes.assign(dim, nodes[0]);
    if (static_cast<int>(nodes.size()) != dim)
      issues.push_back("grid.nodes: expected 1 or " + std::to_string(dim) + " counts");
    for (int n : nodes)
      if (n < 5) {
        issues.push_back("grid.nodes must be at least 5 per axis");
        break;
      }
    cfg.grid.nodes = nodes;
    cfg.grid.lo = r.has("grid.lo") ? r.reals("grid.lo") : m.lo;
    cfg.grid.hi = r.has("grid.hi") ? r.reals("grid.hi") : m.hi;
    r.values["grid.lo"].second.clear();
    r.values["grid.hi"].second.clear();
    if (static_cast<int>(cfg.grid.lo.size()) != dim || static_cast<int>(cfg.grid.hi.size()) != dim)
      issues.push_back("grid.lo, grid.hi: expected " + std::to_string(dim) + " bounds each");
    else
      for (int i = 0; i < dim; ++i)
        if (!(cfg.grid.lo[i] < cfg.grid.hi[i])) issues.push_back("grid.lo must be below grid.hi on every axis");
  }

  if (blocks.count("solver")) {
    auto& s = cfg.solver;
    s.scheme = pdesolve::scheme_from_string(r.text("solver.scheme"));
    s.cfl = r.real("solver.cfl");
    if (s.cfl > 1.0) issues.push_back("solver.cfl must be at most 1");
    s.cfl_refresh = static_cast<int>(r.integer("solver.cfl_refresh"));
    s.dt = r.real("solver.dt");
    s.T = r.real("solver.T");
    s.save_every = r.real("solver.save_every");
    if (const auto p = parse_poly("solver.v0", r.text("solver.v0"), dim, issues)) {
      s.v0 = *p;
      s.v0_zero = is_zero_poly(*p);
    }
    s.ergodic_method = r.text("solver.ergodic_method");
    s.tol = r.real("solver.tol");
    s.tol_v = r.real("solver.tol_v");
    s.probe_interval = r.real("solver.probe_interval");
    s.T_max = r.real("solver.T_max");
    s.eigen_tol = r.real("solver.eigen_tol");
    s.eigen_max_iter = static_cast<int>(r.integer("solver.eigen_max_iter"));
    s.anchor = resolve_point("solver.anchor", r.text("solver.anchor"), m, issues);
    s.convergence_times = r.reals("solver.convergence_times");
    if (s.convergence_times.size() < 3) issues.push_back("solver.convergence_times needs at least 3 times");
    for (std::size_t i = 0; i < s.convergence_times.size(); ++i)
      if (!(s.convergence_times[i] > (i ? s.convergence_times[i - 1] : 0.0))) {
        issues.push_back("solver.convergence_times must be positive and increasing");
        break;
      }
    if (r.text("solver.inner_radius") != "inner-half") s.inner_radius = r.real("solver.inner_radius");
    s.grad_tol = r.real("solver.grad_tol");
    s.noise_floor = r.real("solver.noise_floor");
    s.lambda_tol = r.real("solver.lambda_tol");
    if (family == kLq) {
      s.riccati_tol = r.real("solver.riccati_tol");
      s.riccati_radius = r.real("solver.riccati_radius");
    }
    s.cole_hopf_tol = r.real("solver.cole_hopf_tol");
    for (const auto& [key, slot, fallback] :
         {std::tuple{"solver.cole_hopf_dt", &s.cole_hopf_dt, s.dt}, std::tuple{"solver.cole_hopf_T", &s.cole_hopf_T, s.T}}) {
      *slot = r.has(key) ? r.real(key) : fallback;
      if (!r.has(key)) {
        std::ostringstream o;
        o.precision(17);
        o << *slot;
        r.values[key] = {nullptr, o.str()};
      }
    }
    s.comparison_tol = r.real("solver.comparison_tol");
    s.boundary_study = r.boolean("solver.boundary_study");
  }

  if (blocks.count("simulation")) {
    auto& b = cfg.simulation;
    auto& c = b.sim;
    c.n_paths = static_cast<std::size_t>(r.integer("simulation.n_paths"));
    c.dt = r.real("simulation.dt");
    c.T = r.real("simulation.T");
    c.seed = *to_u64(r.text("simulation.seed"));
    if (overrides.seed) {
      c.seed = *overrides.seed;
      r.values["simulation.seed"].second = std::to_string(c.seed);
    }
    c.antithetic = r.boolean("simulation.antithetic");
    c.eps_psd = r.real("simulation.eps_psd");
    c.clip_warn = r.real("simulation.clip_warn");
    c.ess_floor = static_cast<std::size_t>(r.integer("simulation.ess_floor"));
    c.pde_floor = r.real("simulation.pde_floor");
    b.x0 = resolve_point("simulation.x0", r.text("simulation.x0"), m, issues);
    b.t = r.real("simulation.t");
    b.horizons = r.reals("simulation.horizons");
    for (std::size_t i = 0; i < b.horizons.size(); ++i)
      if (!(b.horizons[i] >= b.t) || (i && !(b.horizons[i] > b.horizons[i - 1]))) {
        issues.push_back("simulation.horizons must be increasing and at least simulation.t");
        break;
      }
    b.burn_in = r.has("simulation.burn_in") ? r.real("simulation.burn_in") : 0.1 * c.T;
    if (!r.has("simulation.burn_in")) {
      std::ostringstream o;
      o.precision(17);
      o << b.burn_in;
      r.values["simulation.burn_in"] = {nullptr, o.str()};
    }
    if (b.burn_in >= c.T) issues.push_back("simulation.burn_in must be below simulation.T");
    b.z_max = r.real("simulation.z_max");
    b.decay_factor = r.real("simulation.decay_factor");
    b.se_multiple = r.real("simulation.se_multiple");
    if (c.antithetic && c.n_paths % 2) issues.push_back("simulation.n_paths must be even with antithetic pairing");
    if (!multiple_of(c.T, c.dt)) issues.push_back("simulation.T must be a multiple of simulation.dt");
    if (!multiple_of(b.t, c.dt)) issues.push_back("simulation.t must be a multiple of simulation.dt");
    try {
      stochsim::validate(c);
    } catch (const Error& e) {
      issues.push_back(std::string("simulation: ") + e.what());
    }
  }

  if (r.has("output.dir")) cfg.out_dir = r.text("output.dir");
  if (!issues.empty()) throw ConfigError(issues);

  // Echo with materialized defaults.
  json echo = json::object();
  echo["pipeline"] = to_string(cfg.pipeline);
  for (const auto& [path, kv] : r.values) {
    if (path == "pipeline") continue;
    const auto dot = path.find('.');
    const std::string section = path.substr(0, dot), name = path.substr(dot + 1);
    const Key* k = kv.first;
    if (path == "grid.lo" || path == "grid.hi") {
      echo[section][name] = path == "grid.lo" ? cfg.grid.lo : cfg.grid.hi;
      continue;
    }
    if (path == "solver.anchor" || path == "simulation.x0") {
      const Vec& x = path == "solver.anchor" ? cfg.solver.anchor : cfg.simulation.x0;
      echo[section][name + "_text"] = kv.second;
      echo[section][name] = std::vector<double>(x.data(), x.data() + x.size());
      continue;
    }
    echo[section][name] = k ? echo_value(k->kind, kv.second) : json(*to_real(kv.second));
  }
  cfg.echo = std::move(echo);
  return cfg;
}

}  // namespace hjblab::cli
