#include "hjblab/lyapunov.hpp"

#include "hjblab/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace hjblab::lyapunov {

using matrixdom::MatrixCoefficients;
using matrixdom::MatrixFunction;
using matrixdom::SpdPoint;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

// Real roots of a t^2 + b t + c = 0 with a != 0, ascending.
std::optional<std::pair<double, double>> roots(double a, double b, double c) {
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return std::nullopt;
  const double s = std::sqrt(disc);
  // Avoid cancellation in the smaller-magnitude root.
  const double qq = -0.5 * (b + std::copysign(s, b));
  double r1 = qq / a;
  double r2 = qq != 0.0 ? c / qq : -b / (2.0 * a);
  if (r1 > r2) std::swap(r1, r2);
  return std::make_pair(r1, r2);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::Validation, what);
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

GrowthCase classify(double beta1, double gamma1) {
  if (std::max(beta1, gamma1) <= 0.0) return GrowthCase::Infeasible;
  if (beta1 > 0.0 && gamma1 >= 0.0) return GrowthCase::BothPositive;
  if (beta1 > 0.0) return GrowthCase::MeanReversionOnly;
  return GrowthCase::PotentialOnly;
}

TrendReport trend_of(std::vector<double> reduced, Direction dir, double margin) {
  if (reduced.size() < 3)
    throw Error(ErrorKind::InsufficientProbe, "a divergence trend needs at least 3 shells");
  TrendReport t;
  t.direction = dir;
  t.shell_values = std::move(reduced);
  const auto& v = t.shell_values;
  const double sgn = dir == Direction::MinusInfinity ? -1.0 : 1.0;
  t.monotone = true;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(sgn * (v[i] - v[i - 1]) > 0.0)) t.monotone = false;
  t.sign_ok = sgn * v.back() > 0.0;
  const double first = std::abs(v.front());
  t.growth = first > 0.0 ? std::abs(v.back()) / first : (v.back() != 0.0 ? kInf : 0.0);
  // A first shell of the opposite sign makes any finite ratio meaningless; the
  // margin is then measured as progress past the first value.
  if (sgn * v.front() <= 0.0 && t.sign_ok)
    t.growth = sgn * (v.back() - v.front()) / std::max(first, 1.0);
  t.pass = t.monotone && t.sign_ok && t.growth >= margin;
  for (double x : v)
    if (!std::isfinite(x)) t.pass = false;
  return t;
}

std::vector<double> reduce(const std::vector<std::vector<double>>& shells, bool take_max) {
  std::vector<double> out;
  out.reserve(shells.size());
  for (const auto& s : shells) {
    if (s.empty()) throw Error(ErrorKind::InsufficientProbe, "empty probe shell");
    out.push_back(take_max ? *std::max_element(s.begin(), s.end())
                           : *std::min_element(s.begin(), s.end()));
  }
  return out;
}

template <class Pt, class Fn>
std::vector<std::vector<double>> eval_shells(const std::vector<std::vector<Pt>>& shells, Fn&& fn) {
  std::vector<std::vector<double>> out(shells.size());
  for (std::size_t k = 0; k < shells.size(); ++k)
    for (const auto& x : shells[k]) out[k].push_back(fn(x));
  return out;
}

// Passes when the shell minima show no divergence to -inf.
LimitCheck bounded_below(std::string name, const std::vector<std::vector<double>>& vals,
                         double margin) {
  LimitCheck lc;
  lc.name = std::move(name);
  lc.trend = trend_of(reduce(vals, false), Direction::MinusInfinity, margin);
  bool finite = true;
  for (double x : lc.trend.shell_values) finite = finite && std::isfinite(x);
  lc.pass = finite && !lc.trend.pass;
  return lc;
}

LimitCheck diverges_up(std::string name, const std::vector<std::vector<double>>& vals,
                       double margin) {
  LimitCheck lc;
  lc.name = std::move(name);
  lc.trend = trend_of(reduce(vals, false), Direction::PlusInfinity, margin);
  lc.pass = lc.trend.pass;
  return lc;
}

std::vector<std::vector<double>> concat(std::vector<std::vector<double>> a,
                                        const std::vector<std::vector<double>>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

double band_radius(double n0, int k) { return n0 + 0.5 + 3.0 * k / 16.0; }

}  // namespace

std::string to_string(GrowthCase c) {
  switch (c) {
    case GrowthCase::BothPositive: return "both-positive";
    case GrowthCase::MeanReversionOnly: return "mean-reversion-only";
    case GrowthCase::PotentialOnly: return "potential-only";
    case GrowthCase::Infeasible: return "infeasible";
  }
  return "unknown";
}

void validate(const RdGrowthParams& p) {
  require(p.alpha1 > 0.0, "alpha1 must be positive");
  require(p.C1 >= 0.0 && p.C2 >= 0.0, "C1 and C2 must be nonnegative");
  require(!p.alpha2 || *p.alpha2 > 0.0, "alpha2 must be positive when given");
  require(p.kappa_hi > 0.0 && p.kappa_lo > 0.0 && p.kappa_lo <= p.kappa_hi,
          "ellipticity constants must satisfy 0 < kappa_lo <= kappa_hi");
}

void validate(const MatrixGrowthParams& p) {
  require(p.n0 > 0.0, "n0 must be positive");
  require(p.alpha1 > 0.0, "alpha1 must be positive");
  require(p.eps > 0.0 && p.c0 > 0.0 && p.c1 > 0.0, "eps, c0, c1 must be positive");
  require(p.C1 >= 0.0 && p.C2 >= 0.0, "C1 and C2 must be nonnegative");
  require(p.kappa_hi > 0.0 && p.kappa_lo > 0.0 && p.kappa_lo <= p.kappa_hi,
          "ellipticity constants must satisfy 0 < kappa_lo <= kappa_hi");
}

RdGrowthParams estimate_rd_growth(const coeffs::CoefficientField& field,
                                  const std::vector<Vec>& samples, double outer_radius) {
  RdGrowthParams p;
  p.empirical = true;
  p.kappa_lo = field.kappa_lo();
  p.kappa_hi = field.kappa_hi();
  double a1 = 0.0, b1 = kInf, g1 = kInf, g2 = -kInf, a2 = kInf;
  for (const Vec& x : samples) {
    const double r2 = x.squaredNorm();
    const double xax = x.dot(field.A(x) * x);
    a1 = std::max(a1, xax / (1.0 + r2));
    if (std::sqrt(r2) >= outer_radius) {
      b1 = std::min(b1, -field.B(x).dot(x) / r2);
      g1 = std::min(g1, -field.V(x) / r2);
      g2 = std::max(g2, -field.V(x) / r2);
      a2 = std::min(a2, xax / r2);
    }
  }
  if (!std::isfinite(b1))
    throw Error(ErrorKind::Coverage, "no sample lies beyond the outer radius");
  p.alpha1 = a1;
  p.beta1 = b1;
  p.gamma1 = g1;
  p.gamma2 = g2;
  double C1 = 0.0, C2 = 0.0, C3 = 0.0;
  for (const Vec& x : samples) {
    const double r2 = x.squaredNorm();
    const double V = field.V(x);
    C1 = std::max(C1, field.B(x).dot(x) + b1 * r2);
    C2 = std::max({C2, V + g1 * r2, -g2 * r2 - V});
    C3 = std::max(C3, a2 * r2 - x.dot(field.A(x) * x));
  }
  p.C1 = C1;
  p.C2 = C2;
  if (a2 > 0.0) {
    p.alpha2 = a2;
    p.C3 = C3;
  }
  return p;
}

CaseReport check_rd_case(const RdGrowthParams& p) {
  CaseReport r;
  r.tag = classify(p.beta1, p.gamma1);
  switch (r.tag) {
    case GrowthCase::Infeasible:
      r.detail = "max(beta1, gamma1) <= 0";
      break;
    case GrowthCase::BothPositive:
      r.pass = true;
      r.detail = "beta1 > 0 and gamma1 >= 0";
      break;
    case GrowthCase::MeanReversionOnly: {
      const double v = p.beta1 * p.beta1 + 2.0 * p.gamma1 * p.kappa_hi * p.alpha1;
      r.gate_value = v;
      r.pass = v > 0.0;
      r.detail = "beta1^2 + 2 gamma1 kappa_hi alpha1 = " + fmt(v);
      break;
    }
    case GrowthCase::PotentialOnly:
      if (!p.alpha2)
        throw Error(ErrorKind::IncompleteParams, "potential-only case requires alpha2");
      r.gate_value = *p.alpha2;
      r.pass = *p.alpha2 > 0.0;
      r.detail = "alpha2 = " + fmt(*p.alpha2);
      break;
  }
  return r;
}

SynthesisResult synth_rd_lyapunov(const RdGrowthParams& p) {
  validate(p);
  SynthesisResult s;
  s.setting = "rd";
  const double a = 0.5 * p.kappa_hi * p.alpha1;
  auto q = [&](double c) { return a * c * c - p.beta1 * c - p.gamma1; };
  if (auto z = roots(a, -p.beta1, -p.gamma1))
    s.zero_roots = *z;
  else
    s.zero_roots = {kNaN, kNaN};

  const CaseReport cr = check_rd_case(p);
  s.diagnostics.push_back("case " + to_string(cr.tag) + ": " + cr.detail);
  if (!cr.pass) {
    s.diagnostics.push_back("case gate fails; no c with q(c) < 0 on c > 0");
    return s;
  }
  // sup over c > 0 of -q(c)
  const double best = p.beta1 > 0.0 ? p.beta1 * p.beta1 / (4.0 * a) + p.gamma1 : p.gamma1;
  if (!(best > 0.0)) {
    s.diagnostics.push_back("max of -q over c > 0 is " + fmt(best));
    return s;
  }
  s.eps0 = 0.5 * best;
  const auto iv = roots(a, -p.beta1, -p.gamma1 + s.eps0);
  if (!iv || iv->second <= 0.0) {
    s.diagnostics.push_back("empty c-interval");
    return s;
  }
  s.c_interval = {std::max(0.0, iv->first), iv->second};
  s.c = p.beta1 > 0.0 ? p.beta1 / (2.0 * a) : 0.5 * iv->second;
  const double dc = 0.5 * (s.c + iv->second);
  s.delta = dc / s.c;

  if (p.beta1 > 0.0) {
    s.c_tilde = std::max(2.0 * p.gamma2 / p.beta1, 1.0);
  } else {
    if (!p.alpha2)
      throw Error(ErrorKind::IncompleteParams, "potential-only case requires alpha2");
    const double a2 = 0.5 * p.kappa_lo * *p.alpha2;
    const auto r = roots(a2, p.beta1, -p.gamma2);
    const double top = r ? r->second : 0.0;
    s.c_tilde = std::max(2.0 * top, 1.0);
  }
  s.alpha = s.eps0 / (dc + s.c_tilde);

  // Direct re-check of every returned inequality.
  s.slack["q(c)"] = -s.eps0 - q(s.c);
  s.slack["q(delta c)"] = -0.5 * s.eps0 - q(dc);
  s.slack["alpha"] = s.eps0 - 0.5 * s.alpha * (dc + s.c_tilde);
  s.slack["c_tilde"] = p.beta1 > 0.0
                           ? s.c_tilde * p.beta1 - p.gamma2
                           : 0.5 * p.kappa_lo * *p.alpha2 * s.c_tilde * s.c_tilde +
                                 p.beta1 * s.c_tilde - p.gamma2;
  const double tol = 1e-12 * std::max(1.0, s.eps0);
  s.feasible = s.delta > 1.0 && s.slack["q(c)"] >= -tol && s.slack["q(delta c)"] >= -tol &&
               s.slack["alpha"] > 0.0 && s.slack["c_tilde"] > 0.0;
  if (!s.feasible) s.diagnostics.push_back("re-check of synthesized constants failed");
  return s;
}

coeffs::SmoothFunction rd_phi0(int dim, const SynthesisResult& s) {
  return coeffs::quadratic_function(Mat::Identity(dim, dim) * s.c, Vec::Zero(dim), 0.0);
}

coeffs::SmoothFunction rd_psi0(int dim, const SynthesisResult& s) {
  return coeffs::quadratic_function(-Mat::Identity(dim, dim) * s.c_tilde, Vec::Zero(dim), 0.0);
}

TrendReport verify_divergence(const std::vector<std::vector<double>>& values, Direction dir,
                              double margin) {
  if (values.size() < 3)
    throw Error(ErrorKind::InsufficientProbe, "a divergence trend needs at least 3 shells");
  return trend_of(reduce(values, dir == Direction::MinusInfinity), dir, margin);
}

TrendReport verify_lyapunov_divergence(const coeffs::CoefficientField& field,
                                       const coeffs::SmoothFunction& phi,
                                       const std::vector<std::vector<Vec>>& shells, Direction dir,
                                       double margin) {
  if (shells.size() < 3)
    throw Error(ErrorKind::InsufficientProbe, "a divergence trend needs at least 3 shells");
  return verify_divergence(
      eval_shells(shells, [&](const Vec& x) { return coeffs::eval_operator(field, phi, x); }), dir,
      margin);
}

TrendReport verify_lyapunov_divergence(const MatrixCoefficients& c, const MatrixFunction& phi,
                                       const std::vector<std::vector<SpdPoint>>& shells,
                                       Direction dir, double margin) {
  if (shells.size() < 3)
    throw Error(ErrorKind::InsufficientProbe, "a divergence trend needs at least 3 shells");
  return verify_divergence(eval_shells(shells,
                                       [&](const SpdPoint& x) {
                                         return matrixdom::matrix_operator_eval(c, phi, x);
                                       }),
                           dir, margin);
}

std::vector<std::vector<Vec>> sphere_shells(int dim, const std::vector<double>& radii) {
  std::vector<Vec> dirs;
  for (int i = 0; i < dim; ++i)
    for (double sg : {-1.0, 1.0}) {
      Vec e = Vec::Zero(dim);
      e[i] = sg;
      dirs.push_back(e);
    }
  if (dim >= 2)
    for (int m = 0; m < (1 << dim); ++m) {
      Vec e(dim);
      for (int i = 0; i < dim; ++i) e[i] = (m >> i) & 1 ? 1.0 : -1.0;
      dirs.push_back(e / std::sqrt(static_cast<double>(dim)));
    }
  std::vector<std::vector<Vec>> out;
  for (double r : radii) {
    std::vector<Vec> shell;
    for (const Vec& e : dirs) shell.push_back(r * e);
    out.push_back(std::move(shell));
  }
  return out;
}

std::vector<double> default_radii(double R) { return {0.25 * R, 0.5 * R, R}; }

MatrixProbe default_matrix_probe(int d, double n0) {
  MatrixProbe probe;
  const int rot = 3;
  for (int k = 1; k <= 3; ++k) {
    std::vector<std::vector<double>> spectra;
    std::vector<double> lam(d, 1.0);
    lam[0] = std::pow(10.0, -k);
    spectra.push_back(lam);
    if (d >= 2) {
      std::vector<double> all(d, std::pow(10.0, -k / static_cast<double>(d) * 1.0));
      all[0] = std::pow(10.0, -k);
      spectra.push_back(all);
    }
    probe.det_shells.push_back(matrixdom::spectral_probe(d, spectra, rot));
  }
  for (double m : {2.0, 8.0, 32.0}) {
    const double r = (n0 + 2.0) * m;
    std::vector<std::vector<double>> spectra;
    std::vector<double> flat(d, r / std::sqrt(static_cast<double>(d)));
    spectra.push_back(flat);
    if (d >= 2) {
      std::vector<double> w(d);
      double nrm = 0.0;
      for (int i = 0; i < d; ++i) {
        w[i] = std::pow(0.5, i);
        nrm += w[i] * w[i];
      }
      for (double& x : w) x *= r / std::sqrt(nrm);
      spectra.push_back(w);
    }
    probe.norm_shells.push_back(matrixdom::spectral_probe(d, spectra, rot));
  }
  std::vector<std::vector<double>> bulk;
  const std::vector<double> levels{0.05, 0.2, 0.5, 1.0, 2.0, 4.0};
  std::vector<int> idx(d, 0);
  while (true) {
    std::vector<double> lam(d);
    for (int i = 0; i < d; ++i) lam[i] = levels[idx[i]];
    bulk.push_back(lam);
    int i = 0;
    while (i < d && ++idx[i] == static_cast<int>(levels.size())) idx[i++] = 0;
    if (i == d) break;
  }
  // Radii across the cutoff band n0 + 1 <= |x| <= n0 + 2.
  for (int k = 0; k <= 16; ++k) {
    const double r = band_radius(n0, k);
    std::vector<double> flat(d, r / std::sqrt(static_cast<double>(d)));
    bulk.push_back(flat);
    if (d >= 2) {
      std::vector<double> lop(d, 0.3 * r / std::sqrt(static_cast<double>(d)));
      lop[0] = std::sqrt(std::max(r * r - (d - 1) * lop[1] * lop[1], 0.0));
      bulk.push_back(lop);
    }
  }
  probe.compact = matrixdom::spectral_probe(d, bulk, 2);
  return probe;
}

MatrixAssumptionReport check_matrix_assumptions(const MatrixCoefficients& c,
                                                const MatrixGrowthParams& p,
                                                const MatrixProbe& probe, double margin) {
  validate(p);
  if (probe.det_shells.size() < 3)
    throw Error(ErrorKind::Coverage, "probe lacks 3 small-determinant shells");
  if (probe.norm_shells.size() < 3)
    throw Error(ErrorKind::Coverage, "probe lacks 3 large-norm shells");
  for (const auto& s : probe.norm_shells)
    for (const auto& x : s)
      if (x.matrix().norm() < p.n0)
        throw Error(ErrorKind::Coverage, "large-norm shell point lies inside |x| < n0");

  MatrixAssumptionReport rep;
  rep.tag = classify(p.beta1, p.gamma1);

  // Growth inequalities on every probe point with |x| >= n0.
  std::vector<const SpdPoint*> pts;
  for (const auto* group : {&probe.det_shells, &probe.norm_shells})
    for (const auto& s : *group)
      for (const auto& x : s) pts.push_back(&x);
  for (const auto& x : probe.compact) pts.push_back(&x);

  InequalityCheck tr{"Tr f Tr g <= alpha1 |x|", kInf, false};
  InequalityCheck drift{"Tr(B x) <= -beta1 |x|^2 + C1", kInf, false};
  InequalityCheck vup{"V <= -gamma1 |x| + C2", kInf, false};
  InequalityCheck vlo{"V >= -gamma2 |x| - C2", kInf, false};
  std::size_t outer = 0;
  for (const SpdPoint* xp : pts) {
    const Mat& x = xp->matrix();
    const double r = x.norm();
    if (r < p.n0) continue;
    ++outer;
    const Mat f = c.f(x), g = c.g(x);
    const double V = c.V(x);
    tr.worst_slack = std::min(tr.worst_slack, p.alpha1 * r - f.trace() * g.trace());
    drift.worst_slack =
        std::min(drift.worst_slack, -p.beta1 * r * r + p.C1 - (c.B(x).transpose() * x).trace());
    vup.worst_slack = std::min(vup.worst_slack, -p.gamma1 * r + p.C2 - V);
    vlo.worst_slack = std::min(vlo.worst_slack, V + p.gamma2 * r + p.C2);
  }
  if (outer == 0) throw Error(ErrorKind::Coverage, "no probe point with |x| >= n0");
  for (auto* ic : {&tr, &drift, &vup, &vlo}) {
    ic->pass = ic->worst_slack >= 0.0;
    rep.inequalities.push_back(*ic);
  }

  double a3 = kInf;
  for (const auto& s : probe.norm_shells)
    for (const auto& xp : s) {
      const Mat& x = xp.matrix();
      a3 = std::min(a3, (c.f(x) * x * c.g(x) * x).trace() / std::pow(x.norm(), 3));
    }
  rep.alpha3_empirical = a3;

  bool gate = false;
  switch (rep.tag) {
    case GrowthCase::Infeasible:
      rep.diagnostics.push_back("max(beta1, gamma1) <= 0");
      break;
    case GrowthCase::BothPositive:
      gate = true;
      break;
    case GrowthCase::MeanReversionOnly: {
      const double v = p.beta1 * p.beta1 + 16.0 * p.kappa_hi * p.alpha1 * p.gamma1;
      rep.gate_value = v;
      gate = v > 0.0;
      break;
    }
    case GrowthCase::PotentialOnly: {
      double a3u = p.alpha3.value_or(a3);
      if (!p.alpha3) rep.diagnostics.push_back("alpha3 not supplied; using empirical infimum " + fmt(a3));
      rep.gate_value = a3u;
      gate = a3u > 0.0;
      if (p.alpha3) {
        InequalityCheck ic{"Tr(f x g x) >= alpha3 |x|^3 - C3", kInf, false};
        for (const SpdPoint* xp : pts) {
          const Mat& x = xp->matrix();
          if (x.norm() < p.n0) continue;
          ic.worst_slack = std::min(ic.worst_slack, (c.f(x) * x * c.g(x) * x).trace() -
                                                        a3u * std::pow(x.norm(), 3) +
                                                        p.C3.value_or(0.0));
        }
        ic.pass = ic.worst_slack >= 0.0;
        rep.inequalities.push_back(ic);
      }
      break;
    }
  }

  auto on = [&](const std::vector<std::vector<SpdPoint>>& shells, auto&& fn) {
    return eval_shells(shells, fn);
  };
  auto heps = [&](const SpdPoint& x) { return matrixdom::h_delta(c, p.eps, x); };
  rep.limits.push_back(bounded_below(
      "inf H_eps > -inf",
      concat(on(probe.det_shells, heps), on(probe.norm_shells, heps)), margin));
  // Both sequences must be free of downward divergence.
  rep.limits.back().pass = rep.limits.back().pass &&
                           bounded_below("", on(probe.det_shells, heps), margin).pass &&
                           bounded_below("", on(probe.norm_shells, heps), margin).pass;
  rep.limits.push_back(bounded_below("liminf H_eps + c0 log det > -inf",
                                     on(probe.det_shells,
                                        [&](const SpdPoint& x) {
                                          return heps(x) +
                                                 p.c0 * std::log(x.matrix().determinant());
                                        }),
                                     margin));
  rep.limits.push_back(diverges_up("lim H_0 + c1 V = inf",
                                   on(probe.det_shells,
                                      [&](const SpdPoint& x) {
                                        return matrixdom::h_delta(c, 0.0, x) +
                                               p.c1 * c.V(x.matrix());
                                      }),
                                   margin));

  rep.pass = gate;
  for (const auto& ic : rep.inequalities) {
    if (!ic.pass) rep.diagnostics.push_back("violated on probe: " + ic.name);
    rep.pass = rep.pass && ic.pass;
  }
  for (const auto& lc : rep.limits) {
    if (!lc.pass) rep.diagnostics.push_back("trend fails: " + lc.name);
    rep.pass = rep.pass && lc.pass;
  }
  return rep;
}

matrixdom::Phi0Params matrix_phi0_params(const SynthesisResult& s) {
  return {s.c_lo, s.c_hi, s.C, s.n0};
}

matrixdom::Psi0Params matrix_psi0_params(const SynthesisResult& s) {
  return {s.k_lo, s.k_hi, s.n0};
}

SynthesisResult synth_matrix_lyapunov(const MatrixCoefficients& c, const MatrixGrowthParams& p,
                                      const MatrixProbe& probe, const MatrixSynthOptions& opt) {
  SynthesisResult s;
  s.setting = "matrix";
  s.n0 = p.n0;
  const auto rep = check_matrix_assumptions(c, p, probe, opt.margin);
  if (!rep.pass) {
    s.diagnostics.push_back("assumption check failed");
    for (const auto& m : rep.diagnostics) s.diagnostics.push_back(m);
    return s;
  }
  const int d = c.d;
  const double ka = 4.0 * p.kappa_hi * p.alpha1;
  // Slack polynomial gamma1 + beta1 c - ka c^2.
  const double best = p.beta1 > 0.0 ? p.gamma1 + p.beta1 * p.beta1 / (4.0 * ka) : p.gamma1;
  if (!(best > 0.0)) {
    s.diagnostics.push_back("empty c_hi-interval");
    return s;
  }
  s.eps0 = 0.5 * best;
  const auto iv = roots(-ka, p.beta1, p.gamma1 - s.eps0);
  const auto z = roots(-ka, p.beta1, p.gamma1);
  if (!iv || iv->second <= 0.0 || !z) {
    s.diagnostics.push_back("empty c_hi-interval");
    return s;
  }
  s.zero_roots = *z;
  s.c_hi_interval = {std::max(0.0, iv->first), iv->second};
  // Midpoint of the positive part of the zero-level interval when it keeps
  // slack eps0, otherwise the vertex.
  const double mid = 0.5 * (std::max(0.0, z->first) + z->second);
  const double vertex = p.beta1 > 0.0 ? p.beta1 / (2.0 * ka) : 0.5 * iv->second;
  s.c_hi = mid > s.c_hi_interval.first && mid < s.c_hi_interval.second ? mid : vertex;

  const double lem = p.eps / (4.0 * p.kappa_hi);
  const double cor = p.eps / (8.0 * p.kappa_lo);
  s.c_lo = 0.5 * std::min(lem, cor);
  if (cor < lem)
    s.diagnostics.push_back("c_lo threshold eps/(8 kappa_lo) = " + fmt(cor) +
                            " is tighter than eps/(4 kappa_hi) = " + fmt(lem) +
                            "; the smaller one is used");
  else if (cor != lem)
    s.diagnostics.push_back("c_lo threshold eps/(4 kappa_hi) = " + fmt(lem) +
                            " is tighter than eps/(8 kappa_lo) = " + fmt(cor) +
                            "; the smaller one is used");
  const double dmax = std::min(lem / s.c_lo, s.c_hi_interval.second / s.c_hi);
  s.delta = 0.5 * (1.0 + dmax);
  s.k_lo = 2.0 / p.c1;

  // Bulk constant making phi0 nonnegative on the probe.
  std::vector<const SpdPoint*> all;
  for (const auto* group : {&probe.det_shells, &probe.norm_shells})
    for (const auto& sh : *group)
      for (const auto& x : sh) all.push_back(&x);
  for (const auto& x : probe.compact) all.push_back(&x);
  const matrixdom::Phi0Params bare{s.c_lo, s.c_hi, 0.0, p.n0};
  double lo = kInf;
  for (const SpdPoint* x : all) lo = std::min(lo, matrixdom::phi0_matrix(bare, *x));
  s.C = std::max(0.0, -lo) + 1.0;

  // k_hi by doubling until F[psi0] diverges upward on both shell families.
  double k = std::max(opt.k_hi_start, p.beta1 > 0.0 ? 2.0 * p.gamma2 / p.beta1 : 0.0);
  bool found = false;
  for (; k <= opt.k_hi_cap; k *= 2.0) {
    const auto psi = matrixdom::logdet_norm_function(d, s.k_lo, -k, 0.0, p.n0);
    if (verify_lyapunov_divergence(c, psi, probe.det_shells, Direction::PlusInfinity, opt.margin)
            .pass &&
        verify_lyapunov_divergence(c, psi, probe.norm_shells, Direction::PlusInfinity, opt.margin)
            .pass) {
      found = true;
      break;
    }
  }
  if (!found) {
    s.inconclusive = true;
    s.diagnostics.push_back("k_hi doubling reached the cap " + fmt(opt.k_hi_cap) +
                            " without an upward psi0 trend");
    return s;
  }
  s.k_hi = k;

  const double a1 = s.eps0 / (s.delta * s.c_hi + s.k_hi);
  const double a2 = p.c0 / (1.0 + s.k_lo / (s.delta * s.c_lo));
  s.alpha = 0.5 * std::min(a1, a2);
  s.K = s.k_lo / s.c_lo + s.k_hi / s.c_hi + 1.0;

  s.slack["c_hi eps0"] = p.gamma1 + p.beta1 * s.c_hi - ka * s.c_hi * s.c_hi - s.eps0;
  const double dch = s.delta * s.c_hi;
  s.slack["delta c_hi eps0"] = p.gamma1 + p.beta1 * dch - ka * dch * dch - s.eps0;
  s.slack["delta c_lo"] = lem - s.delta * s.c_lo;
  s.slack["alpha eps0"] = s.eps0 - s.alpha * (s.delta * s.c_hi + s.k_hi);
  s.slack["alpha c0"] = p.c0 - s.alpha * (1.0 + s.k_lo / (s.delta * s.c_lo));
  s.slack["k_lo c1"] = s.k_lo - 1.0 / p.c1;

  // Direct re-verification on the probe shells.
  const auto phi = matrixdom::phi0_function(d, matrix_phi0_params(s));
  const auto dphi = matrixdom::logdet_norm_function(d, -s.delta * s.c_lo, s.delta * s.c_hi,
                                                    s.delta * s.C, p.n0);
  const auto psi = matrixdom::psi0_function(d, matrix_psi0_params(s));
  bool ok = true;
  for (const auto* shells : {&probe.det_shells, &probe.norm_shells}) {
    const char* tag = shells == &probe.det_shells ? "det" : "norm";
    const bool a = verify_lyapunov_divergence(c, phi, *shells, Direction::MinusInfinity, opt.margin).pass;
    const bool b = verify_lyapunov_divergence(c, dphi, *shells, Direction::MinusInfinity, opt.margin).pass;
    const bool e = verify_lyapunov_divergence(c, psi, *shells, Direction::PlusInfinity, opt.margin).pass;
    if (!a) s.diagnostics.push_back(std::string("F[phi0] trend fails on ") + tag + " shells");
    if (!b) s.diagnostics.push_back(std::string("F[delta phi0] trend fails on ") + tag + " shells");
    if (!e) s.diagnostics.push_back(std::string("F[psi0] trend fails on ") + tag + " shells");
    ok = ok && a && b && e;
  }
  double phimin = kInf, combo = kInf;
  for (const SpdPoint* x : all) {
    phimin = std::min(phimin, phi.value(x->matrix()));
    combo = std::min(combo, psi.value(x->matrix()) + s.K * phi.value(x->matrix()));
  }
  s.slack["phi0 min"] = phimin;
  s.slack["psi0 + K phi0 min"] = combo;
  const auto combo_vals = [&](const std::vector<std::vector<SpdPoint>>& shells) {
    return eval_shells(shells, [&](const SpdPoint& x) {
      return psi.value(x.matrix()) + s.K * phi.value(x.matrix());
    });
  };
  const bool combo_ok = bounded_below("", combo_vals(probe.det_shells), opt.margin).pass &&
                        bounded_below("", combo_vals(probe.norm_shells), opt.margin).pass;
  if (!combo_ok) s.diagnostics.push_back("psi0 + K phi0 trends to -inf on probe");

  bool slack_ok = true;
  for (const auto& [name, v] : s.slack)
    if (name != "psi0 + K phi0 min" && !(v >= 0.0)) {
      slack_ok = false;
      s.diagnostics.push_back("negative slack: " + name);
    }
  s.feasible = ok && combo_ok && slack_ok && s.delta > 1.0;
  s.diagnostics.push_back("certified on probes only");
  return s;
}

double calibrate_bound_constant(const MatrixCoefficients& c, const SynthesisResult& s,
                                const MatrixGrowthParams& p, const MatrixProbe& probe) {
  const auto phi = matrix_phi0_params(s);
  const matrixdom::BoundParams b{p.kappa_hi, p.alpha1, p.beta1, p.gamma1, 0.0};
  const auto fn = matrixdom::phi0_function(c.d, phi);
  double gap = -kInf;
  auto visit = [&](const SpdPoint& x) {
    gap = std::max(gap, matrixdom::matrix_operator_eval(c, fn, x) -
                            matrixdom::fphi0_bound_shape(c, phi, b, x));
  };
  for (const auto* group : {&probe.det_shells, &probe.norm_shells})
    for (const auto& sh : *group)
      for (const auto& x : sh) visit(x);
  for (const auto& x : probe.compact) visit(x);
  return gap + 1.0;
}

}  // namespace hjblab::lyapunov
