#pragma once

#include "hjblab/linalg.hpp"
#include "hjblab/matrixdom.hpp"

#include <random>

namespace testsupport {

using hjblab::Mat;

inline Mat random_matrix(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = n(rng);
  return m;
}

inline Mat random_spd(std::mt19937_64& rng, int d, double floor = 0.2) {
  const Mat m = random_matrix(rng, d);
  return hjblab::symmetrize(m * m.transpose() / d + floor * Mat::Identity(d, d));
}

inline Mat random_symmetric(std::mt19937_64& rng, int d) {
  return hjblab::symmetrize(random_matrix(rng, d));
}

// Random polynomial in n variables, degree <= max_deg.
inline hjblab::Polynomial random_poly(std::mt19937_64& rng, int n, int max_deg, int terms) {
  std::uniform_int_distribution<int> var(0, n - 1), deg(0, max_deg);
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  hjblab::Polynomial p(n);
  for (int t = 0; t < terms; ++t) {
    std::vector<int> pw(n, 0);
    const int k = deg(rng);
    for (int i = 0; i < k; ++i) ++pw[var(rng)];
    p.add_term(coef(rng), pw);
  }
  return p;
}

// Smooth non-Wishart coefficients with a nontrivial Abar for the identification check.
inline hjblab::matrixdom::MatrixCoefficients general_coeffs(int d) {
  std::mt19937_64 rng(11);
  const Mat L = random_matrix(rng, d);
  const Mat K = -Mat::Identity(d, d) + 0.3 * random_matrix(rng, d);
  const Mat Lam = random_spd(rng, d);
  hjblab::matrixdom::MatrixCoefficients c;
  c.d = d;
  c.f = [d](const Mat& x) -> Mat { return x + 0.5 * Mat::Identity(d, d); };
  c.g = [Lam](const Mat& x) -> Mat { return Lam * Lam.transpose() + 0.1 * x; };
  c.B = [L, K](const Mat& x) -> Mat { return L * L.transpose() + K * x + x * K.transpose(); };
  c.V = [](const Mat& x) { return x.trace() - 0.1 * (x * x).trace(); };
  auto prop = hjblab::matrixdom::proportional_abar(c, 0.7);
  c.Abar = [prop](const Mat& x) -> Mat {
    const Eigen::Map<const hjblab::Vec> s(x.data(), x.size());
    return prop(x) + 0.2 * s * s.transpose();
  };
  return c;
}

}  // namespace testsupport
