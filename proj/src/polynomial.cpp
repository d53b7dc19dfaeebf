#include "hjblab/polynomial.hpp"

#include "hjblab/error.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <map>

namespace hjblab {

Polynomial Polynomial::constant(int nvars, double c) {
  Polynomial p(nvars);
  p.add_term(c, std::vector<int>(nvars, 0));
  return p;
}

void Polynomial::add_term(double coef, std::vector<int> powers) {
  if (static_cast<int>(powers.size()) != nvars_)
    throw Error(ErrorKind::Dimension, "polynomial term has wrong variable count");
  for (auto& t : terms_) {
    if (t.powers == powers) {
      t.coef += coef;
      return;
    }
  }
  terms_.push_back({coef, std::move(powers)});
}

int Polynomial::degree() const {
  int deg = 0;
  for (const auto& t : terms_) {
    int s = 0;
    for (int p : t.powers) s += p;
    deg = std::max(deg, s);
  }
  return deg;
}

namespace {

double ipow(double x, int p) {
  double r = 1.0;
  for (int i = 0; i < p; ++i) r *= x;
  return r;
}

double monomial(const std::vector<int>& pw, const Vec& x, int skip_a = -1, int skip_b = -1) {
  // Derivative helpers: lowers the power of variable skip_a (and skip_b) by one
  // and multiplies by the exponent.
  std::vector<int> p = pw;
  double factor = 1.0;
  for (int s : {skip_a, skip_b}) {
    if (s < 0) continue;
    if (p[s] == 0) return 0.0;
    factor *= p[s];
    --p[s];
  }
  double v = factor;
  for (std::size_t i = 0; i < p.size(); ++i) v *= ipow(x[static_cast<Eigen::Index>(i)], p[i]);
  return v;
}

[[noreturn]] void parse_fail(std::string_view text, std::size_t pos, const std::string& why) {
  throw Error(ErrorKind::Validation, "polynomial '" + std::string(text) + "' at offset " +
                                         std::to_string(pos) + ": " + why);
}

}  // namespace

double Polynomial::value(const Vec& x) const {
  double v = 0.0;
  for (const auto& t : terms_) v += t.coef * monomial(t.powers, x);
  return v;
}

Vec Polynomial::gradient(const Vec& x) const {
  Vec g = Vec::Zero(nvars_);
  for (const auto& t : terms_)
    for (int i = 0; i < nvars_; ++i)
      if (t.powers[i] > 0) g[i] += t.coef * monomial(t.powers, x, i);
  return g;
}

Mat Polynomial::hessian(const Vec& x) const {
  Mat h = Mat::Zero(nvars_, nvars_);
  for (const auto& t : terms_)
    for (int i = 0; i < nvars_; ++i)
      for (int j = i; j < nvars_; ++j) {
        const double v = t.coef * monomial(t.powers, x, i, j);
        h(i, j) += v;
        if (j != i) h(j, i) += v;
      }
  return h;
}

Polynomial Polynomial::substitute_linear(const Mat& M) const {
  if (M.rows() != nvars_) throw Error(ErrorKind::Dimension, "substitution matrix rows");
  const int ny = static_cast<int>(M.cols());
  using Poly = std::map<std::vector<int>, double>;
  auto mul = [ny](const Poly& a, const Poly& b) {
    Poly r;
    for (const auto& [pa, ca] : a)
      for (const auto& [pb, cb] : b) {
        std::vector<int> p(ny);
        for (int k = 0; k < ny; ++k) p[k] = pa[k] + pb[k];
        r[p] += ca * cb;
      }
    return r;
  };
  std::vector<Poly> linear(nvars_);
  for (int i = 0; i < nvars_; ++i)
    for (int j = 0; j < ny; ++j)
      if (M(i, j) != 0.0) {
        std::vector<int> p(ny, 0);
        p[j] = 1;
        linear[i][p] += M(i, j);
      }
  Polynomial out(ny);
  for (const auto& t : terms_) {
    Poly acc{{std::vector<int>(ny, 0), t.coef}};
    for (int i = 0; i < nvars_; ++i)
      for (int k = 0; k < t.powers[i]; ++k) acc = mul(acc, linear[i]);
    for (const auto& [p, c] : acc)
      if (c != 0.0) out.add_term(c, p);
  }
  return out;
}

Polynomial Polynomial::parse(std::string_view text, int nvars) {
  Polynomial poly(nvars);
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  };
  auto read_number = [&]() -> double {
    skip_ws();
    std::size_t end = pos;
    while (end < text.size() &&
           (std::isdigit(static_cast<unsigned char>(text[end])) || text[end] == '.' ||
            text[end] == 'e' || text[end] == 'E' ||
            ((text[end] == '-' || text[end] == '+') && end > pos &&
             (text[end - 1] == 'e' || text[end - 1] == 'E'))))
      ++end;
    if (end == pos) parse_fail(text, pos, "expected number");
    double v = 0.0;
    const auto res = std::from_chars(text.data() + pos, text.data() + end, v);
    if (res.ec != std::errc() || res.ptr != text.data() + end) parse_fail(text, pos, "bad number");
    pos = end;
    return v;
  };
  auto read_int = [&]() -> int {
    skip_ws();
    std::size_t end = pos;
    while (end < text.size() && std::isdigit(static_cast<unsigned char>(text[end]))) ++end;
    if (end == pos) parse_fail(text, pos, "expected integer");
    int v = 0;
    std::from_chars(text.data() + pos, text.data() + end, v);
    pos = end;
    return v;
  };

  skip_ws();
  if (pos == text.size()) parse_fail(text, pos, "empty expression");
  bool first = true;
  while (true) {
    skip_ws();
    if (pos == text.size()) break;
    double sign = 1.0;
    if (text[pos] == '+' || text[pos] == '-') {
      sign = text[pos] == '-' ? -1.0 : 1.0;
      ++pos;
    } else if (!first) {
      parse_fail(text, pos, "expected '+' or '-'");
    }
    first = false;
    double coef = 1.0;
    std::vector<int> powers(nvars, 0);
    bool have_factor = false;
    while (true) {
      skip_ws();
      if (pos < text.size() && (text[pos] == 'x' || text[pos] == 'X')) {
        ++pos;
        const int var = read_int();
        if (var < 1 || var > nvars) parse_fail(text, pos, "variable index out of range");
        int pw = 1;
        skip_ws();
        if (pos < text.size() && text[pos] == '^') {
          ++pos;
          pw = read_int();
        }
        powers[var - 1] += pw;
      } else {
        coef *= read_number();
      }
      have_factor = true;
      skip_ws();
      if (pos < text.size() && text[pos] == '*') {
        ++pos;
        continue;
      }
      break;
    }
    if (!have_factor) parse_fail(text, pos, "empty term");
    poly.add_term(sign * coef, std::move(powers));
  }
  return poly;
}

}  // namespace hjblab
