#include "hjblab/grid.hpp"

#include "hjblab/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace hjblab {

Grid::Grid(std::vector<double> lo, std::vector<double> hi, std::vector<int> counts,
           Membership active)
    : lo_(std::move(lo)), hi_(std::move(hi)), counts_(std::move(counts)) {
  const std::size_t d = counts_.size();
  if (d == 0 || d > kMaxGridDim || lo_.size() != d || hi_.size() != d)
    throw Error(ErrorKind::Dimension, "grid needs 1.." + std::to_string(kMaxGridDim) +
                                          " axes with matching bounds");
  spacing_.resize(d);
  strides_.resize(d);
  size_ = 1;
  for (std::size_t a = 0; a < d; ++a) {
    if (counts_[a] < 5)
      throw Error(ErrorKind::Validation, "grid axis " + std::to_string(a) +
                                             " needs at least 5 nodes");
    if (!(hi_[a] > lo_[a]))
      throw Error(ErrorKind::Validation, "grid axis " + std::to_string(a) +
                                             " has empty bounds");
    spacing_[a] = (hi_[a] - lo_[a]) / (counts_[a] - 1);
  }
  // Axis 0 varies fastest.
  for (std::size_t a = 0; a < d; ++a) {
    strides_[a] = size_;
    size_ *= static_cast<std::size_t>(counts_[a]);
  }
  has_mask_ = static_cast<bool>(active);
  classify(active);
  build_rules();
}

std::array<int, kMaxGridDim> Grid::multi_index(std::size_t flat) const {
  std::array<int, kMaxGridDim> idx{};
  for (int a = 0; a < dim(); ++a) {
    idx[a] = static_cast<int>(flat % counts_[a]);
    flat /= counts_[a];
  }
  return idx;
}

std::size_t Grid::flat_index(const std::array<int, kMaxGridDim>& idx) const {
  std::size_t flat = 0;
  for (int a = 0; a < dim(); ++a) flat += static_cast<std::size_t>(idx[a]) * strides_[a];
  return flat;
}

Vec Grid::node(std::size_t flat) const {
  const auto idx = multi_index(flat);
  Vec x(dim());
  for (int a = 0; a < dim(); ++a) x[a] = coord(a, idx[a]);
  return x;
}

std::optional<std::size_t> Grid::neighbor(std::size_t flat, int axis, int offset) const {
  const auto idx = multi_index(flat);
  const int j = idx[axis] + offset;
  if (j < 0 || j >= counts_[axis]) return std::nullopt;
  const std::size_t n =
      static_cast<std::size_t>(static_cast<long long>(flat) +
                               static_cast<long long>(offset) * static_cast<long long>(strides_[axis]));
  if (kinds_[n] == NodeKind::Masked) return std::nullopt;
  return n;
}

namespace {

std::optional<std::size_t> shifted(const Grid& g, std::size_t flat,
                                   const std::array<int, kMaxGridDim>& off) {
  auto idx = g.multi_index(flat);
  for (int a = 0; a < g.dim(); ++a) {
    idx[a] += off[a];
    if (idx[a] < 0 || idx[a] >= g.count(a)) return std::nullopt;
  }
  const std::size_t n = g.flat_index(idx);
  if (!g.active(n)) return std::nullopt;
  return n;
}

}  // namespace

void Grid::classify(const Membership& active) {
  kinds_.assign(size_, NodeKind::Interior);
  if (active) {
    for (std::size_t i = 0; i < size_; ++i)
      if (!active(node(i))) kinds_[i] = NodeKind::Masked;
  }
  const int d = dim();
  int n_offsets = 1;
  for (int a = 0; a < d; ++a) n_offsets *= 3;
  std::vector<NodeKind> out = kinds_;
  for (std::size_t i = 0; i < size_; ++i) {
    if (kinds_[i] == NodeKind::Masked) continue;
    const auto idx = multi_index(i);
    bool inner = true;
    for (int o = 0; o < n_offsets && inner; ++o) {
      int code = o;
      std::array<int, kMaxGridDim> j = idx;
      for (int a = 0; a < d; ++a) {
        j[a] += code % 3 - 1;
        code /= 3;
        if (j[a] < 0 || j[a] >= counts_[a]) inner = false;
      }
      if (inner && kinds_[flat_index(j)] == NodeKind::Masked) inner = false;
    }
    out[i] = inner ? NodeKind::Interior : NodeKind::Boundary;
  }
  kinds_ = std::move(out);
}

void Grid::build_rules() {
  std::vector<char> assigned(size_, 0);
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < size_; ++i) {
    if (kinds_[i] == NodeKind::Interior) assigned[i] = 1;
    if (kinds_[i] == NodeKind::Boundary) pending.push_back(i);
  }
  while (!pending.empty()) {
    std::vector<ExtrapolationRule> found;
    std::vector<std::size_t> still;
    for (std::size_t node_id : pending) {
      bool ok = false;
      for (int a = 0; a < dim() && !ok; ++a) {
        for (int dir : {+1, -1}) {
          auto s1 = neighbor(node_id, a, dir);
          auto s2 = neighbor(node_id, a, 2 * dir);
          auto s3 = neighbor(node_id, a, 3 * dir);
          if (s1 && s2 && s3 && assigned[*s1] && assigned[*s2] && assigned[*s3]) {
            found.push_back({node_id, {*s1, *s2, *s3}});
            ok = true;
            break;
          }
        }
      }
      if (!ok) still.push_back(node_id);
    }
    if (found.empty()) break;
    for (const auto& r : found) assigned[r.node] = 1;
    rules_.insert(rules_.end(), found.begin(), found.end());
    pending = std::move(still);
  }
  unreachable_ = std::move(pending);
}

void Grid::extrapolate(std::span<double> values) const {
  for (const auto& r : rules_)
    values[r.node] = 3.0 * values[r.sources[0]] - 3.0 * values[r.sources[1]] +
                     values[r.sources[2]];
}

bool Grid::contains(const Vec& x) const {
  for (int a = 0; a < dim(); ++a)
    if (x[a] < lo_[a] || x[a] > hi_[a]) return false;
  return true;
}

bool Grid::same_layout(const Grid& other) const {
  if (dim() != other.dim()) return false;
  for (int a = 0; a < dim(); ++a)
    if (counts_[a] != other.counts_[a] || lo_[a] != other.lo_[a] || hi_[a] != other.hi_[a])
      return false;
  return kinds_ == other.kinds_;
}

std::size_t Grid::nearest(const Vec& x) const {
  std::array<int, kMaxGridDim> idx{};
  for (int a = 0; a < dim(); ++a) {
    const double r = std::round((x[a] - lo_[a]) / spacing_[a]);
    idx[a] = static_cast<int>(std::clamp(r, 0.0, static_cast<double>(counts_[a] - 1)));
  }
  const std::size_t guess = flat_index(idx);
  if (active(guess)) return guess;
  std::size_t best = guess;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < size_; ++i) {
    if (!active(i)) continue;
    const double dd = (node(i) - x).squaredNorm();
    if (dd < best_d) {
      best_d = dd;
      best = i;
    }
  }
  return best;
}

double Grid::interpolate(std::span<const double> values, const Vec& x) const {
  const int d = dim();
  std::array<int, kMaxGridDim> base{};
  std::array<double, kMaxGridDim> w{};
  for (int a = 0; a < d; ++a) {
    const double s = (x[a] - lo_[a]) / spacing_[a];
    int i0 = static_cast<int>(std::floor(s));
    i0 = std::clamp(i0, 0, counts_[a] - 2);
    base[a] = i0;
    w[a] = std::clamp(s - i0, 0.0, 1.0);
  }
  double acc = 0.0;
  for (int corner = 0; corner < (1 << d); ++corner) {
    std::array<int, kMaxGridDim> idx = base;
    double weight = 1.0;
    for (int a = 0; a < d; ++a) {
      const int bit = (corner >> a) & 1;
      idx[a] += bit;
      weight *= bit ? w[a] : 1.0 - w[a];
    }
    const std::size_t n = flat_index(idx);
    if (!active(n)) return values[nearest(x)];
    acc += weight * values[n];
  }
  return acc;
}

OperatorStencil stencil_at(const Grid& grid, std::size_t node) {
  OperatorStencil s;
  for (int a = 0; a < grid.dim(); ++a) s.spacing[a] = grid.spacing(a);
  s.node = node;
  s.scheme = grid.interior(node) ? StencilScheme::Central : StencilScheme::OneSided;
  return s;
}

NodeDerivatives derivatives_at(const Grid& grid, std::span<const double> u, std::size_t node) {
  NodeDerivatives out;
  const int d = grid.dim();
  const double u0 = u[node];
  for (int a = 0; a < d; ++a) {
    const double h = grid.spacing(a);
    const auto m = grid.neighbor(node, a, -1);
    const auto p = grid.neighbor(node, a, +1);
    if (m && p) {
      out.grad[a] = (u[*p] - u[*m]) / (2.0 * h);
      out.hess[a][a] = (u[*p] - 2.0 * u0 + u[*m]) / (h * h);
      continue;
    }
    const int dir = p ? +1 : (m ? -1 : 0);
    if (dir == 0) continue;
    const auto n1 = dir > 0 ? p : m;
    const auto n2 = grid.neighbor(node, a, 2 * dir);
    if (n2) {
      out.grad[a] = dir * (-3.0 * u0 + 4.0 * u[*n1] - u[*n2]) / (2.0 * h);
      out.hess[a][a] = (u0 - 2.0 * u[*n1] + u[*n2]) / (h * h);
    } else {
      out.grad[a] = dir * (u[*n1] - u0) / h;
    }
  }
  for (int a = 0; a < d; ++a) {
    for (int b = a + 1; b < d; ++b) {
      double val = 0.0;
      bool done = false;
      for (int sa : {0, 1, -1}) {
        for (int sb : {0, 1, -1}) {
          std::array<int, kMaxGridDim> off{};
          auto corner = [&](int da, int db) {
            off = {};
            off[a] = sa + da;
            off[b] = sb + db;
            return shifted(grid, node, off);
          };
          const auto pp = corner(1, 1), pm = corner(1, -1), mp = corner(-1, 1), mm = corner(-1, -1);
          if (pp && pm && mp && mm) {
            val = (u[*pp] - u[*pm] - u[*mp] + u[*mm]) /
                  (4.0 * grid.spacing(a) * grid.spacing(b));
            done = true;
            break;
          }
        }
        if (done) break;
      }
      out.hess[a][b] = out.hess[b][a] = val;
    }
  }
  return out;
}

std::vector<double> gradient_field(const Grid& grid, std::span<const double> values) {
  const int d = grid.dim();
  std::vector<double> g(grid.size() * d, 0.0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!grid.active(i)) continue;
    const auto der = derivatives_at(grid, values, i);
    for (int a = 0; a < d; ++a) g[i * d + a] = der.grad[a];
  }
  return g;
}

}  // namespace hjblab
