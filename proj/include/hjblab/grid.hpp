#pragma once

#include "hjblab/linalg.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace hjblab {

inline constexpr int kMaxGridDim = 3;

enum class NodeKind : std::uint8_t { Interior, Boundary, Masked };

/// Rule that fills a boundary node by quadratic extrapolation along one axis:
/// u = 3 u1 - 3 u2 + u3, which keeps the second difference constant.
struct ExtrapolationRule {
  std::size_t node;
  std::array<std::size_t, 3> sources;
};

/// Tensor-product grid on a truncated box, optionally masked by a membership
/// predicate (the SPD cone in the vectorized matrix setting).
class Grid {
 public:
  using Membership = std::function<bool(const Vec&)>;

  Grid(std::vector<double> lo, std::vector<double> hi, std::vector<int> counts,
       Membership active = {});

  int dim() const { return static_cast<int>(counts_.size()); }
  std::size_t size() const { return size_; }
  int count(int axis) const { return counts_[axis]; }
  double lo(int axis) const { return lo_[axis]; }
  double hi(int axis) const { return hi_[axis]; }
  double spacing(int axis) const { return spacing_[axis]; }
  std::size_t stride(int axis) const { return strides_[axis]; }
  bool masked() const { return has_mask_; }

  std::array<int, kMaxGridDim> multi_index(std::size_t flat) const;
  std::size_t flat_index(const std::array<int, kMaxGridDim>& idx) const;
  Vec node(std::size_t flat) const;
  double coord(int axis, int i) const { return lo_[axis] + i * spacing_[axis]; }

  NodeKind kind(std::size_t flat) const { return kinds_[flat]; }
  bool active(std::size_t flat) const { return kinds_[flat] != NodeKind::Masked; }
  bool interior(std::size_t flat) const { return kinds_[flat] == NodeKind::Interior; }

  /// Neighbor at `offset` cells along `axis`; empty when out of bounds or masked.
  std::optional<std::size_t> neighbor(std::size_t flat, int axis, int offset) const;

  /// Active node nearest to x (Euclidean in coordinates).
  std::size_t nearest(const Vec& x) const;

  bool contains(const Vec& x) const;
  bool same_layout(const Grid& other) const;

  const std::vector<ExtrapolationRule>& extrapolation_rules() const { return rules_; }
  /// Boundary nodes that no extrapolation rule could reach; the stepper
  /// advances them with one-sided stencils instead.
  const std::vector<std::size_t>& unreachable_boundary() const { return unreachable_; }

  /// Apply the extrapolation rules in place.
  void extrapolate(std::span<double> values) const;

  /// Multilinear interpolation; cells touching a masked node fall back to the
  /// nearest active node.
  double interpolate(std::span<const double> values, const Vec& x) const;

 private:
  void classify(const Membership& active);
  void build_rules();

  std::vector<double> lo_, hi_, spacing_;
  std::vector<int> counts_;
  std::vector<std::size_t> strides_;
  std::size_t size_ = 0;
  bool has_mask_ = false;
  std::vector<NodeKind> kinds_;
  std::vector<ExtrapolationRule> rules_;
  std::vector<std::size_t> unreachable_;
};

using GridPtr = std::shared_ptr<const Grid>;

/// Per-node derivative estimates of a grid field.
struct NodeDerivatives {
  std::array<double, kMaxGridDim> grad{};
  std::array<std::array<double, kMaxGridDim>, kMaxGridDim> hess{};
};

enum class StencilScheme { Central, OneSided };

struct OperatorStencil {
  std::array<double, kMaxGridDim> spacing{};
  StencilScheme scheme = StencilScheme::Central;
  std::size_t node = 0;
};

OperatorStencil stencil_at(const Grid& grid, std::size_t node);

/// Second-order finite differences: central at interior nodes, one-sided
/// (equivalent to a quadratically extrapolated ghost node) where a neighbor
/// is missing.
NodeDerivatives derivatives_at(const Grid& grid, std::span<const double> values,
                               std::size_t node);

/// Gradient at every node, flattened as node * dim + axis.
std::vector<double> gradient_field(const Grid& grid, std::span<const double> values);

}  // namespace hjblab
