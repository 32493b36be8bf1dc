#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace podyn {

/// A named contiguous slice of a flat parameter vector.
struct ParamGroup {
  std::string name;
  Eigen::Index start = 0;
  Eigen::Index size = 0;

  bool operator==(const ParamGroup&) const = default;
};

/// Ordered group table. Groups are disjoint and cover [0, size()) exactly once.
class Layout {
 public:
  Layout() = default;
  explicit Layout(std::vector<ParamGroup> groups);

  Eigen::Index size() const noexcept { return size_; }
  const std::vector<ParamGroup>& groups() const noexcept { return groups_; }

  /// Throws std::out_of_range for an unknown name.
  const ParamGroup& group(std::string_view name) const;

  bool operator==(const Layout&) const = default;

 private:
  std::vector<ParamGroup> groups_;
  Eigen::Index size_ = 0;
};

namespace detail {

/// Flat real vector tied to a group layout. The tag keeps parameters and
/// gradients from being mixed up at call sites.
template <typename Tag>
struct FlatVector {
  Eigen::VectorXd values;
  Layout layout;

  FlatVector() = default;
  explicit FlatVector(Layout l) : values(Eigen::VectorXd::Zero(l.size())), layout(std::move(l)) {}
  FlatVector(Eigen::VectorXd v, Layout l) : values(std::move(v)), layout(std::move(l)) {}

  Eigen::Index size() const noexcept { return values.size(); }

  auto segment(std::string_view group_name) {
    const auto& g = layout.group(group_name);
    return values.segment(g.start, g.size);
  }
  auto segment(std::string_view group_name) const {
    const auto& g = layout.group(group_name);
    return values.segment(g.start, g.size);
  }

  bool all_finite() const { return values.allFinite(); }

  bool operator==(const FlatVector&) const = default;
};

struct ParamTag {};
struct GradTag {};

}  // namespace detail

using ParamVector = detail::FlatVector<detail::ParamTag>;
using GradVector = detail::FlatVector<detail::GradTag>;

/// Zero gradient laid out like `params`.
inline GradVector zeros_like(const ParamVector& params) { return GradVector(params.layout); }

/// Dot product, optionally restricted to one parameter group.
/// Throws std::invalid_argument when the layouts differ.
double dot(const GradVector& a, const GradVector& b,
           const std::optional<std::string>& group = std::nullopt);

double norm(const GradVector& g);

}  // namespace podyn
