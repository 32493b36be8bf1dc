#include "podyn/params.hpp"

#include <stdexcept>

namespace podyn {

Layout::Layout(std::vector<ParamGroup> groups) : groups_(std::move(groups)) {
  Eigen::Index next = 0;
  for (const auto& g : groups_) {
    if (g.start != next || g.size < 0) {
      throw std::invalid_argument("layout group '" + g.name + "' does not continue at offset " +
                                  std::to_string(next));
    }
    next += g.size;
  }
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    for (std::size_t j = i + 1; j < groups_.size(); ++j) {
      if (groups_[i].name == groups_[j].name) {
        throw std::invalid_argument("duplicate layout group '" + groups_[i].name + "'");
      }
    }
  }
  size_ = next;
}

const ParamGroup& Layout::group(std::string_view name) const {
  for (const auto& g : groups_) {
    if (g.name == name) return g;
  }
  throw std::out_of_range("no parameter group named '" + std::string(name) + "'");
}

double dot(const GradVector& a, const GradVector& b, const std::optional<std::string>& group) {
  if (!(a.layout == b.layout) || a.size() != b.size()) {
    throw std::invalid_argument("gradient layouts differ");
  }
  if (!group) return a.values.dot(b.values);
  return a.segment(*group).dot(b.segment(*group));
}

double norm(const GradVector& g) { return g.values.norm(); }

}  // namespace podyn
