#pragma once

#include <span>
#include <vector>

namespace podyn {

/// Empirical alpha-quantile by linear interpolation on the sorted sample:
/// h = (n-1) alpha, q = x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h]).
/// Throws PartitionError on empty input.
double quantile(std::span<const double> values, double alpha);

/// Same as quantile() for several alphas, sorting once.
std::vector<double> quantiles(std::span<const double> values, std::span<const double> alphas);

struct Moments {
  double mean = 0.0;
  /// Population standard deviation.
  double stddev = 0.0;
};

Moments moments(std::span<const double> values);

}  // namespace podyn
