#include "podyn/stats.hpp"

#include "podyn/errors.hpp"

#include <algorithm>
#include <cmath>

namespace podyn {
namespace {

double interpolate_sorted(const std::vector<double>& sorted, double alpha) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * std::clamp(alpha, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

double quantile(std::span<const double> values, double alpha) {
  const double a[] = {alpha};
  return quantiles(values, a).front();
}

std::vector<double> quantiles(std::span<const double> values, std::span<const double> alphas) {
  if (values.empty()) throw PartitionError("quantile of an empty sample");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  out.reserve(alphas.size());
  for (double a : alphas) out.push_back(interpolate_sorted(sorted, a));
  return out;
}

Moments moments(std::span<const double> values) {
  Moments m;
  if (values.empty()) return m;
  double sum = 0.0;
  for (double v : values) sum += v;
  m.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.stddev = std::sqrt(ss / static_cast<double>(values.size()));
  return m;
}

}  // namespace podyn
