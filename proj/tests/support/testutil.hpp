#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

namespace testutil {

inline double rel_err(double got, double want) {
  const double denom = std::max({std::fabs(got), std::fabs(want), 1e-12});
  return std::fabs(got - want) / denom;
}

inline double rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  double diff = 0.0, ng = 0.0, nw = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    diff += (got[i] - want[i]) * (got[i] - want[i]);
    ng += got[i] * got[i];
    nw += want[i] * want[i];
  }
  const double denom = std::max({std::sqrt(ng), std::sqrt(nw), 1e-12});
  return std::sqrt(diff) / denom;
}

/// Central difference d f / d x.
inline double central_diff(const std::function<double(double)>& f, double x, double eps) {
  return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo,
                                         double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

}  // namespace testutil
