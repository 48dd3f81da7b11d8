#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace repirl {

// log(sum(exp(x))) with max shift. Summation runs in index order so results
// are reproducible for a given input layout.
inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline void log_softmax_inplace(std::span<double> xs) {
  const double lse = log_sum_exp(xs);
  for (double& x : xs) x -= lse;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  log_softmax_inplace(out);
  for (double& x : out) x = std::exp(x);
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double z = std::exp(x);
  return z / (1.0 + z);
}

// log(sigmoid(x)) without cancellation for large |x|.
inline double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Rescales v in place so its L2 norm is at most max_norm. Returns the norm
// before clipping.
inline double clip_by_norm(std::span<double> v, double max_norm) {
  const double n = l2_norm(v);
  if (std::isfinite(max_norm) && n > max_norm && n > 0.0) {
    const double s = max_norm / n;
    for (double& x : v) x *= s;
  }
  return n;
}

}  // namespace repirl
