#pragma once

#include <algorithm>
#include <functional>

#include "rff/nn/tensor.hpp"

namespace rff::nn {

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences (f(x+h)-f(x-h))/2h, coordinate-wise. Returns
/// the maximum relative error over the checked coordinates. When
/// max_coords > 0 only that many coordinates are checked, sampled
/// deterministically from `seed`.
template <typename S, typename F>
double finite_difference_check(F f, Tensor<S> x, double h = 1e-4, int max_coords = -1,
                               uint64_t seed = 0) {
  x.set_requires_grad(true);
  Tensor<S> y = f(x);
  if (y.size() != 1) throw UsageError("finite_difference_check: f must return a scalar");
  x.zero_grad();
  backward(y);
  Eigen::Matrix<S, Eigen::Dynamic, 1> ad = x.grad();

  std::vector<long> coords;
  if (max_coords > 0 && max_coords < x.size()) {
    Rng rng(seed, 0x9d);
    auto picks = rng.sample_without_replacement(static_cast<int>(x.size()), max_coords);
    coords.assign(picks.begin(), picks.end());
  } else {
    coords.resize(static_cast<size_t>(x.size()));
    std::iota(coords.begin(), coords.end(), 0L);
  }

  const double grad_scale = static_cast<double>(ad.template lpNorm<Eigen::Infinity>());
  double max_rel = 0.0;
  for (long i : coords) {
    const S orig = x.data()[i];
    x.data()[i] = orig + static_cast<S>(h);
    double fp = static_cast<double>(f(x).item());
    x.data()[i] = orig - static_cast<S>(h);
    double fm = static_cast<double>(f(x).item());
    x.data()[i] = orig;
    double fd = (fp - fm) / (2.0 * h);
    double a = static_cast<double>(ad[i]);
    double denom = std::max({std::abs(a), std::abs(fd), 1e-3 * grad_scale, 1e-12});
    max_rel = std::max(max_rel, std::abs(a - fd) / denom);
  }
  return max_rel;
}

}  // namespace rff::nn
