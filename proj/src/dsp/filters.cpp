#include "rff/dsp/filters.hpp"

#include <algorithm>
#include <vector>

#include "rff/core/errors.hpp"

namespace rff::dsp {

RealSeries median_filter(const RealSeries& x, int window) {
  const long n = x.samples.size();
  if (window % 2 == 0)
    throw UsageError("median_filter: window must be odd, got " + std::to_string(window));
  if (window > n)
    throw UsageError("median_filter: window " + std::to_string(window) +
                     " exceeds series length " + std::to_string(n));
  const int half = window / 2;
  RealSeries out{Eigen::VectorXd(n), x.sample_rate};
  std::vector<double> buf(static_cast<size_t>(window));
  for (long i = 0; i < n; ++i) {
    for (int k = -half; k <= half; ++k) {
      long j = std::clamp(i + k, 0L, n - 1);
      buf[static_cast<size_t>(k + half)] = x.samples[j];
    }
    auto mid = buf.begin() + half;
    std::nth_element(buf.begin(), mid, buf.end());
    out.samples[i] = *mid;
  }
  return out;
}

}  // namespace rff::dsp
