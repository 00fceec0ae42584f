#pragma once

#include <vector>

#include "rff/dsp/series.hpp"

namespace rff::dsp {

/// Multi-level periodized Daubechies-4 decomposition. `approx` holds the
/// coarsest approximation, `details[l]` the detail band of level l+1
/// (details[0] is the finest). Odd-length bands are extended by repeating
/// the last sample; `lengths` records the pre-extension length per level so
/// the inverse can truncate back.
struct WaveletPyramid {
  Eigen::VectorXd approx;
  std::vector<Eigen::VectorXd> details;
  std::vector<int> lengths;
};

WaveletPyramid dwt_decompose(const Eigen::VectorXd& x, int levels);
Eigen::VectorXd dwt_reconstruct(const WaveletPyramid& pyramid);

/// DWT denoising: soft-thresholds every detail band at the universal
/// threshold sigma*sqrt(2 ln n), sigma estimated from the finest band as
/// median(|d1|)/0.6745. threshold_scale multiplies the threshold (0 turns
/// the operation into a perfect-reconstruction identity).
RealSeries dwt_denoise(const RealSeries& x, int levels = 4, double threshold_scale = 1.0);

}  // namespace rff::dsp
