#pragma once

#include "rff/dsp/series.hpp"

namespace rff::dsp {

/// Sliding median with replicate edge padding; output length equals input
/// length. The window must be odd and no longer than the series.
RealSeries median_filter(const RealSeries& x, int window = 5);

}  // namespace rff::dsp
