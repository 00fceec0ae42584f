#pragma once

#include <Eigen/Dense>
#include <complex>

namespace rff::dsp {

struct RealSeries {
  Eigen::VectorXd samples;
  double sample_rate = 1.0;  // Hz
};

struct ComplexSeries {
  Eigen::VectorXcd samples;
  double sample_rate = 1.0;  // Hz
};

}  // namespace rff::dsp
