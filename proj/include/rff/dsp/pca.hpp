#pragma once

#include <Eigen/Dense>

namespace rff::dsp {

struct PcaResult {
  Eigen::MatrixXd projected;                 // [n_samples, k]
  Eigen::MatrixXd components;                // [k, n_channels], orthonormal rows
  Eigen::VectorXd explained_variance_ratio;  // [k], non-increasing
};

/// Projects mean-centered rows of X onto the top-k principal axes of the
/// sample covariance. Component signs are fixed so the largest-magnitude
/// coefficient of each component is positive.
PcaResult pca_reduce(const Eigen::MatrixXd& x, int k);

}  // namespace rff::dsp
