#include "rff/dsp/pca.hpp"

#include <Eigen/SVD>

#include "rff/core/errors.hpp"

namespace rff::dsp {

PcaResult pca_reduce(const Eigen::MatrixXd& x, int k) {
  const long n = x.rows(), c = x.cols();
  if (n < 2) throw UsageError("pca_reduce: need at least 2 samples, got " + std::to_string(n));
  if (k < 1 || k > std::min(n, c))
    throw UsageError("pca_reduce: k=" + std::to_string(k) + " out of range [1," +
                     std::to_string(std::min(n, c)) + "]");

  Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  // SVD route: X = U S V^T, principal axes are columns of V, variances
  // are S^2/(n-1).
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();

  PcaResult r;
  r.components.resize(k, c);
  r.projected.resize(n, k);
  r.explained_variance_ratio.resize(k);
  double total = s.array().square().sum();
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd v = svd.matrixV().col(i);
    // deterministic sign: largest-magnitude coefficient positive
    long arg;
    v.cwiseAbs().maxCoeff(&arg);
    double flip = v[arg] < 0 ? -1.0 : 1.0;
    r.components.row(i) = flip * v.transpose();
    r.projected.col(i) = flip * svd.matrixU().col(i) * s[i];
    r.explained_variance_ratio[i] = total > 0 ? s[i] * s[i] / total : 0.0;
  }
  return r;
}

}  // namespace rff::dsp
