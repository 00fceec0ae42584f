#include "rff/dsp/wavelet.hpp"

#include <algorithm>
#include <cmath>

#include "rff/core/errors.hpp"

namespace rff::dsp {

namespace {

// db4 orthonormal scaling filter (8 taps); the wavelet filter is the
// alternating-sign reverse.
constexpr int kTaps = 8;
constexpr double kScaling[kTaps] = {
    0.23037781330885523,   0.7148465705525415,   0.6308807679295904,
    -0.02798376941698385,  -0.18703481171888114, 0.030841381835986965,
    0.032883011666982945,  -0.010597401784997278,
};

double wavelet_tap(int k) {
  return (k % 2 == 0 ? 1.0 : -1.0) * kScaling[kTaps - 1 - k];
}

// One periodized analysis step on an even-length vector.
void analysis_step(const Eigen::VectorXd& x, Eigen::VectorXd& approx, Eigen::VectorXd& detail) {
  const int n = static_cast<int>(x.size());
  const int half = n / 2;
  approx.setZero(half);
  detail.setZero(half);
  for (int i = 0; i < half; ++i) {
    double a = 0, d = 0;
    for (int k = 0; k < kTaps; ++k) {
      double v = x[(2 * i + k) % n];
      a += kScaling[k] * v;
      d += wavelet_tap(k) * v;
    }
    approx[i] = a;
    detail[i] = d;
  }
}

// Adjoint of analysis_step; exact inverse because the filter bank is
// orthonormal.
Eigen::VectorXd synthesis_step(const Eigen::VectorXd& approx, const Eigen::VectorXd& detail) {
  const int half = static_cast<int>(approx.size());
  const int n = 2 * half;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < half; ++i) {
    for (int k = 0; k < kTaps; ++k) {
      x[(2 * i + k) % n] += kScaling[k] * approx[i] + wavelet_tap(k) * detail[i];
    }
  }
  return x;
}

double median_abs(const Eigen::VectorXd& v) {
  std::vector<double> a(static_cast<size_t>(v.size()));
  for (long i = 0; i < v.size(); ++i) a[static_cast<size_t>(i)] = std::abs(v[i]);
  size_t mid = a.size() / 2;
  std::nth_element(a.begin(), a.begin() + static_cast<long>(mid), a.end());
  double hi = a[mid];
  if (a.size() % 2 == 1) return hi;
  std::nth_element(a.begin(), a.begin() + static_cast<long>(mid) - 1, a.end());
  return 0.5 * (a[mid - 1] + hi);
}

}  // namespace

WaveletPyramid dwt_decompose(const Eigen::VectorXd& x, int levels) {
  if (levels < 1) throw UsageError("dwt: levels must be >= 1");
  if (x.size() < (1L << levels))
    throw UsageError("dwt: series of length " + std::to_string(x.size()) +
                     " too short for " + std::to_string(levels) + " levels");
  WaveletPyramid p;
  Eigen::VectorXd cur = x;
  for (int l = 0; l < levels; ++l) {
    p.lengths.push_back(static_cast<int>(cur.size()));
    if (cur.size() % 2 == 1) {
      Eigen::VectorXd padded(cur.size() + 1);
      padded.head(cur.size()) = cur;
      padded[cur.size()] = cur[cur.size() - 1];
      cur.swap(padded);
    }
    Eigen::VectorXd approx, detail;
    analysis_step(cur, approx, detail);
    p.details.push_back(std::move(detail));
    cur = std::move(approx);
  }
  p.approx = std::move(cur);
  return p;
}

Eigen::VectorXd dwt_reconstruct(const WaveletPyramid& p) {
  Eigen::VectorXd cur = p.approx;
  for (int l = static_cast<int>(p.details.size()) - 1; l >= 0; --l) {
    cur = synthesis_step(cur, p.details[static_cast<size_t>(l)]);
    cur.conservativeResize(p.lengths[static_cast<size_t>(l)]);
  }
  return cur;
}

RealSeries dwt_denoise(const RealSeries& x, int levels, double threshold_scale) {
  if (x.sample_rate <= 0) throw UsageError("dwt_denoise: sample rate must be positive");
  WaveletPyramid p = dwt_decompose(x.samples, levels);
  const double n = static_cast<double>(x.samples.size());
  const double sigma = median_abs(p.details.front()) / 0.6745;
  const double threshold = threshold_scale * sigma * std::sqrt(2.0 * std::log(n));
  for (auto& d : p.details) {
    for (long i = 0; i < d.size(); ++i) {
      double v = d[i];
      double mag = std::abs(v) - threshold;
      d[i] = mag > 0 ? (v > 0 ? mag : -mag) : 0.0;
    }
  }
  return {dwt_reconstruct(p), x.sample_rate};
}

}  // namespace rff::dsp
