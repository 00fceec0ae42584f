#pragma once

#include "rff/dsp/series.hpp"

namespace rff::dsp {

/// Hann-windowed magnitude STFT. Output is [n_fft/2+1, n_frames] with
/// n_frames = floor((len - win_len)/hop) + 1.
Eigen::MatrixXd stft_spectrogram(const RealSeries& x, int win_len = 128, int hop = 8,
                                 int n_fft = 256);

/// Center frequency (cycles per unit time at scale 1) of the analytic
/// Morlet wavelet used by cwt_scalogram.
inline constexpr double kMorletCenterFreq = 0.8125;

/// |CWT| with an analytic Morlet mother wavelet, one linear convolution per
/// scale (scales in samples, ascending). Output is [n_scales, len].
Eigen::MatrixXd cwt_scalogram(const RealSeries& x, const Eigen::VectorXd& scales);

/// n log-spaced scales covering [s_min, s_max].
Eigen::VectorXd log_spaced_scales(double s_min, double s_max, int n);

/// Scale whose Morlet response peaks at frequency f (Hz).
inline double morlet_scale_for_frequency(double f, double sample_rate) {
  return kMorletCenterFreq * sample_rate / f;
}

}  // namespace rff::dsp
