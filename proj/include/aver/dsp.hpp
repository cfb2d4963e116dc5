#pragma once

// Audio frontend: linear-interpolation resampling, a radix-2 FFT, and an
// HTK-mel log spectrogram. All spectral arithmetic runs in double and the
// final spectrogram is stored as float.

#include <cstddef>
#include <vector>

#include "aver/tensor.hpp"

namespace aver {

struct MelConfig {
  int sample_rate = 16000;  // analysis rate; inputs are resampled down to it
  int window = 640;         // 40 ms at 16 kHz
  int hop = 640;            // non-overlapping frames
  int nfft = 1024;          // window is zero-padded up to this
  int bands = 128;
  double fmin_hz = 125.0;
  double fmax_hz = 7500.0;
};

// Number of analysis frames for n samples: floor((n - window) / hop) + 1.
// Requires n >= window.
std::size_t mel_frame_count(std::size_t n_samples, const MelConfig& cfg);

// Linear-interpolation resampler. Output length is floor(n * to / from).
// Only downsampling (or the identity) is supported; upsampling would
// fabricate bandwidth the recording never had.
std::vector<float> resample_linear(const std::vector<float>& x, int from_rate, int to_rate);

// Periodic Hann window of length n: 0.5 * (1 - cos(2 pi i / n)).
std::vector<double> hann_periodic(int n);

// In-place radix-2 decimation-in-time FFT. Lengths must be a power of two.
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

// |X[k]|^2 for k = 0..nfft/2 of a zero-padded real frame.
std::vector<double> power_spectrum(const std::vector<double>& frame, int nfft);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular peak-one filterbank on the HTK mel scale, returned row-major as
// [bands, nfft/2 + 1].
std::vector<double> mel_filterbank(const MelConfig& cfg);

// Log mel spectrogram [frames, bands] of a mono signal. The signal is
// resampled to cfg.sample_rate first; each frame is Hann-windowed,
// zero-padded to nfft, and reduced to log(filterbank . power + 1e-10).
Tensor mel_spectrogram(const std::vector<float>& samples, int sample_rate,
                       const MelConfig& cfg = {});

}  // namespace aver
