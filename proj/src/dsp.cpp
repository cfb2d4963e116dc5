#include "aver/dsp.hpp"

#include <cmath>
#include <numbers>

#include "aver/errors.hpp"

namespace aver {

namespace {

bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace

std::size_t mel_frame_count(std::size_t n_samples, const MelConfig& cfg) {
  require(cfg.window > 0 && cfg.hop > 0, "mel config: window and hop must be positive");
  require(n_samples >= static_cast<std::size_t>(cfg.window), "signal of ", n_samples,
          " samples is shorter than one ", cfg.window, "-sample analysis window");
  return (n_samples - static_cast<std::size_t>(cfg.window)) / static_cast<std::size_t>(cfg.hop) + 1;
}

std::vector<float> resample_linear(const std::vector<float>& x, int from_rate, int to_rate) {
  require(from_rate > 0 && to_rate > 0, "resample: rates must be positive");
  require(to_rate <= from_rate, "resample: cannot upsample from ", from_rate, " Hz to ", to_rate,
          " Hz");
  if (from_rate == to_rate) return x;
  require(!x.empty(), "resample: empty signal");

  const std::size_t out_len =
      x.size() * static_cast<std::size_t>(to_rate) / static_cast<std::size_t>(from_rate);
  std::vector<float> y(out_len);
  const double step = static_cast<double>(from_rate) / static_cast<double>(to_rate);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double pos = static_cast<double>(i) * step;
    std::size_t j = static_cast<std::size_t>(pos);
    if (j >= x.size() - 1) j = x.size() - 2;
    const double frac = pos - static_cast<double>(j);
    y[i] = static_cast<float>((1.0 - frac) * x[j] + frac * x[j + 1]);
  }
  return y;
}

std::vector<double> hann_periodic(int n) {
  require(n > 0, "hann window length must be positive");
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] =
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n));
  }
  return w;
}

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  const std::size_t n = re.size();
  require(im.size() == n, "fft: re and im lengths differ");
  require(is_power_of_two(n), "fft: length ", n, " is not a power of two");
  if (n == 1) return;

  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::size_t a = i + k, b = i + k + len / 2;
        const double tr = re[b] * cr - im[b] * ci;
        const double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

std::vector<double> power_spectrum(const std::vector<double>& frame, int nfft) {
  require(nfft > 0 && is_power_of_two(static_cast<std::size_t>(nfft)), "power_spectrum: nfft ",
          nfft, " is not a power of two");
  require(frame.size() <= static_cast<std::size_t>(nfft), "power_spectrum: frame of ",
          frame.size(), " samples exceeds nfft ", nfft);
  std::vector<double> re(frame);
  re.resize(static_cast<std::size_t>(nfft), 0.0);
  std::vector<double> im(static_cast<std::size_t>(nfft), 0.0);
  fft_radix2(re, im);
  std::vector<double> p(static_cast<std::size_t>(nfft) / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = re[k] * re[k] + im[k] * im[k];
  return p;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_filterbank(const MelConfig& cfg) {
  require(cfg.bands > 0, "mel filterbank: bands must be positive");
  require(cfg.fmin_hz >= 0.0 && cfg.fmax_hz > cfg.fmin_hz, "mel filterbank: need 0 <= fmin < fmax");
  require(cfg.fmax_hz <= cfg.sample_rate / 2.0, "mel filterbank: fmax ", cfg.fmax_hz,
          " Hz exceeds the Nyquist rate ", cfg.sample_rate / 2.0, " Hz");
  const std::size_t n_bins = static_cast<std::size_t>(cfg.nfft) / 2 + 1;

  // bands + 2 equally spaced points on the mel axis; filter m spans
  // [edge m, edge m+2] with its peak at edge m+1.
  std::vector<double> edges_hz(static_cast<std::size_t>(cfg.bands) + 2);
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.fmax_hz);
  for (std::size_t m = 0; m < edges_hz.size(); ++m) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(m) /
                                    static_cast<double>(cfg.bands + 1);
    edges_hz[m] = mel_to_hz(mel);
  }

  std::vector<double> fb(static_cast<std::size_t>(cfg.bands) * n_bins, 0.0);
  const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.nfft;
  for (int m = 0; m < cfg.bands; ++m) {
    const double lo = edges_hz[static_cast<std::size_t>(m)];
    const double mid = edges_hz[static_cast<std::size_t>(m) + 1];
    const double hi = edges_hz[static_cast<std::size_t>(m) + 2];
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double w = 0.0;
      if (f > lo && f < hi) {
        w = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      }
      fb[static_cast<std::size_t>(m) * n_bins + k] = w;
    }
  }
  return fb;
}

Tensor mel_spectrogram(const std::vector<float>& samples, int sample_rate, const MelConfig& cfg) {
  const std::vector<float> x = resample_linear(samples, sample_rate, cfg.sample_rate);
  const std::size_t frames = mel_frame_count(x.size(), cfg);
  require(cfg.window <= cfg.nfft, "mel config: window ", cfg.window, " exceeds nfft ", cfg.nfft);

  const std::vector<double> window = hann_periodic(cfg.window);
  const std::vector<double> fb = mel_filterbank(cfg);
  const std::size_t n_bins = static_cast<std::size_t>(cfg.nfft) / 2 + 1;

  std::vector<float> out(frames * static_cast<std::size_t>(cfg.bands));
  std::vector<double> frame(static_cast<std::size_t>(cfg.window));
  for (std::size_t fi = 0; fi < frames; ++fi) {
    const std::size_t start = fi * static_cast<std::size_t>(cfg.hop);
    for (int i = 0; i < cfg.window; ++i) {
      frame[static_cast<std::size_t>(i)] =
          static_cast<double>(x[start + static_cast<std::size_t>(i)]) *
          window[static_cast<std::size_t>(i)];
    }
    const std::vector<double> power = power_spectrum(frame, cfg.nfft);
    for (int m = 0; m < cfg.bands; ++m) {
      const double* w = fb.data() + static_cast<std::size_t>(m) * n_bins;
      double acc = 0.0;
      for (std::size_t k = 0; k < n_bins; ++k) acc += w[k] * power[k];
      out[fi * static_cast<std::size_t>(cfg.bands) + static_cast<std::size_t>(m)] =
          static_cast<float>(std::log(acc + 1e-10));
    }
  }
  return Tensor({static_cast<int>(frames), cfg.bands}, std::move(out));
}

}  // namespace aver
