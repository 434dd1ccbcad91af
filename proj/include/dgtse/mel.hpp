// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_MEL_HPP_
#define DGTSE_MEL_HPP_

#include <cmath>

#include "dgtse/common.hpp"
#include "dgtse/signal.hpp"

namespace dgtse {

struct MelConfig {
  StftConfig stft{512, 512, 256};
  int n_mels = 80;
  int sample_rate = 16000;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means Nyquist
};

inline void validate(const MelConfig& cfg) {
  validate(cfg.stft);
  if (cfg.n_mels <= 0) throw ConfigError("mel: n_mels must be positive");
  if (cfg.sample_rate <= 0) throw ConfigError("mel: sample_rate must be positive");
  double fmax = cfg.fmax > 0 ? cfg.fmax : cfg.sample_rate / 2.0;
  if (cfg.fmin < 0 || cfg.fmin >= fmax) throw ConfigError("mel: bad fmin/fmax");
}

namespace mel_detail {

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

}  // namespace mel_detail

// Triangular filterbank on the HTK mel scale, peak height 1 (no area
// normalization). Shape [n_mels, bins].
inline torch::Tensor mel_filterbank(const MelConfig& cfg,
                                    torch::TensorOptions opts = {}) {
  validate(cfg);
  const int bins = cfg.stft.bins();
  const double fmax = cfg.fmax > 0 ? cfg.fmax : cfg.sample_rate / 2.0;
  const double m_lo = mel_detail::hz_to_mel(cfg.fmin);
  const double m_hi = mel_detail::hz_to_mel(fmax);
  std::vector<double> edges(cfg.n_mels + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    edges[i] = mel_detail::mel_to_hz(m_lo + (m_hi - m_lo) * i / (cfg.n_mels + 1));

  auto fb = torch::zeros({cfg.n_mels, bins}, torch::kDouble);
  auto acc = fb.accessor<double, 2>();
  for (int i = 0; i < cfg.n_mels; ++i) {
    const double lo = edges[i], mid = edges[i + 1], hi = edges[i + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.stft.fft_size;
      double up = (f - lo) / (mid - lo);
      double down = (hi - f) / (hi - mid);
      double v = std::min(up, down);
      if (v > 0) acc[i][k] = v;
    }
  }
  return fb.to(opts);
}

// Log mel spectrogram: log(filterbank @ |X|^2 + 1e-10).
// x: [n] or [B, n] -> [n_mels, T] or [B, n_mels, T].
inline torch::Tensor log_mel(const torch::Tensor& x, const MelConfig& cfg) {
  validate(cfg);
  auto spec = stft(x, cfg.stft);
  auto opts = torch::TensorOptions().dtype(spec.real.dtype()).device(spec.real.device());
  auto fb = mel_filterbank(cfg, opts);
  return torch::log(torch::matmul(fb, spec.power()) + 1e-10);
}

}  // namespace dgtse

#endif  // DGTSE_MEL_HPP_
