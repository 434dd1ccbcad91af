// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_SIGNAL_HPP_
#define DGTSE_SIGNAL_HPP_

#include <cmath>
#include <string>

#include "dgtse/common.hpp"

namespace dgtse {

// Short-time Fourier analysis built from matrix products so that gradients
// flow through both directions. Framing convention: the signal is reflect
// padded by win_length/2 on the left, reflect padded by win_length/2 plus
// whatever is needed to reach a hop multiple on the right, then sliced into
// windows. A signal of n samples therefore yields ceil(n/hop) + 1 frames and
// frame t is centered on sample t*hop.

struct StftConfig {
  int fft_size = 320;
  int win_length = 320;
  int hop_length = 160;

  int bins() const { return fft_size / 2 + 1; }
};

inline void validate(const StftConfig& cfg) {
  if (cfg.fft_size <= 0 || cfg.win_length <= 0 || cfg.hop_length <= 0)
    throw ConfigError("stft: sizes must be positive");
  if (cfg.fft_size % 2 != 0) throw ConfigError("stft: fft_size must be even");
  if (cfg.win_length > cfg.fft_size)
    throw ConfigError("stft: win_length exceeds fft_size");
  if (cfg.hop_length > cfg.win_length)
    throw ConfigError("stft: hop_length exceeds win_length");
  // Nonzero-overlap-add: every sample position inside the stream must be
  // covered by at least one nonzero squared window sample, otherwise the
  // least-squares inverse divides by zero.
  std::vector<double> cover(cfg.hop_length, 0.0);
  for (int i = 0; i < cfg.win_length; ++i) {
    double w = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / cfg.win_length);
    cover[i % cfg.hop_length] += w * w;
  }
  for (double c : cover)
    if (c <= 1e-10) throw ConfigError("stft: window/hop pair violates NOLA");
}

struct ComplexSpectrogram {
  torch::Tensor real;  // [..., bins, frames]
  torch::Tensor imag;  // [..., bins, frames]

  torch::Tensor magnitude(double eps = 0.0) const {
    return torch::sqrt(real * real + imag * imag + eps);
  }
  torch::Tensor power() const { return real * real + imag * imag; }
};

inline int64_t stft_frames(int64_t n_samples, const StftConfig& cfg) {
  return (n_samples + cfg.hop_length - 1) / cfg.hop_length + 1;
}

namespace signal_detail {

// Periodic Hann, the analysis and synthesis window used throughout.
inline torch::Tensor hann(int win_length, torch::TensorOptions opts) {
  return torch::hann_window(win_length, /*periodic=*/true,
                            opts.dtype(torch::kDouble))
      .to(opts.dtype());
}

// Real-DFT bases. cos_basis[k, t] = cos(2 pi k t / N) for k in [0, N/2],
// sin_basis likewise. Built in double and cast so that double inputs keep
// full precision.
inline std::pair<torch::Tensor, torch::Tensor> dft_bases(
    int fft_size, torch::TensorOptions opts) {
  auto d = opts.dtype(torch::kDouble);
  auto k = torch::arange(fft_size / 2 + 1, d).unsqueeze(1);
  auto t = torch::arange(fft_size, d).unsqueeze(0);
  auto phase = 2.0 * M_PI * k * t / static_cast<double>(fft_size);
  return {torch::cos(phase).to(opts.dtype()), torch::sin(phase).to(opts.dtype())};
}

}  // namespace signal_detail

// x: [n] or [B, n]. Returns real/imag of shape [bins, T] or [B, bins, T].
inline ComplexSpectrogram stft(const torch::Tensor& x, const StftConfig& cfg) {
  validate(cfg);
  if (!x.defined() || x.numel() == 0) throw EmptySignal("stft: empty input");
  if (x.dim() != 1 && x.dim() != 2) throw ShapeError("stft: expected 1-D or 2-D input");
  const bool batched = x.dim() == 2;
  auto xb = batched ? x : x.unsqueeze(0);
  const int64_t n = xb.size(1);
  const int64_t half = cfg.win_length / 2;
  if (n < half + 1)
    throw ShapeError("stft: input shorter than win_length/2 + 1 samples");

  const int64_t n_hop = ((n + cfg.hop_length - 1) / cfg.hop_length) * cfg.hop_length;
  namespace F = torch::nn::functional;
  auto padded = F::pad(xb.unsqueeze(1),
                       F::PadFuncOptions({half, half + (n_hop - n)})
                           .mode(torch::kReflect))
                    .squeeze(1);

  // [B, 1, L, 1] -> [B, win, T] -> [B, T, win]
  auto frames = F::unfold(padded.unsqueeze(1).unsqueeze(-1),
                          F::UnfoldFuncOptions({cfg.win_length, 1})
                              .stride({cfg.hop_length, 1}))
                    .transpose(1, 2);
  auto opts = torch::TensorOptions().dtype(xb.dtype()).device(xb.device());
  frames = frames * signal_detail::hann(cfg.win_length, opts);
  if (cfg.win_length < cfg.fft_size)
    frames = F::pad(frames, F::PadFuncOptions({0, cfg.fft_size - cfg.win_length}));

  auto [cosb, sinb] = signal_detail::dft_bases(cfg.fft_size, opts);
  ComplexSpectrogram out;
  out.real = torch::matmul(frames, cosb.transpose(0, 1)).transpose(1, 2);
  out.imag = -torch::matmul(frames, sinb.transpose(0, 1)).transpose(1, 2);
  if (!batched) {
    out.real = out.real.squeeze(0);
    out.imag = out.imag.squeeze(0);
  }
  return out;
}

// Least-squares inverse of `stft`: inverse DFT per frame, windowed
// overlap-add with a squared-window normalizer, then the padding introduced
// by the forward transform is trimmed. `length` selects how many samples to
// return; it must not exceed (frames - 1) * hop.
inline torch::Tensor istft(const ComplexSpectrogram& spec, const StftConfig& cfg,
                           int64_t length) {
  validate(cfg);
  if (!spec.real.defined() || spec.real.numel() == 0)
    throw EmptySignal("istft: empty input");
  if (!spec.real.sizes().equals(spec.imag.sizes()))
    throw ShapeError("istft: real/imag shape mismatch");
  if (spec.real.dim() != 2 && spec.real.dim() != 3)
    throw ShapeError("istft: expected [bins, T] or [B, bins, T]");
  const bool batched = spec.real.dim() == 3;
  auto re = batched ? spec.real : spec.real.unsqueeze(0);
  auto im = batched ? spec.imag : spec.imag.unsqueeze(0);
  if (re.size(1) != cfg.bins()) throw ShapeError("istft: bin count mismatch");
  const int64_t T = re.size(2);
  const int64_t reconstructable = (T - 1) * cfg.hop_length;
  if (length <= 0 || length > reconstructable)
    throw ShapeError("istft: requested length outside reconstructable range");

  auto opts = torch::TensorOptions().dtype(re.dtype()).device(re.device());
  auto [cosb, sinb] = signal_detail::dft_bases(cfg.fft_size, opts);
  // x[n] = (1/N) sum_k alpha_k (re_k cos - im_k sin), alpha = 1 at DC and
  // Nyquist, 2 elsewhere, the usual real-spectrum fold.
  auto alpha = torch::full({cfg.bins(), 1}, 2.0, opts);
  alpha[0][0] = 1.0;
  alpha[cfg.bins() - 1][0] = 1.0;
  auto reT = (re * alpha).transpose(1, 2);  // [B, T, bins]
  auto imT = (im * alpha).transpose(1, 2);
  auto frames = (torch::matmul(reT, cosb) - torch::matmul(imT, sinb)) /
                static_cast<double>(cfg.fft_size);  // [B, T, fft]
  frames = frames.narrow(2, 0, cfg.win_length);

  namespace F = torch::nn::functional;
  auto win = signal_detail::hann(cfg.win_length, opts);
  const int64_t out_len = reconstructable + cfg.win_length;
  auto fold = [&](const torch::Tensor& fr) {
    return F::fold(fr.transpose(1, 2),
                   F::FoldFuncOptions({out_len, 1}, {cfg.win_length, 1})
                       .stride({cfg.hop_length, 1}))
        .squeeze(-1)
        .squeeze(1);  // [B, out_len]
  };
  auto num = fold(frames * win);
  auto den = fold((win * win).expand({re.size(0), T, cfg.win_length}));
  auto x = num / torch::clamp(den, 1e-8);
  x = x.narrow(1, cfg.win_length / 2, length);
  return batched ? x : x.squeeze(0);
}

}  // namespace dgtse

#endif  // DGTSE_SIGNAL_HPP_
