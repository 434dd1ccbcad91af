// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_MIXING_HPP_
#define DGTSE_MIXING_HPP_

#include <cmath>

#include "dgtse/common.hpp"

namespace dgtse {

// Two-speaker mixing at a requested signal-to-noise ratio. The interferer is
// fitted to the target length (cropped, or tiled then cropped), scaled so the
// power ratio hits snr_db exactly, and summed with the target. If the sum
// clips, all three signals are scaled down together, which leaves the ratio
// untouched. `mixture == target + interferer` holds sample for sample on the
// returned tensors.
struct MixResult {
  torch::Tensor mixture;
  torch::Tensor target;      // possibly rescaled copy of the input target
  torch::Tensor interferer;  // gain-adjusted, length-matched interferer
  double gain = 1.0;         // interferer gain before any clip rescale
  double rescale = 1.0;      // joint scale applied to avoid clipping
};

inline torch::Tensor fit_length(const torch::Tensor& x, int64_t length) {
  if (!x.defined() || x.numel() == 0) throw EmptySignal("fit_length: empty input");
  if (x.dim() != 1) throw ShapeError("fit_length: expected 1-D input");
  if (length <= 0) throw ConfigError("fit_length: length must be positive");
  auto y = x;
  if (y.size(0) < length) {
    int64_t reps = (length + y.size(0) - 1) / y.size(0);
    y = y.repeat({reps});
  }
  return y.narrow(0, 0, length).contiguous();
}

inline MixResult mix_at_snr(const torch::Tensor& target,
                            const torch::Tensor& interferer, double snr_db) {
  if (!target.defined() || target.numel() == 0)
    throw EmptySignal("mix_at_snr: empty target");
  if (target.dim() != 1) throw ShapeError("mix_at_snr: expected 1-D target");
  auto interf = fit_length(interferer, target.size(0));

  auto t = target.to(torch::kDouble);
  auto i = interf.to(torch::kDouble);
  const double pt = (t * t).mean().item<double>();
  const double pi = (i * i).mean().item<double>();
  if (pt <= 0.0) throw DegenerateSignal("mix_at_snr: zero-energy target");
  if (pi <= 0.0) throw DegenerateSignal("mix_at_snr: zero-energy interferer");

  MixResult out;
  out.gain = std::sqrt(pt / (pi * std::pow(10.0, snr_db / 10.0)));
  auto scaled_i = i * out.gain;
  auto mix = t + scaled_i;
  const double peak = mix.abs().max().item<double>();
  if (peak > 1.0) {
    out.rescale = 1.0 / peak;
    t = t * out.rescale;
    scaled_i = scaled_i * out.rescale;
    mix = t + scaled_i;
  }
  auto dt = target.scalar_type();
  out.target = t.to(dt);
  out.interferer = scaled_i.to(dt);
  out.mixture = (out.target + out.interferer);
  return out;
}

}  // namespace dgtse

#endif  // DGTSE_MIXING_HPP_
