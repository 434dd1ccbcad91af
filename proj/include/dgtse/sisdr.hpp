// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_SISDR_HPP_
#define DGTSE_SISDR_HPP_

#include "dgtse/common.hpp"

namespace dgtse {

// Scale-invariant signal-to-distortion ratio. The reference is rescaled to
// the projection of the estimate onto it, the residual counts as distortion:
//   s_t = <est, ref> ref / ||ref||^2,  e = est - s_t,
//   si_sdr = 10 log10(||s_t||^2 / ||e||^2).
// Internals run in double. The ratio is pinned to [1e-6, 1e6], so values
// saturate at +-60 dB instead of overflowing when the residual vanishes.

namespace sisdr_detail {

inline torch::Tensor ratio(const torch::Tensor& est, const torch::Tensor& ref,
                           const char* who) {
  if (!est.defined() || est.numel() == 0 || !ref.defined() || ref.numel() == 0)
    throw EmptySignal(std::string(who) + ": empty input");
  if (!est.sizes().equals(ref.sizes()))
    throw ShapeError(std::string(who) + ": estimate/reference shape mismatch");
  if (est.dim() != 1 && est.dim() != 2)
    throw ShapeError(std::string(who) + ": expected 1-D or 2-D input");
  auto e = (est.dim() == 1 ? est.unsqueeze(0) : est).to(torch::kDouble);
  auto r = (ref.dim() == 1 ? ref.unsqueeze(0) : ref).to(torch::kDouble);

  auto ref2 = (r * r).sum(-1, /*keepdim=*/true);
  auto est2 = (e * e).sum(-1);
  if (ref2.min().item<double>() <= 0.0)
    throw DegenerateSignal(std::string(who) + ": zero-energy reference");
  if (est2.min().item<double>() <= 0.0)
    throw DegenerateSignal(std::string(who) + ": zero-energy estimate");

  auto target = (e * r).sum(-1, /*keepdim=*/true) / ref2 * r;
  auto resid = e - target;
  auto t2 = (target * target).sum(-1);
  auto r2 = (resid * resid).sum(-1);
  auto q = t2 / torch::maximum(r2, t2 * 1e-6);
  return torch::clamp_min(q, 1e-6);
}

}  // namespace sisdr_detail

// Metric form: [B] (or scalar for 1-D inputs) in dB, double dtype.
inline torch::Tensor si_sdr_db(const torch::Tensor& est, const torch::Tensor& ref) {
  auto q = sisdr_detail::ratio(est, ref, "si_sdr_db");
  auto db = 10.0 * torch::log10(q);
  return est.dim() == 1 ? db.squeeze(0) : db;
}

// Training form: negated dB, averaged over the batch. Differentiable with
// respect to the estimate (and the reference, though that is rarely used).
inline torch::Tensor si_sdr_loss(const torch::Tensor& est, const torch::Tensor& ref) {
  auto q = sisdr_detail::ratio(est, ref, "si_sdr_loss");
  return (-10.0 * torch::log10(q)).mean();
}

}  // namespace dgtse

#endif  // DGTSE_SISDR_HPP_
