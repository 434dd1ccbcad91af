// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_TWO_STAGE_HPP_
#define DGTSE_TWO_STAGE_HPP_

#include <optional>
#include <utility>
#include <vector>

#include "dgtse/backend.hpp"
#include "dgtse/codec.hpp"
#include "dgtse/common.hpp"
#include "dgtse/frontend.hpp"
#include "dgtse/sisdr.hpp"

namespace dgtse {

// Two-stage extraction: the discriminative stage produces a waveform
// estimate D_o, the generative stage re-analyzes D_o as its mixture stream
// and reconstructs the target through the codec token space, yielding G_o.
// The stages are coupled only through the rendered waveform, which keeps
// them independently testable and leaves the joint gradient path (iSTFT,
// log-mel) differentiable when the front-end is unfrozen.

struct StrategyConfig {
  bool freeze_frontend = true;
  bool aux_sisdr = false;
  double lambda_sisdr = 1.0;  // applied on top of a fixed 0.01 scale
  bool split_training = false;
};

struct InferenceConfig {
  enum class Mode { kAr, kNar };
  Mode mode = Mode::kAr;
  double injection_ratio = 1.0;  // NAR only
  uint64_t seed = 0;
};

struct JointLosses {
  torch::Tensor total;
  torch::Tensor ce_term;      // token cross-entropy, with graph
  torch::Tensor refine_term;  // refiner L1+L2, with graph
  double ce = 0, refine = 0, sisdr_aux = 0;
};

struct JointStepOutput {
  torch::Tensor d_o;  // [B, n]
  JointLosses losses;
};

struct ExtractResult {
  torch::Tensor d_o;      // [B, n] discriminative estimate
  torch::Tensor g_o;      // [B, n] generative reconstruction
  torch::Tensor g_tokens; // [B, n_coarse, L] coarse tokens behind g_o
};

// Per-frame pseudo-label injection: frame t keeps pseudo[.., t] when its
// uniform draw from `seed` falls below ratio, and takes predicted[.., t]
// otherwise. Draws are consumed in frame order, so for a fixed seed the
// kept set at a lower ratio is a subset of the kept set at a higher one.
inline torch::Tensor nar_merge(const torch::Tensor& pseudo,
                               const torch::Tensor& predicted, double ratio,
                               uint64_t seed) {
  if (pseudo.sizes() != predicted.sizes())
    throw ShapeError("nar_merge: token grids must match");
  if (ratio < 0.0 || ratio > 1.0)
    throw ConfigError("nar_merge: ratio outside [0, 1]");
  const int64_t frames = pseudo.size(-1);
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto keep = torch::zeros({frames}, torch::kBool);
  auto acc = keep.accessor<bool, 1>();
  for (int64_t t = 0; t < frames; ++t) acc[t] = unit(rng) < ratio;
  return torch::where(keep.reshape({1, 1, frames}), pseudo, predicted);
}

class TwoStage {
 public:
  TwoStage(Frontend frontend, Backend backend, NeuralCodec codec,
           bool backend_use_enrollment = true)
      : frontend_(std::move(frontend)),
        backend_(std::move(backend)),
        codec_(std::move(codec)),
        use_enrollment_(backend_use_enrollment) {
    if (backend_->config().latent_dim != codec_->config().latent_dim ||
        backend_->config().codebook_size != codec_->config().rvq.codebook_size)
      throw ConfigError("two_stage: backend and codec dimensions disagree");
    if (backend_->config().n_coarse > codec_->config().rvq.n_layers)
      throw ConfigError("two_stage: n_coarse exceeds codec layer count");
  }

  Frontend frontend() { return frontend_; }
  Backend backend() { return backend_; }
  NeuralCodec codec() { return codec_; }
  bool uses_enrollment() const { return use_enrollment_; }

  void mark_frontend_pretrained() { frontend_pretrained_ = true; }

  void set_frozen(bool frozen) {
    for (auto& p : frontend_->parameters()) p.set_requires_grad(!frozen);
  }

  // Parameters the joint optimizer may update. The codec never appears; the
  // front-end appears only when unfrozen.
  std::vector<torch::Tensor> trainable_parameters(const StrategyConfig& strat) {
    std::vector<torch::Tensor> params = backend_->parameters();
    if (!strat.freeze_frontend)
      for (auto& p : frontend_->parameters()) params.push_back(p);
    return params;
  }

  // One teacher-forced training pass over a (mixture, enrollment, target)
  // batch. Loss = token cross-entropy + refiner L1+L2, plus the optional
  // SI-SDR regularizer on D_o.
  JointStepOutput train_step(const torch::Tensor& mixture,
                             const torch::Tensor& enrollment,
                             const torch::Tensor& target,
                             const StrategyConfig& strat) {
    if (!frontend_pretrained_)
      throw NotFitted("two_stage: front-end has no pretrained weights loaded");
    const auto& bc = backend_->config();

    JointStepOutput out;
    if (strat.freeze_frontend) {
      torch::NoGradGuard ng;
      out.d_o = frontend_->forward(mixture, enrollment).detach();
    } else {
      out.d_o = frontend_->forward(mixture, enrollment);
    }

    auto e_m = backend_->encode_stream(out.d_o, codec_);
    auto e_r = enrollment_stream(enrollment);

    auto clean = codec_->encode(target);
    auto coarse_gold = clean.tokens.narrow(1, 0, bc.n_coarse);
    auto seq_tokens = coarse_gold;
    if (bc.output_layout == BackendConfig::OutputLayout::kRefOutput) {
      auto enroll_tokens =
          codec_->encode(enrollment).tokens.narrow(1, 0, bc.n_coarse);
      seq_tokens = torch::cat({enroll_tokens, coarse_gold}, 2);
    }

    auto decoder = backend_->decoder();
    auto seq = decoder->build_sequence(e_r, e_m, seq_tokens, codec_->quantizer());
    auto ar = decoder->forward_loss(seq);

    // Coarse latent fed to the refiner: the decoder's own teacher-forced
    // predictions over the clean region. In joint mode the softmax mixture
    // with a hard forward value keeps a gradient path into the decoder; in
    // split mode hard predictions are detached, severing it.
    const int64_t clean_frames = coarse_gold.size(2);
    const int64_t clean_pos_start =
        seq.label_start - 1 + (seq.target_frames - clean_frames);
    torch::Tensor coarse_latent;
    if (strat.split_training) {
      std::vector<torch::Tensor> ids;
      for (auto& logits : ar.logits)
        ids.push_back(logits.narrow(1, clean_pos_start, clean_frames)
                          .narrow(2, 0, bc.codebook_size)
                          .argmax(-1));
      coarse_latent =
          codec_->quantizer()->lookup(torch::stack(ids, 1)).detach();
    } else {
      std::vector<torch::Tensor> probs;
      for (auto& logits : ar.logits)
        probs.push_back(torch::softmax(
            logits.narrow(1, clean_pos_start, clean_frames)
                .narrow(2, 0, bc.codebook_size),
            -1));
      coarse_latent = codec_->quantizer()->lookup_soft_hard(probs);
    }

    auto refined = backend_->refiner()->forward(e_r, e_m, coarse_latent);
    auto refine = refine_l1l2_loss(refined, clean.latent);

    out.losses.ce = ar.loss.item<double>();
    out.losses.refine = refine.item<double>();
    out.losses.ce_term = ar.loss;
    out.losses.refine_term = refine;
    out.losses.total = ar.loss + refine;
    if (strat.aux_sisdr && strat.lambda_sisdr != 0.0) {
      auto aux = si_sdr_loss(out.d_o, target);
      out.losses.sisdr_aux = aux.item<double>();
      out.losses.total =
          out.losses.total + strat.lambda_sisdr * 0.01 * aux.to(torch::kFloat);
    }
    return out;
  }

  // Inference. AR mode generates tokens frame by frame; NAR mode runs one
  // teacher-forced pass over pseudo tokens obtained by codec-encoding D_o,
  // then keeps each frame's pseudo token with probability R (per-frame
  // draws from the given seed) and the model's argmax prediction otherwise.
  ExtractResult infer(const torch::Tensor& mixture, const torch::Tensor& enrollment,
                      const InferenceConfig& icfg) {
    torch::NoGradGuard ng;
    if (icfg.injection_ratio < 0.0 || icfg.injection_ratio > 1.0)
      throw ConfigError("two_stage: injection ratio outside [0, 1]");
    const auto& bc = backend_->config();

    ExtractResult out;
    out.d_o = frontend_->forward(mixture, enrollment);
    auto e_m = backend_->encode_stream(out.d_o, codec_);
    auto e_r = enrollment_stream(enrollment);

    torch::Tensor tokens;
    if (icfg.mode == InferenceConfig::Mode::kAr) {
      tokens = backend_->decoder()->generate(e_r, e_m, codec_->quantizer());
      if (bc.output_layout == BackendConfig::OutputLayout::kRefOutput) {
        const int64_t skip = std::min(codec_->frames_for(enrollment.size(1)),
                                      tokens.size(2) - 1);
        tokens = tokens.narrow(2, skip, tokens.size(2) - skip);
      }
    } else {
      tokens = nar_tokens(out.d_o, enrollment, e_r, e_m, icfg);
    }
    out.g_tokens = tokens;
    out.g_o = backend_->render(tokens, e_r, e_m, codec_, mixture.size(1));
    return out;
  }

 private:
  torch::Tensor enrollment_stream(const torch::Tensor& enrollment) {
    if (use_enrollment_) return backend_->encode_stream(enrollment, codec_);
    const auto& bc = backend_->config();
    return torch::zeros({enrollment.size(0), 0, bc.d_model});
  }

  torch::Tensor nar_tokens(const torch::Tensor& d_o, const torch::Tensor& enrollment,
                           const torch::Tensor& e_r, const torch::Tensor& e_m,
                           const InferenceConfig& icfg) {
    const auto& bc = backend_->config();
    auto pseudo = codec_->encode(d_o).tokens.narrow(1, 0, bc.n_coarse);
    auto seq_tokens = pseudo;
    if (bc.output_layout == BackendConfig::OutputLayout::kRefOutput) {
      auto enroll_tokens =
          codec_->encode(enrollment).tokens.narrow(1, 0, bc.n_coarse);
      seq_tokens = torch::cat({enroll_tokens, pseudo}, 2);
    }
    auto decoder = backend_->decoder();
    auto seq = decoder->build_sequence(e_r, e_m, seq_tokens, codec_->quantizer());
    auto ar = decoder->forward_loss(seq);

    const int64_t frames = pseudo.size(2);
    const int64_t pos_start = seq.label_start - 1 + (seq.target_frames - frames);
    std::vector<torch::Tensor> ids;
    for (auto& logits : ar.logits)
      ids.push_back(logits.narrow(1, pos_start, frames)
                        .narrow(2, 0, bc.codebook_size)
                        .argmax(-1));
    auto predicted = torch::stack(ids, 1);  // [B, n_coarse, frames]
    return nar_merge(pseudo, predicted, icfg.injection_ratio, icfg.seed);
  }

  Frontend frontend_;
  Backend backend_;
  NeuralCodec codec_;
  bool use_enrollment_ = true;
  bool frontend_pretrained_ = false;
};

}  // namespace dgtse

#endif  // DGTSE_TWO_STAGE_HPP_
