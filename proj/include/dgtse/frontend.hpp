// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_FRONTEND_HPP_
#define DGTSE_FRONTEND_HPP_

#include <vector>

#include "dgtse/attention.hpp"
#include "dgtse/common.hpp"
#include "dgtse/signal.hpp"

namespace dgtse {

// Time-frequency extraction network. A shared spectrogram encoder embeds the
// mixture and the enrollment; cross-attention with the mixture as query pulls
// speaker evidence out of the enrollment; the two feature maps are fused by
// channel concatenation and run through a stack of grid blocks that
// alternate along-time, along-frequency, and attention passes; a transposed
// convolution maps back to a complex spectrogram which the inverse STFT
// renders at the mixture's length.
//
// Attention here always treats time frames as tokens and runs independently
// per frequency band with the channel vector as features. That keeps the
// cost linear in the bin count and makes the enrollment attention depend
// only on band-matched content. No positional encoding is attached to the
// enrollment keys, so the extraction is invariant to enrollment frame order.

struct FrontendConfig {
  StftConfig stft{320, 320, 160};
  int width = 128;       // encoder channels C; fused maps run at 2C
  int n_blocks = 2;      // 2 for the small variant, 6 for the large
  int att_heads = 4;
  int att_ffn = 512;
  int blstm_hidden = 256;
};

inline void validate(const FrontendConfig& cfg) {
  validate(cfg.stft);
  if (cfg.width <= 0 || cfg.n_blocks < 1 || cfg.att_heads <= 0 ||
      cfg.att_ffn <= 0 || cfg.blstm_hidden <= 0)
    throw ConfigError("frontend: all sizes must be positive");
  if ((2 * cfg.width) % cfg.att_heads != 0 || cfg.width % cfg.att_heads != 0)
    throw ConfigError("frontend: att_heads must divide width and 2*width");
}

// Channel concatenation of two equally shaped feature maps: [B, C, F, T] x
// [B, C', F, T] -> [B, C+C', F, T]. No parameters.
inline torch::Tensor fuse_concat(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 4 || b.dim() != 4) throw ShapeError("fuse_concat: expected 4-D maps");
  if (a.size(0) != b.size(0) || a.size(2) != b.size(2) || a.size(3) != b.size(3))
    throw ShapeError("fuse_concat: frames/bins mismatch");
  return torch::cat({a, b}, 1);
}

namespace frontend_detail {

// [B, C, F, T] -> [B*F, T, C]
inline torch::Tensor bands_to_batch(const torch::Tensor& x) {
  return x.permute({0, 2, 3, 1})
      .reshape({x.size(0) * x.size(2), x.size(3), x.size(1)});
}
inline torch::Tensor batch_to_bands(const torch::Tensor& x, int64_t batch,
                                    int64_t bins) {
  return x.reshape({batch, bins, x.size(1), x.size(2)}).permute({0, 3, 1, 2});
}

}  // namespace frontend_detail

// Shared spectrogram encoder: real/imag stacked as 2 channels, one 3x3
// stride-1 convolution up to `width` channels.
class TfEncoderImpl : public torch::nn::Module {
 public:
  explicit TfEncoderImpl(const FrontendConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    conv_ = register_module(
        "conv", torch::nn::Conv2d(
                    torch::nn::Conv2dOptions(2, cfg.width, 3).stride(1).padding(1)));
  }

  // wave [B, n] -> [B, C, F, T]
  torch::Tensor forward(const torch::Tensor& wave) {
    auto spec = stft(wave, cfg_.stft);
    return conv_->forward(torch::stack({spec.real, spec.imag}, 1));
  }

 private:
  FrontendConfig cfg_;
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(TfEncoder);

// Cross multi-head attention: mixture features as queries, enrollment
// features as keys/values, per frequency band over time. Output keeps the
// mixture's frame count whatever the enrollment length.
class CmhaImpl : public torch::nn::Module {
 public:
  explicit CmhaImpl(const FrontendConfig& cfg) {
    block_ = register_module(
        "block", CrossAttentionBlock(cfg.width, cfg.att_heads, cfg.att_ffn));
  }

  torch::Tensor forward(const torch::Tensor& mix_feat, const torch::Tensor& ref_feat) {
    if (mix_feat.dim() != 4 || ref_feat.dim() != 4)
      throw ShapeError("cmha: expected 4-D feature maps");
    if (mix_feat.size(1) != ref_feat.size(1) || mix_feat.size(2) != ref_feat.size(2))
      throw ShapeError("cmha: channel/bin mismatch between mixture and enrollment");
    auto q = frontend_detail::bands_to_batch(mix_feat);
    auto kv = frontend_detail::bands_to_batch(ref_feat);
    auto out = block_->forward(q, kv);
    return frontend_detail::batch_to_bands(out, mix_feat.size(0), mix_feat.size(2));
  }

 private:
  CrossAttentionBlock block_{nullptr};
};
TORCH_MODULE(Cmha);

// One grid block over the fused map [B, W, F, T], W = 2C. Four residual
// passes: BLSTM along time per band, BLSTM along frequency per frame,
// self-attention along time per band, feed-forward. Layer norm over the
// channel dim precedes each pass, so zeroing all inner weights reduces the
// block to the identity.
class TfGridBlockImpl : public torch::nn::Module {
 public:
  explicit TfGridBlockImpl(const FrontendConfig& cfg) {
    const int w = 2 * cfg.width;
    time_lstm_ = register_module(
        "time_lstm", torch::nn::LSTM(torch::nn::LSTMOptions(w, cfg.blstm_hidden)
                                         .batch_first(true)
                                         .bidirectional(true)));
    freq_lstm_ = register_module(
        "freq_lstm", torch::nn::LSTM(torch::nn::LSTMOptions(w, cfg.blstm_hidden)
                                         .batch_first(true)
                                         .bidirectional(true)));
    time_proj_ = register_module("time_proj",
                                 torch::nn::Linear(2 * cfg.blstm_hidden, w));
    freq_proj_ = register_module("freq_proj",
                                 torch::nn::Linear(2 * cfg.blstm_hidden, w));
    attn_ = register_module("attn", MultiheadAttention(w, cfg.att_heads));
    ffn_ = register_module("ffn", FeedForward(w, cfg.att_ffn));
    for (auto name : {"norm_time", "norm_freq", "norm_attn", "norm_ffn"})
      norms_.push_back(register_module(
          name, torch::nn::LayerNorm(torch::nn::LayerNormOptions({w}))));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    if (x.dim() != 4) throw ShapeError("tfgrid: expected [B, W, F, T]");
    const int64_t batch = x.size(0), bins = x.size(2), frames = x.size(3);
    namespace fd = frontend_detail;

    // Along time, one sequence per band.
    auto t_in = fd::bands_to_batch(x);
    auto t_out = time_proj_->forward(
        std::get<0>(time_lstm_->forward(norms_[0]->forward(t_in))));
    auto y = x + fd::batch_to_bands(t_out, batch, bins);

    // Along frequency, one sequence per frame: [B, W, F, T] -> [B*T, F, W].
    auto f_in = y.permute({0, 3, 2, 1}).reshape({batch * frames, bins, y.size(1)});
    auto f_out = freq_proj_->forward(
        std::get<0>(freq_lstm_->forward(norms_[1]->forward(f_in))));
    y = y + f_out.reshape({batch, frames, bins, y.size(1)}).permute({0, 3, 2, 1});

    // Self-attention along time per band, then feed-forward.
    auto a_in = fd::bands_to_batch(y);
    auto h = norms_[2]->forward(a_in);
    a_in = a_in + attn_->forward(h, h);
    a_in = a_in + ffn_->forward(norms_[3]->forward(a_in));
    return fd::batch_to_bands(a_in, batch, bins);
  }

 private:
  torch::nn::LSTM time_lstm_{nullptr}, freq_lstm_{nullptr};
  torch::nn::Linear time_proj_{nullptr}, freq_proj_{nullptr};
  MultiheadAttention attn_{nullptr};
  FeedForward ffn_{nullptr};
  std::vector<torch::nn::LayerNorm> norms_;
};
TORCH_MODULE(TfGridBlock);

class FrontendImpl : public torch::nn::Module {
 public:
  explicit FrontendImpl(FrontendConfig cfg) : cfg_(cfg) {
    validate(cfg);
    encoder_ = register_module("encoder", TfEncoder(cfg));
    cmha_ = register_module("cmha", Cmha(cfg));
    for (int i = 0; i < cfg.n_blocks; ++i)
      blocks_.push_back(
          register_module("block" + std::to_string(i), TfGridBlock(cfg)));
    deconv_ = register_module(
        "deconv", torch::nn::ConvTranspose2d(
                      torch::nn::ConvTranspose2dOptions(2 * cfg.width, 2, 3)
                          .stride(1)
                          .padding(1)));
  }

  const FrontendConfig& config() const { return cfg_; }
  TfEncoder encoder() { return encoder_; }
  Cmha cmha() { return cmha_; }

  // mixture [B, n], enrollment [B, m] -> estimate [B, n]
  torch::Tensor forward(const torch::Tensor& mixture, const torch::Tensor& enrollment) {
    if (mixture.dim() != 2 || enrollment.dim() != 2)
      throw ShapeError("frontend: expected [B, n] waveforms");
    auto d_m = encoder_->forward(mixture);
    auto d_r = encoder_->forward(enrollment);
    auto fused = fuse_concat(d_m, cmha_->forward(d_m, d_r));
    for (auto& block : blocks_) fused = block->forward(fused);
    auto y = deconv_->forward(fused);
    ComplexSpectrogram spec{y.select(1, 0), y.select(1, 1)};
    return istft(spec, cfg_.stft, mixture.size(1));
  }

 private:
  FrontendConfig cfg_;
  TfEncoder encoder_{nullptr};
  Cmha cmha_{nullptr};
  std::vector<TfGridBlock> blocks_;
  torch::nn::ConvTranspose2d deconv_{nullptr};
};
TORCH_MODULE(Frontend);

}  // namespace dgtse

#endif  // DGTSE_FRONTEND_HPP_
