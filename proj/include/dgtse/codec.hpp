// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_CODEC_HPP_
#define DGTSE_CODEC_HPP_

#include <vector>

#include "dgtse/common.hpp"
#include "dgtse/rvq.hpp"
#include "dgtse/signal.hpp"

namespace dgtse {

// Neural waveform codec: strided Conv1d encoder to a latent sequence at
// hop-rate, residual vector quantizer, mirrored ConvTranspose1d decoder.
// Four stride-4 stages give one latent frame per 256 samples; inputs are
// zero padded on the right to a hop multiple, so a signal of n samples maps
// to ceil(n / 256) frames.

struct CodecConfig {
  int latent_dim = 128;
  int base_channels = 32;
  int n_stages = 4;  // stride-4 stages; hop = 4^n_stages
  RvqConfig rvq{4, 256, 128};
  int sample_rate = 16000;
  double commitment_weight = 0.25;

  int hop() const {
    int h = 1;
    for (int i = 0; i < n_stages; ++i) h *= 4;
    return h;
  }
};

inline void validate(const CodecConfig& cfg) {
  if (cfg.latent_dim <= 0 || cfg.base_channels <= 0 || cfg.n_stages <= 0)
    throw ConfigError("codec: all sizes must be positive");
  if (cfg.rvq.dim != cfg.latent_dim)
    throw ConfigError("codec: rvq dim must equal latent_dim");
  validate(cfg.rvq);
}

struct CodecForward {
  torch::Tensor reconstruction;  // [B, n]
  torch::Tensor tokens;          // [B, K, T]
  torch::Tensor commitment_loss;
  torch::Tensor codebook_loss;
};

struct CodecEncoded {
  torch::Tensor tokens;  // [B, K, T]
  torch::Tensor latent;  // [B, T, latent_dim], codeword sum over layer_span
  int layer_span = 0;
};

class NeuralCodecImpl : public torch::nn::Module {
 public:
  explicit NeuralCodecImpl(CodecConfig cfg) : cfg_(cfg) {
    validate(cfg);
    int ch = cfg.base_channels;
    int in = 1;
    for (int i = 0; i < cfg.n_stages; ++i) {
      int out = (i + 1 == cfg.n_stages) ? cfg.latent_dim : ch;
      enc_->push_back(torch::nn::Conv1d(
          torch::nn::Conv1dOptions(in, out, 8).stride(4).padding(2)));
      if (i + 1 < cfg.n_stages) enc_->push_back(torch::nn::ELU());
      in = out;
      ch *= 2;
    }
    register_module("encoder", enc_);

    in = cfg.latent_dim;
    ch = cfg.base_channels;
    for (int i = 1; i < cfg.n_stages; ++i) ch *= 2;
    for (int i = 0; i < cfg.n_stages; ++i) {
      ch /= 2;
      int out = (i + 1 == cfg.n_stages) ? 1 : ch;
      dec_->push_back(torch::nn::ConvTranspose1d(
          torch::nn::ConvTranspose1dOptions(in, out, 8).stride(4).padding(2)));
      if (i + 1 < cfg.n_stages) dec_->push_back(torch::nn::ELU());
      in = out;
    }
    register_module("decoder", dec_);
    rvq_ = register_module("rvq", ResidualVq(cfg.rvq));
  }

  const CodecConfig& config() const { return cfg_; }
  ResidualVq quantizer() { return rvq_; }

  int64_t frames_for(int64_t n_samples) const {
    return (n_samples + cfg_.hop() - 1) / cfg_.hop();
  }

  // wave [B, n] -> latents [B, T, latent_dim]
  torch::Tensor encode_latent(const torch::Tensor& wave) {
    if (wave.dim() != 2) throw ShapeError("codec: expected [B, n] waveform");
    if (wave.size(1) == 0) throw EmptySignal("codec: empty waveform");
    const int64_t pad = frames_for(wave.size(1)) * cfg_.hop() - wave.size(1);
    namespace F = torch::nn::functional;
    auto x = F::pad(wave.unsqueeze(1), F::PadFuncOptions({0, pad}));
    return enc_->forward(x).transpose(1, 2);
  }

  // latents [B, T, latent_dim] -> wave [B, T * hop]
  torch::Tensor decode_latent(const torch::Tensor& latents) {
    if (latents.dim() != 3 || latents.size(2) != cfg_.latent_dim)
      throw ShapeError("codec: expected [B, T, latent_dim]");
    return torch::tanh(dec_->forward(latents.transpose(1, 2))).squeeze(1);
  }

  // wave [B, n] -> tokens [B, K, T] plus the codeword sum over the first
  // `span` layers (span == n_layers, the default, sums every layer).
  CodecEncoded encode(const torch::Tensor& wave, int span = -1) {
    if (span < 0) span = cfg_.rvq.n_layers;
    if (span < 1 || span > cfg_.rvq.n_layers)
      throw ConfigError("codec: layer span out of range");
    torch::NoGradGuard ng;
    CodecEncoded out;
    out.tokens = rvq_->forward(encode_latent(wave)).tokens;
    out.latent = rvq_->lookup(out.tokens.narrow(1, 0, span));
    out.layer_span = span;
    return out;
  }

  // token grid [B, K', T], K' <= K -> wave [B, T * hop]
  torch::Tensor decode_tokens(const torch::Tensor& tokens) {
    return decode_latent(rvq_->lookup(tokens));
  }

  // Full pass used by codec training. Reconstruction length matches input.
  CodecForward forward(const torch::Tensor& wave) {
    auto z = encode_latent(wave);
    auto q = rvq_->forward(z);
    CodecForward out;
    out.reconstruction = decode_latent(q.quantized).narrow(1, 0, wave.size(1));
    out.tokens = q.tokens;
    out.commitment_loss = q.commitment_loss;
    out.codebook_loss = q.codebook_loss;
    return out;
  }

 private:
  CodecConfig cfg_;
  torch::nn::Sequential enc_;
  torch::nn::Sequential dec_;
  ResidualVq rvq_{nullptr};
};
TORCH_MODULE(NeuralCodec);

// Spectral reconstruction penalty used alongside the sample-domain L1 term:
// L1 on magnitudes plus L1 on log magnitudes, summed over a bank of
// resolutions.
inline torch::Tensor multi_resolution_stft_loss(
    const torch::Tensor& est, const torch::Tensor& ref,
    const std::vector<StftConfig>& banks = {{512, 512, 128},
                                            {1024, 1024, 256},
                                            {256, 256, 64}}) {
  torch::Tensor total;
  for (const auto& cfg : banks) {
    auto me = stft(est, cfg).magnitude(1e-10);
    auto mr = stft(ref, cfg).magnitude(1e-10);
    auto term = torch::l1_loss(me, mr) +
                torch::l1_loss(torch::log(me + 1e-5), torch::log(mr + 1e-5));
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(banks.size());
}

struct CodecLoss {
  torch::Tensor total;
  double l1 = 0, spectral = 0, commitment = 0, codebook = 0;
};

inline CodecLoss codec_loss(const CodecForward& fwd, const torch::Tensor& wave,
                            const CodecConfig& cfg) {
  auto l1 = torch::l1_loss(fwd.reconstruction, wave);
  auto sp = multi_resolution_stft_loss(fwd.reconstruction, wave);
  CodecLoss out;
  out.total = 10.0 * l1 + sp + cfg.commitment_weight * fwd.commitment_loss +
              fwd.codebook_loss;
  out.l1 = l1.item<double>();
  out.spectral = sp.item<double>();
  out.commitment = fwd.commitment_loss.item<double>();
  out.codebook = fwd.codebook_loss.item<double>();
  return out;
}

}  // namespace dgtse

#endif  // DGTSE_CODEC_HPP_
