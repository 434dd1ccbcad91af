// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_BACKEND_HPP_
#define DGTSE_BACKEND_HPP_

#include <optional>
#include <utility>
#include <vector>

#include "dgtse/attention.hpp"
#include "dgtse/codec.hpp"
#include "dgtse/common.hpp"
#include "dgtse/mel.hpp"

namespace dgtse {

// Generative back-end over codec tokens. A parameter-shared conformer
// encoder turns log-mel features of the enrollment and the mixture into
// embedding streams. A decoder-only language model consumes the sequence
// [bos, ref..., sep, mix..., tse, target..., eos] and predicts the first
// n_coarse token layers of the clean target with n_coarse parallel output
// heads. A bidirectional refiner then maps the coarse codeword sums,
// together with both streams, to the all-layer codec latent which the codec
// decoder renders as audio.

enum class SlotKind : int64_t {
  kBos = 0, kRef = 1, kSep = 2, kMix = 3, kTse = 4, kTarget = 5, kEos = 6
};
constexpr int kNumSlotKinds = 7;

struct BackendConfig {
  MelConfig mel{};
  int d_model = 512;
  int conformer_layers = 6;
  int conformer_heads = 8;
  int decoder_blocks = 10;
  int decoder_heads = 8;
  int refiner_layers = 6;
  int refiner_heads = 8;
  int ffn_dim = 2048;
  int conv_kernel = 15;
  int n_coarse = 2;
  int codebook_size = 256;
  int latent_dim = 128;
  enum class InputMode { kContinuous, kDiscrete };
  enum class OutputLayout { kAligned, kRefOutput };
  enum class RefinerStreams { kAll, kMixOnly, kRefOnly };
  InputMode input_mode = InputMode::kContinuous;
  OutputLayout output_layout = OutputLayout::kAligned;
  RefinerStreams refiner_streams = RefinerStreams::kAll;
  double generation_cap_factor = 1.25;

  int eos_id() const { return codebook_size; }
  int vocab() const { return codebook_size + 1; }
};

inline void validate(const BackendConfig& cfg) {
  validate(cfg.mel);
  if (cfg.d_model <= 0 || cfg.d_model % 2 != 0)
    throw ConfigError("backend: d_model must be positive and even");
  if (cfg.conformer_layers <= 0 || cfg.decoder_blocks <= 0 || cfg.refiner_layers <= 0)
    throw ConfigError("backend: layer counts must be positive");
  for (int h : {cfg.conformer_heads, cfg.decoder_heads, cfg.refiner_heads})
    if (h <= 0 || cfg.d_model % h != 0)
      throw ConfigError("backend: heads must divide d_model");
  if (cfg.n_coarse < 1) throw ConfigError("backend: n_coarse must be >= 1");
  if (cfg.codebook_size < 2 || cfg.latent_dim <= 0 || cfg.ffn_dim <= 0)
    throw ConfigError("backend: bad vocabulary/latent sizes");
}

namespace backend_detail {

struct Region {
  SlotKind kind;
  int64_t length;
};

inline int64_t total_length(const std::vector<Region>& regions) {
  int64_t n = 0;
  for (const auto& r : regions) n += r.length;
  return n;
}

inline torch::Tensor region_kinds(const std::vector<Region>& regions) {
  std::vector<int64_t> kinds;
  for (const auto& r : regions)
    kinds.insert(kinds.end(), r.length, static_cast<int64_t>(r.kind));
  return torch::tensor(kinds, torch::kLong);
}

// Sinusoidal positions that restart at 0 at every region boundary.
inline torch::Tensor region_positions(const std::vector<Region>& regions,
                                      int64_t d, torch::TensorOptions opts) {
  int64_t longest = 1;
  for (const auto& r : regions) longest = std::max(longest, r.length);
  auto table = sinusoidal_positions(longest, d, opts);
  std::vector<torch::Tensor> parts;
  for (const auto& r : regions) parts.push_back(table.narrow(0, 0, r.length));
  return torch::cat(parts, 0);
}

}  // namespace backend_detail

// Parameter-shared feature encoder. Continuous mode projects log-mel
// features; discrete mode projects all-layer codec latents instead. Both
// run through the same conformer stack.
class ConformerEncoderImpl : public torch::nn::Module {
 public:
  explicit ConformerEncoderImpl(const BackendConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    from_mel_ = register_module("from_mel",
                                torch::nn::Linear(cfg.mel.n_mels, cfg.d_model));
    from_latent_ = register_module("from_latent",
                                   torch::nn::Linear(cfg.latent_dim, cfg.d_model));
    for (int i = 0; i < cfg.conformer_layers; ++i)
      blocks_.push_back(register_module(
          "block" + std::to_string(i),
          ConformerBlock(cfg.d_model, cfg.conformer_heads, cfg.ffn_dim,
                         cfg.conv_kernel)));
  }

  // mel [B, n_mels, T] -> [B, T, d_model]
  torch::Tensor forward(const torch::Tensor& mel) {
    if (mel.dim() != 3 || mel.size(1) != cfg_.mel.n_mels)
      throw ShapeError("conformer: expected [B, n_mels, T] features");
    return run(from_mel_->forward(mel.transpose(1, 2)));
  }

  // latent [B, T, latent_dim] -> [B, T, d_model]
  torch::Tensor forward_latent(const torch::Tensor& latent) {
    if (latent.dim() != 3 || latent.size(2) != cfg_.latent_dim)
      throw ShapeError("conformer: expected [B, T, latent_dim] features");
    return run(from_latent_->forward(latent));
  }

 private:
  torch::Tensor run(torch::Tensor x) {
    auto opts = torch::TensorOptions().dtype(x.dtype()).device(x.device());
    x = x + sinusoidal_positions(x.size(1), x.size(2), opts);
    for (auto& b : blocks_) x = b->forward(x);
    return x;
  }

  BackendConfig cfg_;
  torch::nn::Linear from_mel_{nullptr}, from_latent_{nullptr};
  std::vector<ConformerBlock> blocks_;
};
TORCH_MODULE(ConformerEncoder);

// A fully assembled language-model input sequence.
struct ArSequence {
  torch::Tensor embedded;  // [B, S, d_model]
  torch::Tensor kinds;     // [S] slot kinds, shared across the batch
  torch::Tensor labels;    // [B, n_coarse, L_t + 1] token labels plus eos
  int64_t label_start = -1;  // sequence position of the first target slot
  int64_t target_frames = 0;
};

struct ArForwardResult {
  torch::Tensor loss;
  std::vector<torch::Tensor> logits;  // per head, [B, S, vocab]
};

class ArDecoderImpl : public torch::nn::Module {
 public:
  explicit ArDecoderImpl(const BackendConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    kind_embed_ = register_module(
        "kind_embed", torch::nn::Embedding(kNumSlotKinds, cfg.d_model));
    token_in_ = register_module("token_in",
                                torch::nn::Linear(cfg.latent_dim, cfg.d_model));
    for (int i = 0; i < cfg.decoder_blocks; ++i)
      blocks_.push_back(register_module(
          "block" + std::to_string(i),
          TransformerBlock(cfg.d_model, cfg.decoder_heads, cfg.ffn_dim)));
    norm_ = register_module(
        "norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.d_model})));
    for (int i = 0; i < cfg.n_coarse; ++i)
      heads_.push_back(register_module(
          "head" + std::to_string(i),
          torch::nn::Linear(cfg.d_model, cfg.vocab())));
    // Output heads start at zero: the untrained model predicts the uniform
    // distribution, so the initial cross-entropy is ln(vocab) per head.
    torch::NoGradGuard ng;
    for (auto& head : heads_) {
      head->weight.zero_();
      head->bias.zero_();
    }
  }

  const BackendConfig& config() const { return cfg_; }

  // Assembles [bos, ref..., sep, mix..., tse, target..., eos] (the sep slot
  // is dropped in the ref_output layout). Target slots embed the codeword
  // sum of the first n_coarse token layers; labels cover the target slots
  // plus one trailing eos per head. Without target tokens the sequence stops
  // after tse, ready for generation.
  ArSequence build_sequence(const torch::Tensor& e_r, const torch::Tensor& e_m,
                            const std::optional<torch::Tensor>& target_tokens,
                            ResidualVq rvq) {
    if (e_r.dim() != 3 || e_m.dim() != 3 || e_r.size(2) != cfg_.d_model ||
        e_m.size(2) != cfg_.d_model)
      throw ShapeError("decoder: stream embeddings must be [B, L, d_model]");
    if (e_r.size(0) != e_m.size(0))
      throw ShapeError("decoder: stream batch mismatch");
    const int64_t batch = e_r.size(0);
    auto opts = torch::TensorOptions().dtype(e_m.dtype()).device(e_m.device());

    std::vector<backend_detail::Region> regions{
        {SlotKind::kBos, 1}, {SlotKind::kRef, e_r.size(1)}};
    if (cfg_.output_layout == BackendConfig::OutputLayout::kAligned)
      regions.push_back({SlotKind::kSep, 1});
    regions.push_back({SlotKind::kMix, e_m.size(1)});
    regions.push_back({SlotKind::kTse, 1});

    // Special slots carry no content of their own: their learned vector is
    // the kind embedding added uniformly below.
    auto blank = torch::zeros({batch, 1, cfg_.d_model}, opts);
    ArSequence seq;
    std::vector<torch::Tensor> parts{blank, e_r};
    if (cfg_.output_layout == BackendConfig::OutputLayout::kAligned)
      parts.push_back(blank);
    parts.push_back(e_m);
    parts.push_back(blank);

    if (target_tokens.has_value()) {
      auto toks = *target_tokens;
      if (toks.dim() != 3 || toks.size(0) != batch)
        throw ShapeError("decoder: target tokens must be [B, n_coarse, L]");
      if (toks.size(1) != cfg_.n_coarse)
        throw ShapeError("decoder: token layer count differs from n_coarse");
      if (toks.size(2) == 0) throw DataError("decoder: empty target region");
      seq.target_frames = toks.size(2);
      seq.label_start = backend_detail::total_length(regions);
      regions.push_back({SlotKind::kTarget, seq.target_frames});
      regions.push_back({SlotKind::kEos, 1});
      parts.push_back(embed_tokens(toks, rvq));
      parts.push_back(blank);
      auto eos = torch::full({batch, cfg_.n_coarse, 1},
                             static_cast<int64_t>(cfg_.eos_id()), torch::kLong);
      seq.labels = torch::cat({toks, eos}, 2);
    }

    seq.kinds = backend_detail::region_kinds(regions);
    auto pos = backend_detail::region_positions(regions, cfg_.d_model, opts);
    auto kind_vec = kind_embed_->forward(seq.kinds.to(e_m.device()));
    seq.embedded = torch::cat(parts, 1) + (pos + kind_vec).unsqueeze(0);
    return seq;
  }

  // Codeword-sum embedding of an [B, n_coarse, L] token block, projected to
  // the model width. The codec stays frozen here, so the lookup is detached.
  torch::Tensor embed_tokens(const torch::Tensor& tokens, ResidualVq rvq) {
    return token_in_->forward(rvq->lookup(tokens).detach());
  }

  torch::Tensor run_blocks(const torch::Tensor& embedded) {
    auto h = embedded;
    for (auto& b : blocks_) h = b->forward(h, /*causal=*/true);
    return norm_->forward(h);
  }

  // Teacher-forced pass. Position i predicts slot i + 1, so labels for the
  // target region plus eos are read from positions [label_start - 1,
  // label_start + L_t - 1]. Loss is the mean cross-entropy over heads and
  // label positions.
  ArForwardResult forward_loss(const ArSequence& seq) {
    if (seq.label_start < 0) throw DataError("decoder: sequence lacks a target region");
    auto hidden = run_blocks(seq.embedded);
    ArForwardResult out;
    std::vector<torch::Tensor> losses;
    const int64_t n_labels = seq.target_frames + 1;
    for (int h = 0; h < cfg_.n_coarse; ++h) {
      auto logits = heads_[h]->forward(hidden);
      out.logits.push_back(logits);
      auto pred = logits.narrow(1, seq.label_start - 1, n_labels)
                      .reshape({-1, cfg_.vocab()});
      auto gold = seq.labels.select(1, h).reshape({-1}).to(pred.device());
      losses.push_back(torch::nn::functional::cross_entropy(pred, gold));
    }
    out.loss = torch::stack(losses).mean();
    return out;
  }

  // Greedy incremental decoding. Stops when every head picks eos, or at
  // ceil(cap_factor * L_m) frames. A head that picks eos while the others
  // continue falls back to its best non-eos token, since the eos id has no
  // codeword. At least one frame is always produced. When `step_logits` is
  // given it receives one [n_coarse, vocab] row per decoding step, the
  // stopping step included.
  torch::Tensor generate(const torch::Tensor& e_r, const torch::Tensor& e_m,
                         ResidualVq rvq,
                         std::vector<torch::Tensor>* step_logits = nullptr) {
    torch::NoGradGuard ng;
    if (e_r.size(0) != 1 || e_m.size(0) != 1)
      throw ShapeError("decoder: generation runs one utterance at a time");
    auto seq = build_sequence(e_r, e_m, std::nullopt, rvq);
    auto opts = torch::TensorOptions().dtype(e_m.dtype()).device(e_m.device());
    const int64_t cap = static_cast<int64_t>(
        std::ceil(cfg_.generation_cap_factor * static_cast<double>(e_m.size(1))));

    std::vector<KvCache> caches(blocks_.size());
    auto hidden = run_cached(seq.embedded, caches);
    auto last = hidden.narrow(1, hidden.size(1) - 1, 1);

    auto pos_table = sinusoidal_positions(std::max<int64_t>(cap, 1), cfg_.d_model, opts);
    auto target_kind = kind_embed_->forward(
        torch::tensor({(int64_t)SlotKind::kTarget}, torch::kLong));
    std::vector<torch::Tensor> frames;
    for (int64_t t = 0; t < cap; ++t) {
      auto picked = pick_tokens(last, /*force_token=*/frames.empty(), step_logits);
      if (!picked.has_value()) break;
      frames.push_back(*picked);
      if (static_cast<int64_t>(frames.size()) >= cap) break;
      auto emb = embed_tokens(picked->unsqueeze(2), rvq) + target_kind +
                 pos_table.narrow(0, t, 1);
      last = run_cached(emb, caches);
    }
    return torch::stack(frames, 2);  // [1, n_coarse, L]
  }

  std::vector<torch::nn::Linear>& heads() { return heads_; }

 private:
  torch::Tensor run_cached(const torch::Tensor& x, std::vector<KvCache>& caches) {
    auto h = x;
    for (size_t i = 0; i < blocks_.size(); ++i)
      h = blocks_[i]->forward_cached(h, caches[i]);
    return norm_->forward(h);
  }

  // Greedy pick across heads from the hidden state of one position. Returns
  // nullopt when all heads agree on eos (and a token may be withheld).
  std::optional<torch::Tensor> pick_tokens(const torch::Tensor& last_hidden,
                                           bool force_token,
                                           std::vector<torch::Tensor>* step_logits) {
    std::vector<torch::Tensor> ids;
    bool all_eos = true;
    std::vector<torch::Tensor> logit_rows;
    for (int h = 0; h < cfg_.n_coarse; ++h) {
      auto row = heads_[h]->forward(last_hidden).reshape({cfg_.vocab()});
      logit_rows.push_back(row);
      if (row.argmax().item<int64_t>() != cfg_.eos_id()) all_eos = false;
    }
    if (step_logits) step_logits->push_back(torch::stack(logit_rows, 0));
    if (all_eos && !force_token) return std::nullopt;
    for (int h = 0; h < cfg_.n_coarse; ++h)
      ids.push_back(logit_rows[h]
                        .narrow(0, 0, cfg_.codebook_size)
                        .argmax()
                        .reshape({1, 1}));
    return torch::cat(ids, 1);  // [1, n_coarse]
  }

  BackendConfig cfg_;
  torch::nn::Embedding kind_embed_{nullptr};
  torch::nn::Linear token_in_{nullptr};
  std::vector<TransformerBlock> blocks_;
  torch::nn::LayerNorm norm_{nullptr};
  std::vector<torch::nn::Linear> heads_;
};
TORCH_MODULE(ArDecoder);

// One-step refinement model: bidirectional attention over the configured
// streams plus the coarse latent region; the output slice over that region
// is projected back to the codec latent width.
class RefinerImpl : public torch::nn::Module {
 public:
  explicit RefinerImpl(const BackendConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    kind_embed_ = register_module(
        "kind_embed", torch::nn::Embedding(kNumSlotKinds, cfg.d_model));
    latent_in_ = register_module("latent_in",
                                 torch::nn::Linear(cfg.latent_dim, cfg.d_model));
    for (int i = 0; i < cfg.refiner_layers; ++i)
      blocks_.push_back(register_module(
          "block" + std::to_string(i),
          TransformerBlock(cfg.d_model, cfg.refiner_heads, cfg.ffn_dim)));
    norm_ = register_module(
        "norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.d_model})));
    out_ = register_module("out", torch::nn::Linear(cfg.d_model, cfg.latent_dim));
  }

  // e_r/e_m: [B, L, d_model]; coarse_latent: [B, L_t, latent_dim].
  // Returns the all-layer latent estimate [B, L_t, latent_dim].
  torch::Tensor forward(const torch::Tensor& e_r, const torch::Tensor& e_m,
                        const torch::Tensor& coarse_latent) {
    if (coarse_latent.dim() != 3 || coarse_latent.size(2) != cfg_.latent_dim)
      throw ShapeError("refiner: coarse latent must be [B, L, latent_dim]");
    std::vector<backend_detail::Region> regions;
    std::vector<torch::Tensor> parts;
    using RS = BackendConfig::RefinerStreams;
    if (cfg_.refiner_streams == RS::kAll || cfg_.refiner_streams == RS::kRefOnly) {
      regions.push_back({SlotKind::kRef, e_r.size(1)});
      parts.push_back(e_r);
    }
    if (cfg_.refiner_streams == RS::kAll || cfg_.refiner_streams == RS::kMixOnly) {
      regions.push_back({SlotKind::kMix, e_m.size(1)});
      parts.push_back(e_m);
    }
    regions.push_back({SlotKind::kTarget, coarse_latent.size(1)});
    parts.push_back(latent_in_->forward(coarse_latent));

    auto opts = torch::TensorOptions()
                    .dtype(coarse_latent.dtype())
                    .device(coarse_latent.device());
    auto pos = backend_detail::region_positions(regions, cfg_.d_model, opts);
    auto kinds = backend_detail::region_kinds(regions).to(coarse_latent.device());
    auto x = torch::cat(parts, 1) + (pos + kind_embed_->forward(kinds)).unsqueeze(0);
    for (auto& b : blocks_) x = b->forward(x, /*causal=*/false);
    auto region = norm_->forward(x).narrow(
        1, x.size(1) - coarse_latent.size(1), coarse_latent.size(1));
    return out_->forward(region);
  }

 private:
  BackendConfig cfg_;
  torch::nn::Embedding kind_embed_{nullptr};
  torch::nn::Linear latent_in_{nullptr};
  std::vector<TransformerBlock> blocks_;
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(Refiner);

inline torch::Tensor refine_l1l2_loss(const torch::Tensor& pred,
                                      const torch::Tensor& target) {
  return torch::l1_loss(pred, target) + torch::mse_loss(pred, target);
}

class BackendImpl : public torch::nn::Module {
 public:
  explicit BackendImpl(BackendConfig cfg) : cfg_(cfg) {
    validate(cfg);
    conformer_ = register_module("conformer", ConformerEncoder(cfg));
    decoder_ = register_module("decoder", ArDecoder(cfg));
    refiner_ = register_module("refiner", Refiner(cfg));
  }

  const BackendConfig& config() const { return cfg_; }
  ConformerEncoder conformer() { return conformer_; }
  ArDecoder decoder() { return decoder_; }
  Refiner refiner() { return refiner_; }

  // Stream features for one waveform: log-mel through the conformer in
  // continuous mode, all-layer codec latents through it in discrete mode.
  torch::Tensor encode_stream(const torch::Tensor& wave, NeuralCodec codec) {
    if (cfg_.input_mode == BackendConfig::InputMode::kDiscrete)
      return conformer_->forward_latent(codec->encode(wave).latent);
    return conformer_->forward(log_mel(wave, cfg_.mel));
  }

  // Full generative extraction: encode streams, generate coarse tokens,
  // refine to the all-layer latent, render with the codec decoder. The
  // output is cropped or zero-padded to `out_len` samples.
  torch::Tensor extract(const torch::Tensor& mixture, const torch::Tensor& enrollment,
                        NeuralCodec codec, int64_t out_len) {
    torch::NoGradGuard ng;
    auto e_r = encode_stream(enrollment, codec);
    auto e_m = encode_stream(mixture, codec);
    auto tokens = decoder_->generate(e_r, e_m, codec->quantizer());
    if (cfg_.output_layout == BackendConfig::OutputLayout::kRefOutput) {
      // The generated region covers enrollment tokens first; only the tail
      // past the enrollment's codec frame count is the clean estimate.
      const int64_t skip =
          std::min(codec->frames_for(enrollment.size(1)), tokens.size(2) - 1);
      tokens = tokens.narrow(2, skip, tokens.size(2) - skip);
    }
    return render(tokens, e_r, e_m, codec, out_len);
  }

  // Refine a coarse token grid and decode it to `out_len` samples.
  torch::Tensor render(const torch::Tensor& tokens, const torch::Tensor& e_r,
                       const torch::Tensor& e_m, NeuralCodec codec,
                       int64_t out_len) {
    auto coarse = codec->quantizer()->lookup(tokens).detach();
    auto latent = refiner_->forward(e_r, e_m, coarse);
    auto wave = codec->decode_latent(latent);
    if (wave.size(1) >= out_len) return wave.narrow(1, 0, out_len);
    namespace F = torch::nn::functional;
    return F::pad(wave, F::PadFuncOptions({0, out_len - wave.size(1)}));
  }

 private:
  BackendConfig cfg_;
  ConformerEncoder conformer_{nullptr};
  ArDecoder decoder_{nullptr};
  Refiner refiner_{nullptr};
};
TORCH_MODULE(Backend);

}  // namespace dgtse

#endif  // DGTSE_BACKEND_HPP_
