// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_ATTENTION_HPP_
#define DGTSE_ATTENTION_HPP_

#include <cmath>
#include <limits>

#include "dgtse/common.hpp"

namespace dgtse {

// Transformer building blocks shared by the extraction network and both
// language models. Everything is batch-first: [B, T, D].

inline torch::Tensor sinusoidal_positions(int64_t n, int64_t d,
                                          torch::TensorOptions opts = {}) {
  if (d <= 0 || d % 2 != 0) throw ConfigError("positions: dim must be even");
  auto pos = torch::arange(n, torch::kDouble).unsqueeze(1);
  auto dim = torch::arange(d / 2, torch::kDouble).unsqueeze(0);
  auto freq = torch::exp(dim * (-std::log(10000.0) / std::max<int64_t>(d / 2 - 1, 1)));
  auto angle = pos * freq;
  auto pe = torch::zeros({n, d}, torch::kDouble);
  pe.index_put_({torch::indexing::Slice(), torch::indexing::Slice(0, torch::indexing::None, 2)},
                torch::sin(angle));
  pe.index_put_({torch::indexing::Slice(), torch::indexing::Slice(1, torch::indexing::None, 2)},
                torch::cos(angle));
  return pe.to(opts);
}

// Per-layer key/value cache for incremental decoding.
struct KvCache {
  torch::Tensor k;  // [B, H, T_cached, head_dim]
  torch::Tensor v;
};

class MultiheadAttentionImpl : public torch::nn::Module {
 public:
  MultiheadAttentionImpl(int d_model, int n_heads)
      : d_model_(d_model), n_heads_(n_heads) {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw ConfigError("attention: d_model must divide evenly by n_heads");
    q_proj_ = register_module("q_proj", torch::nn::Linear(d_model, d_model));
    k_proj_ = register_module("k_proj", torch::nn::Linear(d_model, d_model));
    v_proj_ = register_module("v_proj", torch::nn::Linear(d_model, d_model));
    out_proj_ = register_module("out_proj", torch::nn::Linear(d_model, d_model));
  }

  // query [B, Tq, D], memory [B, Tk, D]. With causal=true (self-attention
  // only, Tq == Tk) position i attends to positions <= i.
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& memory,
                        bool causal = false) {
    auto q = split_heads(q_proj_->forward(query));
    auto k = split_heads(k_proj_->forward(memory));
    auto v = split_heads(v_proj_->forward(memory));
    auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(head_dim());
    if (causal) {
      if (query.size(1) != memory.size(1))
        throw ShapeError("attention: causal mask needs equal query/key length");
      auto mask = torch::triu(torch::ones({query.size(1), query.size(1)},
                                          torch::TensorOptions()
                                              .dtype(torch::kBool)
                                              .device(query.device())),
                              1);
      scores = scores.masked_fill(mask, -std::numeric_limits<float>::infinity());
    }
    auto ctx = torch::matmul(torch::softmax(scores, -1), v);
    return out_proj_->forward(merge_heads(ctx));
  }

  // Incremental self-attention: projects `step` (one or more new positions),
  // appends to the cache, and attends over everything cached so far. With a
  // single new position no mask is needed; with several the causal mask is
  // applied relative to the cache tail.
  torch::Tensor forward_cached(const torch::Tensor& step, KvCache& cache) {
    auto q = split_heads(q_proj_->forward(step));
    auto k_new = split_heads(k_proj_->forward(step));
    auto v_new = split_heads(v_proj_->forward(step));
    cache.k = cache.k.defined() ? torch::cat({cache.k, k_new}, 2) : k_new;
    cache.v = cache.v.defined() ? torch::cat({cache.v, v_new}, 2) : v_new;
    auto scores = torch::matmul(q, cache.k.transpose(-2, -1)) / std::sqrt(head_dim());
    const int64_t t_new = step.size(1), t_all = cache.k.size(2);
    if (t_new > 1) {
      auto mask = torch::triu(torch::ones({t_new, t_all}, torch::TensorOptions()
                                                              .dtype(torch::kBool)
                                                              .device(step.device())),
                              t_all - t_new + 1);
      scores = scores.masked_fill(mask, -std::numeric_limits<float>::infinity());
    }
    auto ctx = torch::matmul(torch::softmax(scores, -1), cache.v);
    return out_proj_->forward(merge_heads(ctx));
  }

 private:
  double head_dim() const { return static_cast<double>(d_model_) / n_heads_; }

  torch::Tensor split_heads(const torch::Tensor& x) const {
    return x.reshape({x.size(0), x.size(1), n_heads_, d_model_ / n_heads_})
        .permute({0, 2, 1, 3});
  }
  torch::Tensor merge_heads(const torch::Tensor& x) const {
    return x.permute({0, 2, 1, 3})
        .reshape({x.size(0), x.size(2), d_model_});
  }

  int d_model_, n_heads_;
  torch::nn::Linear q_proj_{nullptr}, k_proj_{nullptr}, v_proj_{nullptr},
      out_proj_{nullptr};
};
TORCH_MODULE(MultiheadAttention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(int d_model, int d_hidden) {
    in_ = register_module("in", torch::nn::Linear(d_model, d_hidden));
    out_ = register_module("out", torch::nn::Linear(d_hidden, d_model));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    return out_->forward(torch::gelu(in_->forward(x)));
  }

 private:
  torch::nn::Linear in_{nullptr}, out_{nullptr};
};
TORCH_MODULE(FeedForward);

// Pre-norm block: x + attn(LN(x)) followed by x + ffn(LN(x)). Covers both
// the bidirectional encoder case and, with causal=true, the decoder case.
class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int d_model, int n_heads, int d_ffn) {
    attn_ = register_module("attn", MultiheadAttention(d_model, n_heads));
    ffn_ = register_module("ffn", FeedForward(d_model, d_ffn));
    norm_attn_ = register_module("norm_attn",
                                 torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
    norm_ffn_ = register_module("norm_ffn",
                                torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  }

  torch::Tensor forward(const torch::Tensor& x, bool causal) {
    auto h = norm_attn_->forward(x);
    auto y = x + attn_->forward(h, h, causal);
    return y + ffn_->forward(norm_ffn_->forward(y));
  }

  torch::Tensor forward_cached(const torch::Tensor& x, KvCache& cache) {
    auto y = x + attn_->forward_cached(norm_attn_->forward(x), cache);
    return y + ffn_->forward(norm_ffn_->forward(y));
  }

 private:
  MultiheadAttention attn_{nullptr};
  FeedForward ffn_{nullptr};
  torch::nn::LayerNorm norm_attn_{nullptr}, norm_ffn_{nullptr};
};
TORCH_MODULE(TransformerBlock);

// Cross-attention block: the query stream attends into a memory stream,
// then passes through a feed-forward, both pre-norm with residuals.
class CrossAttentionBlockImpl : public torch::nn::Module {
 public:
  CrossAttentionBlockImpl(int d_model, int n_heads, int d_ffn) {
    attn_ = register_module("attn", MultiheadAttention(d_model, n_heads));
    ffn_ = register_module("ffn", FeedForward(d_model, d_ffn));
    norm_q_ = register_module("norm_q",
                              torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
    norm_kv_ = register_module("norm_kv",
                               torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
    norm_ffn_ = register_module("norm_ffn",
                                torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model})));
  }

  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& memory) {
    auto y = query + attn_->forward(norm_q_->forward(query),
                                    norm_kv_->forward(memory));
    return y + ffn_->forward(norm_ffn_->forward(y));
  }

 private:
  MultiheadAttention attn_{nullptr};
  FeedForward ffn_{nullptr};
  torch::nn::LayerNorm norm_q_{nullptr}, norm_kv_{nullptr}, norm_ffn_{nullptr};
};
TORCH_MODULE(CrossAttentionBlock);

// Conformer block: half-weighted feed-forward, self-attention, convolution
// module, second half-weighted feed-forward, closing LayerNorm. The
// convolution module normalizes with GroupNorm(1) rather than BatchNorm so
// that batch-of-one training stays well behaved.
class ConformerBlockImpl : public torch::nn::Module {
 public:
  ConformerBlockImpl(int d_model, int n_heads, int d_ffn, int conv_kernel) {
    if (conv_kernel % 2 == 0) throw ConfigError("conformer: conv kernel must be odd");
    ffn1_ = register_module("ffn1", FeedForward(d_model, d_ffn));
    ffn2_ = register_module("ffn2", FeedForward(d_model, d_ffn));
    attn_ = register_module("attn", MultiheadAttention(d_model, n_heads));
    pw_in_ = register_module("pw_in", torch::nn::Conv1d(torch::nn::Conv1dOptions(
                                          d_model, 2 * d_model, 1)));
    dw_ = register_module(
        "dw", torch::nn::Conv1d(torch::nn::Conv1dOptions(d_model, d_model, conv_kernel)
                                    .groups(d_model)
                                    .padding(conv_kernel / 2)));
    pw_out_ = register_module("pw_out", torch::nn::Conv1d(torch::nn::Conv1dOptions(
                                            d_model, d_model, 1)));
    conv_norm_ = register_module("conv_norm",
                                 torch::nn::GroupNorm(torch::nn::GroupNormOptions(1, d_model)));
    for (auto name : {"norm_ffn1", "norm_attn", "norm_conv", "norm_ffn2", "norm_out"})
      norms_.push_back(register_module(
          name, torch::nn::LayerNorm(torch::nn::LayerNormOptions({d_model}))));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = x + 0.5 * ffn1_->forward(norms_[0]->forward(x));
    auto h = norms_[1]->forward(y);
    y = y + attn_->forward(h, h);
    y = y + conv_module(norms_[2]->forward(y));
    y = y + 0.5 * ffn2_->forward(norms_[3]->forward(y));
    return norms_[4]->forward(y);
  }

 private:
  torch::Tensor conv_module(const torch::Tensor& x) {
    auto h = x.transpose(1, 2);  // [B, D, T]
    h = torch::glu(pw_in_->forward(h), 1);
    h = torch::silu(conv_norm_->forward(dw_->forward(h)));
    return pw_out_->forward(h).transpose(1, 2);
  }

  FeedForward ffn1_{nullptr}, ffn2_{nullptr};
  MultiheadAttention attn_{nullptr};
  torch::nn::Conv1d pw_in_{nullptr}, dw_{nullptr}, pw_out_{nullptr};
  torch::nn::GroupNorm conv_norm_{nullptr};
  std::vector<torch::nn::LayerNorm> norms_;
};
TORCH_MODULE(ConformerBlock);

}  // namespace dgtse

#endif  // DGTSE_ATTENTION_HPP_
