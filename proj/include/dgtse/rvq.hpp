// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_RVQ_HPP_
#define DGTSE_RVQ_HPP_

#include <vector>

#include "dgtse/common.hpp"

namespace dgtse {

struct RvqConfig {
  int n_layers = 4;
  int codebook_size = 256;
  int dim = 128;
};

inline void validate(const RvqConfig& cfg) {
  if (cfg.n_layers <= 0 || cfg.dim <= 0)
    throw ConfigError("rvq: all sizes must be positive");
  if (cfg.codebook_size < 2)
    throw ConfigError("rvq: codebook needs at least two entries");
}

struct RvqOutput {
  torch::Tensor tokens;     // [B, K, T] int64
  torch::Tensor quantized;  // [B, T, dim], straight-through estimate
  torch::Tensor commitment_loss;
  torch::Tensor codebook_loss;
  std::vector<torch::Tensor> residuals;  // [B, T, dim] after each layer, detached
};

// Residual vector quantizer. Each layer snaps the running residual to its
// nearest codeword (squared L2, first index wins ties) and subtracts it.
// The forward value of `quantized` is the exact codeword sum; its gradient
// passes straight through to the input.
//
// Entry 0 of every codebook is pinned to the zero vector and excluded from
// k-means and gradient updates. Selection therefore always has a no-op
// option, which makes each layer non-expansive: the residual norm can never
// grow, for any input and any training state.
class ResidualVqImpl : public torch::nn::Module {
 public:
  explicit ResidualVqImpl(RvqConfig cfg) : cfg_(cfg) {
    validate(cfg);
    codebooks_ = register_parameter(
        "codebooks",
        torch::randn({cfg.n_layers, cfg.codebook_size, cfg.dim}) * 0.1);
    auto mask = torch::ones({cfg.codebook_size, 1});
    mask[0] = 0.0f;
    pin_mask_ = register_buffer("pin_mask", mask);
    fitted_ = register_buffer("fitted", torch::zeros({1}));
  }

  const RvqConfig& config() const { return cfg_; }
  bool fitted() const { return fitted_.item<float>() > 0.5f; }

  // Codewords as used for selection and lookup, zero pin applied.
  torch::Tensor codebook(int layer) const { return codebooks_[layer] * pin_mask_; }

  // Seeds every codebook with k-means on the given latents, layer by layer
  // on the running residual. A cheap Lloyd iteration count is enough: the
  // point is to land codewords inside the data cloud so training does not
  // start from dead codes.
  void kmeans_init(const torch::Tensor& latents, uint64_t seed, int iters = 10) {
    if (latents.dim() != 3 || latents.size(2) != cfg_.dim)
      throw ShapeError("rvq: kmeans_init expects [B, T, dim]");
    torch::NoGradGuard ng;
    auto flat = latents.reshape({-1, cfg_.dim}).to(torch::kFloat).detach();
    const int64_t n = flat.size(0);
    if (n < cfg_.codebook_size)
      throw DataError("rvq: need at least codebook_size latent vectors to init");
    auto rng = make_rng(seed);
    auto residual = flat.clone();
    for (int k = 0; k < cfg_.n_layers; ++k) {
      // Rows 1.. come from k-means; row 0 stays the pinned zero codeword.
      auto centers = kmeans(residual, cfg_.codebook_size - 1, iters, rng);
      codebooks_[k][0].zero_();
      codebooks_[k].narrow(0, 1, cfg_.codebook_size - 1).copy_(centers);
      auto layer_cb = codebook(k);
      auto idx = nearest(residual, layer_cb);
      residual -= layer_cb.index_select(0, idx);
    }
    fitted_[0] = 1.0f;
  }

  RvqOutput forward(const torch::Tensor& z) {
    if (z.dim() != 3 || z.size(2) != cfg_.dim)
      throw ShapeError("rvq: expected [B, T, dim]");
    if (!fitted()) throw NotFitted("rvq: kmeans_init has not run");
    auto flat = z.reshape({-1, cfg_.dim});
    auto residual = flat.detach();
    auto quant = torch::zeros_like(flat);
    std::vector<torch::Tensor> toks;
    RvqOutput out;
    for (int k = 0; k < cfg_.n_layers; ++k) {
      auto layer_cb = codebook(k);
      auto idx = nearest(residual, layer_cb);
      auto q = layer_cb.index_select(0, idx);
      toks.push_back(idx);
      quant = quant + q;
      residual = residual - q.detach();
      out.residuals.push_back(
          residual.reshape({z.size(0), z.size(1), cfg_.dim}));
    }
    out.tokens = torch::stack(toks, 0)
                     .reshape({cfg_.n_layers, z.size(0), z.size(1)})
                     .permute({1, 0, 2})
                     .contiguous();
    out.commitment_loss = torch::mse_loss(flat, quant.detach());
    out.codebook_loss = torch::mse_loss(quant, flat.detach());
    out.quantized = (flat + (quant - flat).detach()).reshape_as(z);
    return out;
  }

  // Codeword sum for given token ids; layers [0, n) of a [B, K', T] grid
  // with K' <= n_layers.
  torch::Tensor lookup(const torch::Tensor& tokens) const {
    if (tokens.dim() != 3 || tokens.size(1) > cfg_.n_layers)
      throw ShapeError("rvq: lookup expects [B, K<=n_layers, T]");
    auto out = torch::zeros({tokens.size(0), tokens.size(2), cfg_.dim},
                            codebooks_.options());
    for (int64_t k = 0; k < tokens.size(1); ++k) {
      auto idx = tokens.select(1, k).reshape({-1});
      out += codebook(static_cast<int>(k))
                 .index_select(0, idx)
                 .reshape({tokens.size(0), tokens.size(2), cfg_.dim});
    }
    return out;
  }

  // Differentiable codeword sum from per-layer probability rows, with hard
  // snapping on the forward value: forward(p) equals lookup(argmax p) while
  // the gradient treats the soft mixture as the output.
  torch::Tensor lookup_soft_hard(const std::vector<torch::Tensor>& probs) const {
    if (probs.empty() || static_cast<int>(probs.size()) > cfg_.n_layers)
      throw ShapeError("rvq: need 1..n_layers probability grids");
    torch::Tensor out;
    for (size_t k = 0; k < probs.size(); ++k) {
      const auto& p = probs[k];  // [B, T, codebook_size]
      if (p.dim() != 3 || p.size(2) != cfg_.codebook_size)
        throw ShapeError("rvq: probability grid must be [B, T, codebook_size]");
      auto layer_cb = codebook(static_cast<int>(k));
      auto soft = torch::matmul(p, layer_cb);
      auto hard = layer_cb.index_select(0, p.argmax(-1).reshape({-1}))
                      .reshape_as(soft);
      auto q = soft + (hard - soft).detach();
      out = out.defined() ? out + q : q;
    }
    return out;
  }

 private:
  static torch::Tensor nearest(const torch::Tensor& x, const torch::Tensor& centers) {
    // ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; the ||x||^2 term does not
    // affect the argmin. argmin returns the first minimal index.
    auto scores = torch::matmul(x, centers.transpose(0, 1)) * 2.0 -
                  (centers * centers).sum(1);
    return scores.argmax(1);
  }

  static torch::Tensor kmeans(const torch::Tensor& x, int k, int iters,
                              std::mt19937_64& rng) {
    const int64_t n = x.size(0);
    std::vector<int64_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    perm.resize(k);
    auto centers =
        x.index_select(0, torch::tensor(perm, torch::kLong)).clone();
    for (int it = 0; it < iters; ++it) {
      auto assign = nearest(x, centers);
      auto sums = torch::zeros_like(centers);
      auto counts = torch::zeros({k}, x.options());
      sums.index_add_(0, assign, x);
      counts.index_add_(0, assign, torch::ones({n}, x.options()));
      auto mask = counts > 0;
      auto updated = sums / counts.clamp_min(1).unsqueeze(1);
      centers = torch::where(mask.unsqueeze(1), updated, centers);
    }
    return centers;
  }

  RvqConfig cfg_;
  torch::Tensor codebooks_;
  torch::Tensor pin_mask_;
  torch::Tensor fitted_;
};
TORCH_MODULE(ResidualVq);

}  // namespace dgtse

#endif  // DGTSE_RVQ_HPP_
