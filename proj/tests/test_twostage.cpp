// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "dgtse/checkpoint.hpp"
#include "dgtse/two_stage.hpp"

using namespace dgtse;

namespace {

FrontendConfig tiny_frontend() {
  FrontendConfig cfg;
  cfg.stft = StftConfig{64, 64, 32};
  cfg.width = 4;
  cfg.n_blocks = 1;
  cfg.att_heads = 2;
  cfg.att_ffn = 8;
  cfg.blstm_hidden = 3;
  return cfg;
}

BackendConfig tiny_backend() {
  BackendConfig cfg;
  cfg.mel = MelConfig{StftConfig{128, 128, 64}, 16, 16000, 0.0, 0.0};
  cfg.d_model = 32;
  cfg.conformer_layers = 1;
  cfg.conformer_heads = 4;
  cfg.decoder_blocks = 2;
  cfg.decoder_heads = 4;
  cfg.refiner_layers = 1;
  cfg.refiner_heads = 4;
  cfg.ffn_dim = 32;
  cfg.conv_kernel = 7;
  cfg.n_coarse = 2;
  cfg.codebook_size = 8;
  cfg.latent_dim = 6;
  return cfg;
}

CodecConfig tiny_codec() {
  CodecConfig cfg;
  cfg.latent_dim = 6;
  cfg.base_channels = 4;
  cfg.n_stages = 2;  // hop 16
  cfg.rvq = RvqConfig{3, 8, 6};
  return cfg;
}

TwoStage make_system(uint64_t seed, bool use_enrollment = true) {
  torch::manual_seed(seed);
  Frontend fe(tiny_frontend());
  Backend be(tiny_backend());
  NeuralCodec codec(tiny_codec());
  codec->quantizer()->kmeans_init(
      codec->encode_latent(torch::randn({1, 2048}) * 0.3).detach(), seed);
  {
    torch::NoGradGuard ng;
    for (auto& head : be->decoder()->heads()) {
      head->weight.normal_(0.0, 0.5);
      head->bias.normal_(0.0, 0.5);
    }
  }
  return TwoStage(fe, be, codec, use_enrollment);
}

struct Batch {
  torch::Tensor mixture, enrollment, target;
};

Batch make_batch(uint64_t seed) {
  torch::manual_seed(seed + 1000);
  return {torch::randn({1, 640}) * 0.1, torch::randn({1, 320}) * 0.1,
          torch::randn({1, 640}) * 0.1};
}

void clear_grads(const std::vector<torch::Tensor>& params) {
  for (auto p : params) p.mutable_grad() = torch::Tensor();
}

double grad_abs_sum(const std::vector<torch::Tensor>& params) {
  double total = 0.0;
  for (const auto& p : params)
    if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
  return total;
}

}  // namespace

TEST_CASE("two-stage rejects mismatched stage dimensions", "[twostage]") {
  torch::manual_seed(179);
  Frontend fe(tiny_frontend());

  auto bad_latent = tiny_backend();
  bad_latent.latent_dim = 7;
  CHECK_THROWS_AS(TwoStage(fe, Backend(bad_latent), NeuralCodec(tiny_codec())),
                  ConfigError);

  auto bad_coarse = tiny_backend();
  bad_coarse.n_coarse = 4;  // codec has 3 layers
  CHECK_THROWS_AS(TwoStage(fe, Backend(bad_coarse), NeuralCodec(tiny_codec())),
                  ConfigError);
}

TEST_CASE("joint training needs a pretrained front-end", "[twostage]") {
  auto ts = make_system(181);
  auto b = make_batch(181);
  CHECK_THROWS_AS(ts.train_step(b.mixture, b.enrollment, b.target, {}),
                  NotFitted);
  ts.mark_frontend_pretrained();
  auto out = ts.train_step(b.mixture, b.enrollment, b.target, {});
  CHECK(std::isfinite(out.losses.ce));
  CHECK(std::isfinite(out.losses.refine));
  CHECK(out.d_o.sizes() == b.mixture.sizes());
}

TEST_CASE("freeze flag changes gradients, never forward values", "[twostage]") {
  auto ts = make_system(191);
  ts.mark_frontend_pretrained();
  auto b = make_batch(191);

  StrategyConfig frozen;
  frozen.freeze_frontend = true;
  StrategyConfig open = frozen;
  open.freeze_frontend = false;

  auto a = ts.train_step(b.mixture, b.enrollment, b.target, frozen);
  auto c = ts.train_step(b.mixture, b.enrollment, b.target, open);
  CHECK(torch::equal(a.d_o, c.d_o));
  CHECK(a.losses.ce == c.losses.ce);
  CHECK(a.losses.refine == c.losses.refine);
  CHECK(a.losses.total.item<float>() == c.losses.total.item<float>());
}

TEST_CASE("frozen mode leaves the front-end digest untouched", "[twostage]") {
  auto ts = make_system(193);
  ts.mark_frontend_pretrained();
  StrategyConfig strat;  // frozen by default
  const uint64_t before = module_digest(*ts.frontend());

  torch::optim::Adam opt(ts.trainable_parameters(strat),
                         torch::optim::AdamOptions(1e-3));
  for (int step = 0; step < 5; ++step) {
    auto b = make_batch(193 + step);
    auto out = ts.train_step(b.mixture, b.enrollment, b.target, strat);
    opt.zero_grad();
    out.losses.total.backward();
    opt.step();
  }
  CHECK(module_digest(*ts.frontend()) == before);
}

TEST_CASE("unfrozen training reaches the front-end weights", "[twostage]") {
  auto ts = make_system(197);
  ts.mark_frontend_pretrained();
  ts.set_frozen(false);
  auto b = make_batch(197);

  StrategyConfig strat;
  strat.freeze_frontend = false;
  strat.aux_sisdr = true;
  strat.lambda_sisdr = 1.0;

  clear_grads(ts.frontend()->parameters());
  auto out = ts.train_step(b.mixture, b.enrollment, b.target, strat);
  out.losses.total.backward();
  CHECK(grad_abs_sum(ts.frontend()->parameters()) > 0.0);
  CHECK(out.losses.sisdr_aux != 0.0);
}

TEST_CASE("split mode cuts the refiner gradient to the decoder", "[twostage]") {
  auto ts = make_system(199);
  ts.mark_frontend_pretrained();
  auto b = make_batch(199);
  auto decoder_params = ts.backend()->decoder()->parameters();

  StrategyConfig split;
  split.split_training = true;
  clear_grads(ts.backend()->parameters());
  auto s = ts.train_step(b.mixture, b.enrollment, b.target, split);
  s.losses.refine_term.backward();
  CHECK(grad_abs_sum(decoder_params) == 0.0);

  StrategyConfig joint;
  joint.split_training = false;
  clear_grads(ts.backend()->parameters());
  auto j = ts.train_step(b.mixture, b.enrollment, b.target, joint);
  j.losses.refine_term.backward();
  CHECK(grad_abs_sum(decoder_params) > 0.0);
}

TEST_CASE("zero-weight auxiliary loss is exactly the plain loss", "[twostage]") {
  auto ts = make_system(211);
  ts.mark_frontend_pretrained();
  auto b = make_batch(211);

  StrategyConfig with_aux;
  with_aux.aux_sisdr = true;
  with_aux.lambda_sisdr = 0.0;
  StrategyConfig without;
  without.aux_sisdr = false;

  auto a = ts.train_step(b.mixture, b.enrollment, b.target, with_aux);
  auto c = ts.train_step(b.mixture, b.enrollment, b.target, without);
  CHECK(a.losses.total.item<float>() == c.losses.total.item<float>());
  CHECK(a.losses.sisdr_aux == 0.0);
  CHECK(c.losses.sisdr_aux == 0.0);
}

TEST_CASE("token injection keeps the asked fraction of pseudo labels",
          "[twostage]") {
  const int64_t frames = 10000;
  auto pseudo = torch::zeros({1, 2, frames}, torch::kLong);
  auto predicted = torch::ones({1, 2, frames}, torch::kLong);

  auto merged = nar_merge(pseudo, predicted, 0.5, 42);
  double frac =
      (merged.select(1, 0) == 0).to(torch::kDouble).mean().item<double>();
  CHECK(frac > 0.48);
  CHECK(frac < 0.52);

  // Both token layers of a frame come from the same side.
  CHECK(torch::equal(merged.select(1, 0), merged.select(1, 1)));

  // Exact endpoints.
  CHECK(torch::equal(nar_merge(pseudo, predicted, 1.0, 42), pseudo));
  CHECK(torch::equal(nar_merge(pseudo, predicted, 0.0, 42), predicted));

  // Hamming distance to the pseudo grid shrinks as the ratio grows; with a
  // fixed seed the kept sets nest, so the decrease is exact, not just
  // statistical.
  int64_t prev = frames + 1;
  for (double r : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    auto m = nar_merge(pseudo, predicted, r, 7);
    auto ham = (m.select(1, 0) != 0).sum().item<int64_t>();
    INFO("ratio " << r << " hamming " << ham);
    CHECK(ham < prev);
    prev = ham;
  }

  CHECK_THROWS_AS(nar_merge(pseudo, predicted.narrow(2, 0, 10), 0.5, 1),
                  ShapeError);
  CHECK_THROWS_AS(nar_merge(pseudo, predicted, 1.5, 1), ConfigError);
  CHECK_THROWS_AS(nar_merge(pseudo, predicted, -0.1, 1), ConfigError);
}

TEST_CASE("ar inference returns both stages at the mixture length",
          "[twostage]") {
  auto ts = make_system(223);
  ts.mark_frontend_pretrained();
  auto b = make_batch(223);

  InferenceConfig icfg;
  icfg.mode = InferenceConfig::Mode::kAr;
  auto res = ts.infer(b.mixture, b.enrollment, icfg);
  CHECK(res.d_o.sizes() == b.mixture.sizes());
  CHECK(res.g_o.sizes() == b.mixture.sizes());
  REQUIRE(res.g_tokens.defined());
  CHECK(res.g_tokens.size(1) == 2);
  CHECK(res.g_o.isfinite().all().item<bool>());

  auto again = ts.infer(b.mixture, b.enrollment, icfg);
  CHECK(torch::equal(res.g_o, again.g_o));
  CHECK(torch::equal(res.g_tokens, again.g_tokens));
}

TEST_CASE("full injection reproduces the front-end's tokens", "[twostage]") {
  auto ts = make_system(227);
  ts.mark_frontend_pretrained();
  auto b = make_batch(227);

  InferenceConfig icfg;
  icfg.mode = InferenceConfig::Mode::kNar;
  icfg.injection_ratio = 1.0;
  icfg.seed = 9;
  auto res = ts.infer(b.mixture, b.enrollment, icfg);

  auto pseudo = ts.codec()->encode(res.d_o).tokens.narrow(1, 0, 2);
  CHECK(torch::equal(res.g_tokens, pseudo));
}

TEST_CASE("zero injection yields the one-pass argmax prediction", "[twostage]") {
  auto ts = make_system(229);
  ts.mark_frontend_pretrained();
  auto b = make_batch(229);

  InferenceConfig icfg;
  icfg.mode = InferenceConfig::Mode::kNar;
  icfg.injection_ratio = 0.0;
  icfg.seed = 13;
  auto res = ts.infer(b.mixture, b.enrollment, icfg);

  // Recompute the teacher-forced argmax over the pseudo-token context
  // through the public module interfaces.
  torch::NoGradGuard ng;
  auto backend = ts.backend();
  auto codec = ts.codec();
  auto pseudo = codec->encode(res.d_o).tokens.narrow(1, 0, 2);
  auto e_m = backend->encode_stream(res.d_o, codec);
  auto e_r = backend->encode_stream(b.enrollment, codec);
  auto seq = backend->decoder()->build_sequence(e_r, e_m, pseudo,
                                                codec->quantizer());
  auto fl = backend->decoder()->forward_loss(seq);
  std::vector<torch::Tensor> ids;
  for (auto& logits : fl.logits)
    ids.push_back(logits
                      .narrow(1, seq.label_start - 1, seq.target_frames)
                      .narrow(2, 0, backend->config().codebook_size)
                      .argmax(-1));
  auto predicted = torch::stack(ids, 1);
  CHECK(torch::equal(res.g_tokens, predicted));

  // Same seed, same answer.
  auto again = ts.infer(b.mixture, b.enrollment, icfg);
  CHECK(torch::equal(res.g_tokens, again.g_tokens));

  InferenceConfig bad = icfg;
  bad.injection_ratio = 1.5;
  CHECK_THROWS_AS(ts.infer(b.mixture, b.enrollment, bad), ConfigError);
}

TEST_CASE("backend can run without an enrollment stream", "[twostage]") {
  auto ts = make_system(233, /*use_enrollment=*/false);
  CHECK_FALSE(ts.uses_enrollment());
  ts.mark_frontend_pretrained();
  auto b = make_batch(233);

  auto out = ts.train_step(b.mixture, b.enrollment, b.target, {});
  CHECK(std::isfinite(out.losses.ce));
  CHECK(std::isfinite(out.losses.refine));

  InferenceConfig icfg;
  auto res = ts.infer(b.mixture, b.enrollment, icfg);
  CHECK(res.g_o.sizes() == b.mixture.sizes());
  CHECK(res.g_o.isfinite().all().item<bool>());
}
