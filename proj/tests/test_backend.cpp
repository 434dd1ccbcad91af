// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <cmath>
#include <optional>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "dgtse/backend.hpp"

using namespace dgtse;

namespace {

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

CodecConfig matching_codec() {
  CodecConfig cfg;
  cfg.latent_dim = 6;
  cfg.base_channels = 4;
  cfg.n_stages = 2;  // hop 16
  cfg.rvq = RvqConfig{3, 8, 6};
  return cfg;
}

NeuralCodec fitted_codec(uint64_t seed) {
  NeuralCodec codec(matching_codec());
  torch::manual_seed(seed);
  codec->quantizer()->kmeans_init(
      codec->encode_latent(torch::randn({1, 2048}) * 0.3).detach(), seed);
  return codec;
}

ResidualVq fitted_quantizer(uint64_t seed) { return fitted_codec(seed)->quantizer(); }

// Heads are born at zero for a uniform first prediction; tests that need
// distinct logits give them random weights first.
void randomize_heads(ArDecoder dec) {
  torch::NoGradGuard ng;
  for (auto& head : dec->heads()) {
    head->weight.normal_(0.0, 0.5);
    head->bias.normal_(0.0, 0.5);
  }
}

torch::Tensor random_tokens(int64_t batch, int64_t layers, int64_t frames,
                            int64_t vocab) {
  return torch::randint(0, vocab, {batch, layers, frames}, torch::kLong);
}

}  // namespace

TEST_CASE("backend validates its configuration", "[backend]") {
  auto bad = tiny_backend();
  bad.d_model = 33;
  CHECK_THROWS_AS(Backend(bad), ConfigError);
  bad = tiny_backend();
  bad.decoder_heads = 5;
  CHECK_THROWS_AS(Backend(bad), ConfigError);
  bad = tiny_backend();
  bad.n_coarse = 0;
  CHECK_THROWS_AS(Backend(bad), ConfigError);
  bad = tiny_backend();
  bad.codebook_size = 1;
  CHECK_THROWS_AS(Backend(bad), ConfigError);
}

TEST_CASE("conformer encoder shares weights across streams", "[backend]") {
  torch::manual_seed(107);
  auto cfg = tiny_backend();
  ConformerEncoder enc(cfg);

  auto mel = torch::randn({1, cfg.mel.n_mels, 12});
  torch::NoGradGuard ng;
  auto as_mix = enc->forward(mel);
  auto as_ref = enc->forward(mel);
  REQUIRE(as_mix.sizes() == std::vector<int64_t>{1, 12, cfg.d_model});
  CHECK(torch::equal(as_mix, as_ref));

  CHECK_THROWS_AS(enc->forward(torch::randn({1, cfg.mel.n_mels + 1, 12})),
                  ShapeError);
  CHECK_THROWS_AS(enc->forward_latent(torch::randn({1, 12, cfg.latent_dim + 1})),
                  ShapeError);
}

TEST_CASE("conformer encoder carries gradient to its weights", "[backend]") {
  torch::manual_seed(109);
  auto cfg = tiny_backend();
  ConformerEncoder enc(cfg);
  enc->forward(torch::randn({1, cfg.mel.n_mels, 9})).pow(2).sum().backward();
  double total = 0.0;
  for (auto& p : enc->parameters())
    if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
  CHECK(total > 0.0);
}

TEST_CASE("sequence layout counts every slot", "[backend]") {
  torch::manual_seed(113);
  auto cfg = tiny_backend();
  ArDecoder dec(cfg);
  auto rvq = fitted_quantizer(113);

  const int64_t L_r = 4, L_m = 7, L_t = 5;
  auto e_r = torch::randn({2, L_r, cfg.d_model});
  auto e_m = torch::randn({2, L_m, cfg.d_model});
  auto toks = random_tokens(2, cfg.n_coarse, L_t, cfg.codebook_size);

  auto seq = dec->build_sequence(e_r, e_m, toks, rvq);
  REQUIRE(seq.embedded.size(1) == 1 + L_r + 1 + L_m + 1 + L_t + 1);
  CHECK(seq.label_start == 1 + L_r + 1 + L_m + 1);
  CHECK(seq.target_frames == L_t);
  REQUIRE(seq.labels.sizes() == std::vector<int64_t>{2, cfg.n_coarse, L_t + 1});
  CHECK(torch::equal(seq.labels.narrow(2, 0, L_t), toks));
  CHECK((seq.labels.select(2, L_t) == cfg.eos_id()).all().item<bool>());

  // Kinds trace the documented order.
  std::vector<int64_t> want;
  want.push_back((int64_t)SlotKind::kBos);
  want.insert(want.end(), L_r, (int64_t)SlotKind::kRef);
  want.push_back((int64_t)SlotKind::kSep);
  want.insert(want.end(), L_m, (int64_t)SlotKind::kMix);
  want.push_back((int64_t)SlotKind::kTse);
  want.insert(want.end(), L_t, (int64_t)SlotKind::kTarget);
  want.push_back((int64_t)SlotKind::kEos);
  CHECK(torch::equal(seq.kinds, torch::tensor(want, torch::kLong)));

  // Generation-mode sequence stops after the tse slot.
  auto open = dec->build_sequence(e_r, e_m, std::nullopt, rvq);
  CHECK(open.embedded.size(1) == 1 + L_r + 1 + L_m + 1);
  CHECK(open.label_start == -1);
  CHECK_THROWS_AS(dec->forward_loss(open), DataError);
}

TEST_CASE("ref-output layout drops the separator", "[backend]") {
  torch::manual_seed(127);
  auto cfg = tiny_backend();
  cfg.output_layout = BackendConfig::OutputLayout::kRefOutput;
  ArDecoder dec(cfg);
  auto rvq = fitted_quantizer(127);

  const int64_t L_r = 3, L_m = 6, L_t = 9;  // target = enrollment + clean
  auto seq = dec->build_sequence(torch::randn({1, L_r, cfg.d_model}),
                                 torch::randn({1, L_m, cfg.d_model}),
                                 random_tokens(1, 2, L_t, cfg.codebook_size), rvq);
  CHECK(seq.embedded.size(1) == 1 + L_r + L_m + 1 + L_t + 1);
  CHECK(seq.label_start == 1 + L_r + L_m + 1);
  CHECK((seq.kinds != (int64_t)SlotKind::kSep).all().item<bool>());
}

TEST_CASE("sequence builder rejects malformed targets", "[backend]") {
  torch::manual_seed(131);
  auto cfg = tiny_backend();
  ArDecoder dec(cfg);
  auto rvq = fitted_quantizer(131);
  auto e_r = torch::randn({1, 3, cfg.d_model});
  auto e_m = torch::randn({1, 5, cfg.d_model});

  CHECK_THROWS_AS(dec->build_sequence(e_r, e_m,
                                      random_tokens(1, 3, 4, cfg.codebook_size),
                                      rvq),
                  ShapeError);
  CHECK_THROWS_AS(
      dec->build_sequence(e_r, e_m, torch::zeros({1, 2, 0}, torch::kLong), rvq),
      DataError);
  CHECK_THROWS_AS(dec->build_sequence(e_r, torch::randn({2, 5, cfg.d_model}),
                                      std::nullopt, rvq),
                  ShapeError);
  CHECK_THROWS_AS(dec->build_sequence(e_r, torch::randn({1, 5, cfg.d_model - 1}),
                                      std::nullopt, rvq),
                  ShapeError);
}

TEST_CASE("untrained decoder starts at the uniform cross-entropy", "[backend]") {
  torch::manual_seed(137);
  auto cfg = tiny_backend();
  ArDecoder dec(cfg);
  auto rvq = fitted_quantizer(137);

  auto seq = dec->build_sequence(torch::randn({2, 4, cfg.d_model}),
                                 torch::randn({2, 6, cfg.d_model}),
                                 random_tokens(2, 2, 5, cfg.codebook_size), rvq);
  auto out = dec->forward_loss(seq);
  const double uniform = std::log(static_cast<double>(cfg.vocab()));
  CHECK(std::abs(out.loss.item<double>() - uniform) < 1e-5);

  // Per head as well, straight from the logits.
  namespace F = torch::nn::functional;
  for (int h = 0; h < cfg.n_coarse; ++h) {
    auto pred = out.logits[h]
                    .narrow(1, seq.label_start - 1, seq.target_frames + 1)
                    .reshape({-1, cfg.vocab()});
    auto gold = seq.labels.select(1, h).reshape({-1});
    double ce = F::cross_entropy(pred, gold).item<double>();
    CHECK(std::abs(ce - uniform) < 1e-5);
  }
}

TEST_CASE("decoder is causal over the target region", "[backend]") {
  torch::manual_seed(139);
  auto cfg = tiny_backend();
  ArDecoder dec(cfg);
  randomize_heads(dec);
  auto rvq = fitted_quantizer(139);

  const int64_t L_t = 6;
  auto e_r = torch::randn({1, 3, cfg.d_model});
  auto e_m = torch::randn({1, 5, cfg.d_model});
  auto toks = random_tokens(1, 2, L_t, cfg.codebook_size);

  torch::NoGradGuard ng;
  auto seq = dec->build_sequence(e_r, e_m, toks, rvq);
  auto base = dec->forward_loss(seq);

  const int64_t t = 3;  // perturbed target frame
  auto bumped = toks.clone();
  bumped.index_put_({0, 0, t},
                    (bumped.index({0, 0, t}).item<int64_t>() + 1) %
                        cfg.codebook_size);
  auto other = dec->forward_loss(dec->build_sequence(e_r, e_m, bumped, rvq));

  // The changed embedding sits at sequence position label_start + t, so
  // every logit row before it is identical to the bit and some row at or
  // after it must move.
  const int64_t cut = seq.label_start + t;
  for (int h = 0; h < cfg.n_coarse; ++h) {
    auto a = base.logits[h];
    auto b = other.logits[h];
    CHECK(torch::equal(a.narrow(1, 0, cut), b.narrow(1, 0, cut)));
    CHECK((a.narrow(1, cut, a.size(1) - cut) - b.narrow(1, cut, b.size(1) - cut))
              .abs()
              .max()
              .item<double>() > 0.0);
  }
}

TEST_CASE("cross-entropy reads only target and eos positions", "[backend]") {
  torch::manual_seed(149);
  auto cfg = tiny_backend();
  ArDecoder dec(cfg);
  randomize_heads(dec);
  auto rvq = fitted_quantizer(149);

  auto seq = dec->build_sequence(torch::randn({1, 4, cfg.d_model}),
                                 torch::randn({1, 5, cfg.d_model}),
                                 random_tokens(1, 2, 6, cfg.codebook_size), rvq);
  auto out = dec->forward_loss(seq);
  for (auto& l : out.logits) l.retain_grad();
  out.loss.backward();

  for (int h = 0; h < cfg.n_coarse; ++h) {
    auto g = out.logits[h].grad();
    REQUIRE(g.defined());
    const int64_t lo = seq.label_start - 1;
    const int64_t n_labels = seq.target_frames + 1;
    // The label path touches exactly the prediction rows for the target
    // region plus eos; every other row's logits get zero gradient.
    CHECK(g.narrow(1, 0, lo).abs().max().item<double>() == 0.0);
    CHECK(g.narrow(1, lo + n_labels, g.size(1) - lo - n_labels)
              .abs()
              .max()
              .item<double>() == 0.0);
    CHECK(g.narrow(1, lo, n_labels).abs().max().item<double>() > 0.0);
  }
}

TEST_CASE("greedy generation matches the teacher-forced forward", "[backend]") {
  torch::manual_seed(151);
  auto cfg = tiny_backend();
  ArDecoder dec(cfg);
  randomize_heads(dec);
  auto rvq = fitted_quantizer(151);

  auto e_r = torch::randn({1, 3, cfg.d_model});
  auto e_m = torch::randn({1, 5, cfg.d_model});

  torch::NoGradGuard ng;
  std::vector<torch::Tensor> steps;
  auto tokens = dec->generate(e_r, e_m, rvq, &steps);
  const int64_t L = tokens.size(2);
  REQUIRE(L >= 1);
  REQUIRE(static_cast<int64_t>(steps.size()) >= L);

  auto seq = dec->build_sequence(e_r, e_m, tokens, rvq);
  auto full = dec->forward_loss(seq);
  for (int64_t f = 0; f < static_cast<int64_t>(steps.size()) && f <= L; ++f) {
    for (int h = 0; h < cfg.n_coarse; ++h) {
      auto train_row = full.logits[h].index({0, seq.label_start - 1 + f});
      auto gen_row = steps[f][h];
      INFO("frame " << f << " head " << h);
      CHECK((train_row - gen_row).abs().max().item<double>() < 1e-5);
    }
  }
}

TEST_CASE("generation is deterministic, capped, and eos-free", "[backend]") {
  torch::manual_seed(157);
  auto cfg = tiny_backend();
  ArDecoder dec(cfg);
  randomize_heads(dec);
  auto rvq = fitted_quantizer(157);

  auto e_r = torch::randn({1, 4, cfg.d_model});
  auto e_m = torch::randn({1, 6, cfg.d_model});

  torch::NoGradGuard ng;
  auto a = dec->generate(e_r, e_m, rvq);
  auto b = dec->generate(e_r, e_m, rvq);
  CHECK(torch::equal(a, b));

  const auto cap = static_cast<int64_t>(std::ceil(6 * cfg.generation_cap_factor));
  CHECK(a.size(2) >= 1);
  CHECK(a.size(2) <= cap);
  // The eos id never appears in emitted tokens.
  CHECK(a.max().item<int64_t>() < cfg.codebook_size);
  CHECK(a.min().item<int64_t>() >= 0);

  CHECK_THROWS_AS(dec->generate(torch::randn({2, 4, cfg.d_model}),
                                torch::randn({2, 6, cfg.d_model}), rvq),
                  ShapeError);
}

TEST_CASE("refiner output covers exactly the coarse region", "[backend]") {
  torch::manual_seed(163);
  auto cfg = tiny_backend();

  for (auto streams : {BackendConfig::RefinerStreams::kAll,
                       BackendConfig::RefinerStreams::kMixOnly,
                       BackendConfig::RefinerStreams::kRefOnly}) {
    auto c = cfg;
    c.refiner_streams = streams;
    Refiner refiner(c);
    for (int64_t L_r : {2, 5}) {
      for (int64_t L_t : {3, 8}) {
        auto out = refiner->forward(torch::randn({1, L_r, c.d_model}),
                                    torch::randn({1, 7, c.d_model}),
                                    torch::randn({1, L_t, c.latent_dim}));
        CHECK(out.sizes() == std::vector<int64_t>{1, L_t, c.latent_dim});
      }
    }
  }

  Refiner refiner(cfg);
  CHECK_THROWS_AS(refiner->forward(torch::randn({1, 2, cfg.d_model}),
                                   torch::randn({1, 3, cfg.d_model}),
                                   torch::randn({1, 4, cfg.latent_dim + 1})),
                  ShapeError);

  // Perfect prediction scores zero.
  auto x = torch::randn({1, 5, cfg.latent_dim});
  CHECK(refine_l1l2_loss(x, x).item<double>() == 0.0);
  CHECK(refine_l1l2_loss(x, x + 1.0).item<double>() > 0.0);
}

TEST_CASE("backend extraction produces finite audio of the asked length",
          "[backend]") {
  torch::manual_seed(167);
  auto codec = fitted_codec(167);

  for (auto layout : {BackendConfig::OutputLayout::kAligned,
                      BackendConfig::OutputLayout::kRefOutput}) {
    auto cfg = tiny_backend();
    cfg.output_layout = layout;
    Backend backend(cfg);
    randomize_heads(backend->decoder());

    auto mixture = torch::randn({1, 640}) * 0.1;
    auto enrollment = torch::randn({1, 320}) * 0.1;
    auto wave = backend->extract(mixture, enrollment, codec, 640);
    REQUIRE(wave.sizes() == std::vector<int64_t>{1, 640});
    CHECK(wave.isfinite().all().item<bool>());
  }
}

TEST_CASE("discrete input mode runs the same pipeline", "[backend]") {
  torch::manual_seed(173);
  auto cfg = tiny_backend();
  cfg.input_mode = BackendConfig::InputMode::kDiscrete;
  Backend backend(cfg);
  randomize_heads(backend->decoder());
  auto codec = fitted_codec(173);

  auto stream = backend->encode_stream(torch::randn({1, 320}) * 0.1, codec);
  REQUIRE(stream.dim() == 3);
  CHECK(stream.size(2) == cfg.d_model);
  CHECK(stream.size(1) == codec->frames_for(320));

  auto wave = backend->extract(torch::randn({1, 480}) * 0.1,
                               torch::randn({1, 320}) * 0.1, codec, 480);
  CHECK(wave.isfinite().all().item<bool>());
}
