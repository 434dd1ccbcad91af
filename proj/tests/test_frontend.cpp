// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "dgtse/frontend.hpp"
#include "dgtse/sisdr.hpp"

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

}  // namespace

TEST_CASE("frontend validates its configuration", "[frontend]") {
  auto bad = tiny_frontend();
  bad.width = 0;
  CHECK_THROWS_AS(Frontend(bad), ConfigError);
  bad = tiny_frontend();
  bad.att_heads = 3;  // does not divide width 4
  CHECK_THROWS_AS(Frontend(bad), ConfigError);
  bad = tiny_frontend();
  bad.n_blocks = 0;
  CHECK_THROWS_AS(Frontend(bad), ConfigError);
}

TEST_CASE("spectrogram encoder shapes and zero response", "[frontend]") {
  torch::manual_seed(61);
  FrontendConfig cfg;  // default: 320/320/160 STFT, 128 channels
  TfEncoder enc(cfg);

  auto one_second = torch::randn({1, 16000}) * 0.1;
  auto feat = enc->forward(one_second);
  REQUIRE(feat.dim() == 4);
  CHECK(feat.size(0) == 1);
  CHECK(feat.size(1) == 128);
  CHECK(feat.size(2) == cfg.stft.bins());
  CHECK(feat.size(3) == 101);

  // All-zero input leaves only the convolution bias, identically per call.
  auto z1 = enc->forward(torch::zeros({1, 16000}));
  auto z2 = enc->forward(torch::zeros({1, 16000}));
  CHECK(torch::equal(z1, z2));
  auto bias = enc->named_parameters()["conv.bias"].reshape({1, 128, 1, 1});
  CHECK((z1 - bias).abs().max().item<double>() < 1e-12);
}

TEST_CASE("cross attention keeps the mixture frame count", "[frontend]") {
  torch::manual_seed(67);
  auto cfg = tiny_frontend();
  Cmha cmha(cfg);

  const int64_t bins = 5;
  auto mix = torch::randn({2, cfg.width, bins, 13});
  for (int64_t ref_frames : {1, 10, 40, 200}) {
    auto ref = torch::randn({2, cfg.width, bins, ref_frames});
    auto out = cmha->forward(mix, ref);
    INFO("enrollment frames " << ref_frames);
    CHECK(out.sizes() == mix.sizes());
  }

  CHECK_THROWS_AS(cmha->forward(mix, torch::randn({2, cfg.width + 1, bins, 7})),
                  ShapeError);
  CHECK_THROWS_AS(cmha->forward(mix, torch::randn({2, cfg.width, bins + 1, 7})),
                  ShapeError);
  CHECK_THROWS_AS(cmha->forward(torch::randn({2, cfg.width, bins}), mix),
                  ShapeError);
}

TEST_CASE("cross attention over a single enrollment frame", "[frontend]") {
  torch::manual_seed(71);
  auto cfg = tiny_frontend();
  Cmha cmha(cfg);

  // A softmax over one key puts weight 1.0 on it, so repeating that frame
  // must not change anything.
  auto mix = torch::randn({1, cfg.width, 3, 9});
  auto one = torch::randn({1, cfg.width, 3, 1});
  auto repeated = one.repeat({1, 1, 1, 6});
  auto a = cmha->forward(mix, one);
  auto b = cmha->forward(mix, repeated);
  CHECK((a - b).abs().max().item<double>() < 1e-5);
}

TEST_CASE("cross attention ignores enrollment frame order", "[frontend]") {
  torch::manual_seed(73);
  auto cfg = tiny_frontend();
  Cmha cmha(cfg);

  auto mix = torch::randn({1, cfg.width, 4, 11});
  auto ref = torch::randn({1, cfg.width, 4, 17});
  auto perm = torch::randperm(17);
  auto shuffled = ref.index_select(3, perm);
  auto a = cmha->forward(mix, ref);
  auto b = cmha->forward(mix, shuffled);
  CHECK((a - b).abs().max().item<double>() < 1e-5);
}

TEST_CASE("channel fusion concatenates and is lossless", "[frontend]") {
  torch::manual_seed(79);
  auto a = torch::randn({2, 4, 5, 7});
  auto b = torch::randn({2, 4, 5, 7});
  auto fused = fuse_concat(a, b);
  REQUIRE(fused.sizes() == std::vector<int64_t>{2, 8, 5, 7});
  CHECK(torch::equal(fused.narrow(1, 0, 4), a));
  CHECK(torch::equal(fused.narrow(1, 4, 4), b));

  auto with_zero = fuse_concat(a, torch::zeros_like(a));
  CHECK(torch::equal(with_zero.narrow(1, 0, 4), a));

  CHECK_THROWS_AS(fuse_concat(a, torch::randn({2, 4, 5, 8})), ShapeError);
  CHECK_THROWS_AS(fuse_concat(a, torch::randn({4, 5, 7})), ShapeError);
}

TEST_CASE("grid block preserves shape and passes gradient everywhere",
          "[frontend]") {
  torch::manual_seed(83);
  auto cfg = tiny_frontend();
  TfGridBlock block(cfg);

  auto x = torch::randn({1, 2 * cfg.width, 9, 8}).set_requires_grad(true);
  auto y = block->forward(x);
  REQUIRE(y.sizes() == x.sizes());

  y.pow(2).sum().backward();
  REQUIRE(x.grad().defined());
  // Every time-frequency position receives gradient.
  auto per_pos = x.grad().abs().sum(1);
  CHECK((per_pos > 0).all().item<bool>());

  CHECK_THROWS_AS(block->forward(torch::randn({2 * cfg.width, 9, 8})),
                  ShapeError);
}

TEST_CASE("grid block with zeroed weights is the identity", "[frontend]") {
  torch::manual_seed(89);
  auto cfg = tiny_frontend();
  TfGridBlock block(cfg);
  {
    torch::NoGradGuard ng;
    for (auto& p : block->parameters()) p.zero_();
  }
  auto x = torch::randn({2, 2 * cfg.width, 5, 6});
  auto y = block->forward(x);
  CHECK(torch::equal(y, x));
}

TEST_CASE("frontend output matches the mixture length", "[frontend]") {
  torch::manual_seed(97);
  Frontend fe(tiny_frontend());
  auto enroll = torch::randn({1, 300}) * 0.1;
  for (int64_t n : {150, 201, 256, 300, 333, 400, 511}) {
    auto mix = torch::randn({1, n}) * 0.1;
    auto est = fe->forward(mix, enroll);
    INFO("mixture length " << n);
    CHECK(est.sizes() == mix.sizes());
    CHECK(est.isfinite().all().item<bool>());
  }
  CHECK_THROWS_AS(fe->forward(torch::randn({400}), enroll), ShapeError);
}

TEST_CASE("frontend inference is deterministic", "[frontend]") {
  torch::manual_seed(101);
  Frontend fe(tiny_frontend());
  auto mix = torch::randn({1, 320}) * 0.1;
  auto enroll = torch::randn({1, 256}) * 0.1;
  torch::NoGradGuard ng;
  auto a = fe->forward(mix, enroll);
  auto b = fe->forward(mix, enroll);
  CHECK(torch::equal(a, b));
}

TEST_CASE("extraction loss differentiates back to the mixture", "[frontend]") {
  torch::manual_seed(103);
  Frontend fe(tiny_frontend());
  fe->to(torch::kDouble);

  auto mix = (torch::randn({1, 200}, torch::kDouble) * 0.1)
                 .set_requires_grad(true);
  auto enroll = torch::randn({1, 200}, torch::kDouble) * 0.1;
  auto target = torch::randn({1, 200}, torch::kDouble) * 0.1;

  auto loss = si_sdr_loss(fe->forward(mix, enroll), target);
  loss.backward();
  REQUIRE(mix.grad().defined());

  // Central differences on a few sample positions against the analytic
  // gradient of the same scalar.
  auto base = mix.detach().clone();
  auto eval_at = [&](const torch::Tensor& m) {
    torch::NoGradGuard ng;
    return si_sdr_loss(fe->forward(m, enroll), target).item<double>();
  };
  const double h = 1e-5;
  for (int64_t idx : {3, 57, 111, 198}) {
    auto plus = base.clone();
    auto minus = base.clone();
    plus[0][idx] += h;
    minus[0][idx] -= h;
    double fd = (eval_at(plus) - eval_at(minus)) / (2 * h);
    double an = mix.grad()[0][idx].item<double>();
    INFO("sample " << idx << " fd " << fd << " analytic " << an);
    CHECK(std::abs(fd - an) <= 1e-3 * std::max(1.0, std::abs(an)));
  }
}
