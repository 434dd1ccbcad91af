// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <cmath>
#include <filesystem>
#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "dgtse/mel.hpp"
#include "dgtse/mixing.hpp"
#include "dgtse/signal.hpp"
#include "dgtse/sisdr.hpp"
#include "dgtse/wav.hpp"

using namespace dgtse;

namespace {

torch::Tensor random_wave(int64_t n, uint64_t seed, double amp = 0.5) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(-amp, amp);
  auto out = torch::empty({n}, torch::kFloat);
  auto* d = out.data_ptr<float>();
  for (int64_t i = 0; i < n; ++i) d[i] = static_cast<float>(unit(rng));
  return out;
}

// Brute-force double-precision reference for the scale-invariant ratio in
// dB, written against the definition rather than the library internals.
double si_sdr_reference(const torch::Tensor& est, const torch::Tensor& ref) {
  auto e = est.to(torch::kDouble);
  auto r = ref.to(torch::kDouble);
  const double alpha = (e * r).sum().item<double>() / (r * r).sum().item<double>();
  auto target = alpha * r;
  auto noise = e - target;
  const double num = (target * target).sum().item<double>();
  const double den = (noise * noise).sum().item<double>();
  return 10.0 * std::log10(num / std::max(den, num * 1e-6));
}

// Frame count from first principles: reflect padding adds win/2 on both
// sides, the tail is extended to the next hop multiple, and unfold then
// yields (padded - win) / hop + 1 windows.
int64_t frame_count_reference(int64_t n, const StftConfig& cfg) {
  const int64_t half = cfg.win_length / 2;
  const int64_t tail = (cfg.hop_length - n % cfg.hop_length) % cfg.hop_length;
  const int64_t padded = n + 2 * half + tail;
  return (padded - cfg.win_length) / cfg.hop_length + 1;
}

}  // namespace

TEST_CASE("stft frame count follows the hop formula", "[signal]") {
  StftConfig cfg{320, 320, 160};
  for (int64_t n : {161, 320, 480, 1000, 16000, 48000}) {
    auto spec = stft(random_wave(n, n), cfg);
    const auto expect = static_cast<int64_t>(
        std::ceil(static_cast<double>(n) / cfg.hop_length)) + 1;
    REQUIRE(spec.real.size(-1) == expect);
    REQUIRE(spec.real.size(-1) == frame_count_reference(n, cfg));
    REQUIRE(spec.real.size(0) == cfg.bins());
  }
}

TEST_CASE("stft matches a naive windowed dft", "[signal]") {
  StftConfig cfg{16, 16, 8};
  const int64_t n = 64;
  auto x = random_wave(n, 99).to(torch::kDouble);
  auto spec = stft(x, cfg);

  // Reference: pad, window, and transform one frame at a time in plain
  // double loops.
  const int64_t half = cfg.win_length / 2;
  std::vector<double> padded;
  for (int64_t i = half; i >= 1; --i) padded.push_back(x[i].item<double>());
  for (int64_t i = 0; i < n; ++i) padded.push_back(x[i].item<double>());
  for (int64_t i = 0; i < half; ++i) padded.push_back(x[n - 2 - i].item<double>());
  std::vector<double> window(cfg.win_length);
  for (int i = 0; i < cfg.win_length; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / cfg.win_length);

  const int64_t frames = spec.real.size(-1);
  for (int64_t t = 0; t < frames; ++t) {
    for (int k = 0; k <= cfg.fft_size / 2; ++k) {
      double re = 0, im = 0;
      for (int i = 0; i < cfg.win_length; ++i) {
        const double v = padded[t * cfg.hop_length + i] * window[i];
        const double phase = 2.0 * M_PI * k * i / cfg.fft_size;
        re += v * std::cos(phase);
        im += v * -std::sin(phase);
      }
      REQUIRE_THAT(spec.real[k][t].item<double>(),
                   Catch::Matchers::WithinAbs(re, 1e-9));
      REQUIRE_THAT(spec.imag[k][t].item<double>(),
                   Catch::Matchers::WithinAbs(im, 1e-9));
    }
  }
}

TEST_CASE("stft istft round trip", "[signal]") {
  for (auto [fft, win, hop] : {std::tuple{320, 320, 160},
                               std::tuple{128, 128, 32},
                               std::tuple{64, 64, 16},
                               std::tuple{512, 256, 64}}) {
    StftConfig cfg{fft, win, hop};
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
      const int64_t n = 1000 + static_cast<int64_t>(seed) * 317;
      auto x = random_wave(n, seed);
      auto y = istft(stft(x, cfg), cfg, n);
      REQUIRE(y.sizes() == x.sizes());
      REQUIRE((y - x).abs().max().item<double>() < 1e-5);
    }
  }
}

TEST_CASE("stft input validation", "[signal]") {
  StftConfig cfg{320, 320, 160};
  REQUIRE_THROWS_AS(stft(torch::empty({0}), cfg), EmptySignal);
  REQUIRE_THROWS_AS(stft(random_wave(10, 1), cfg), ShapeError);
  StftConfig bad{320, 320, 0};
  REQUIRE_THROWS_AS(validate(bad), ConfigError);
  StftConfig odd{321, 320, 160};
  REQUIRE_THROWS_AS(validate(odd), ConfigError);
  StftConfig wide{320, 400, 160};
  REQUIRE_THROWS_AS(validate(wide), ConfigError);
}

TEST_CASE("stft batched equals per item", "[signal]") {
  StftConfig cfg{64, 64, 32};
  auto a = random_wave(500, 5);
  auto b = random_wave(500, 6);
  auto batched = stft(torch::stack({a, b}), cfg);
  auto single = stft(a, cfg);
  REQUIRE((batched.real[0] - single.real).abs().max().item<double>() < 1e-7);
  REQUIRE((batched.imag[0] - single.imag).abs().max().item<double>() < 1e-7);
}

TEST_CASE("istft rejects bad lengths", "[signal]") {
  StftConfig cfg{64, 64, 32};
  auto spec = stft(random_wave(500, 7), cfg);
  const int64_t frames = spec.real.size(-1);
  REQUIRE_THROWS_AS(istft(spec, cfg, 0), ShapeError);
  REQUIRE_THROWS_AS(istft(spec, cfg, (frames - 1) * cfg.hop_length + 1), ShapeError);
}

TEST_CASE("sine concentrates at its bin", "[signal]") {
  StftConfig cfg{64, 64, 32};
  const int bin = 5;
  auto t = torch::arange(0, 640, torch::kFloat);
  auto x = torch::sin(2.0 * M_PI * bin * t / cfg.fft_size);
  auto mag = stft(x, cfg).magnitude();
  // Interior frames see a pure tone; the peak row must be the tone's bin.
  auto mid = mag.select(1, mag.size(1) / 2);
  REQUIRE(mid.argmax().item<int64_t>() == bin);
}

TEST_CASE("mel filterbank shape and coverage", "[signal]") {
  MelConfig cfg;
  cfg.stft = {512, 512, 256};
  cfg.n_mels = 40;
  auto fb = mel_filterbank(cfg);
  REQUIRE(fb.size(0) == 40);
  REQUIRE(fb.size(1) == cfg.stft.bins());
  REQUIRE(fb.min().item<double>() >= 0.0);
  // Triangles have height at most 1 (the exact peak usually falls between
  // bins) and every filter covers at least one bin.
  auto peaks = std::get<0>(fb.max(1));
  REQUIRE(peaks.max().item<double>() <= 1.0);
  REQUIRE(peaks.min().item<double>() > 0.0);
}

TEST_CASE("log mel matches manual evaluation", "[signal]") {
  MelConfig cfg;
  cfg.stft = {64, 64, 32};
  cfg.n_mels = 8;
  cfg.sample_rate = 16000;
  auto x = random_wave(400, 11);
  auto features = log_mel(x, cfg);
  REQUIRE(features.size(0) == 8);

  auto power = stft(x, cfg.stft).power().to(torch::kDouble);
  auto fb = mel_filterbank(cfg).to(torch::kDouble);
  auto expect = torch::log(torch::matmul(fb, power) + 1e-10);
  REQUIRE((features.to(torch::kDouble) - expect).abs().max().item<double>() < 1e-4);
}

TEST_CASE("si-sdr agrees with brute force", "[signal]") {
  for (uint64_t seed = 0; seed < 200; ++seed) {
    auto ref = random_wave(800, seed * 2 + 1);
    auto est = random_wave(800, seed * 2 + 2) * 0.3 + ref;
    const double got = si_sdr_db(est, ref).item<double>();
    const double want = si_sdr_reference(est, ref);
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-6));
  }
}

TEST_CASE("si-sdr is scale invariant", "[signal]") {
  auto ref = random_wave(800, 31);
  auto est = random_wave(800, 32) * 0.2 + ref;
  const double base = si_sdr_db(est, ref).item<double>();
  for (double c : {0.01, 0.5, 3.0, 250.0}) {
    const double scaled = si_sdr_db(est * c, ref).item<double>();
    REQUIRE_THAT(scaled, Catch::Matchers::WithinAbs(base, 1e-9));
  }
}

TEST_CASE("si-sdr hits -20 dB on a constructed pair", "[signal]") {
  // est = ref + n with n orthogonal to ref and ||n||^2 = 100 ||ref||^2
  // makes the projection exactly ref and the error power 100x, so -20 dB.
  const int64_t n = 1024;
  auto t = torch::arange(0, n, torch::kFloat);
  auto ref = torch::sin(2.0 * M_PI * 4 * t / n);
  auto orth = torch::cos(2.0 * M_PI * 4 * t / n);
  auto est = ref + 10.0 * orth;
  REQUIRE_THAT(si_sdr_db(est, ref).item<double>(),
               Catch::Matchers::WithinAbs(-20.0, 1e-5));
}

TEST_CASE("si-sdr saturates at the clamp ceiling", "[signal]") {
  auto ref = random_wave(512, 41);
  REQUIRE_THAT(si_sdr_db(ref, ref).item<double>(),
               Catch::Matchers::WithinAbs(60.0, 1e-9));
}

TEST_CASE("si-sdr rejects zero energy", "[signal]") {
  auto ref = random_wave(128, 51);
  REQUIRE_THROWS_AS(si_sdr_db(torch::zeros({128}), ref), DegenerateSignal);
  REQUIRE_THROWS_AS(si_sdr_db(ref, torch::zeros({128})), DegenerateSignal);
}

TEST_CASE("si-sdr loss gradient matches finite differences", "[signal]") {
  auto ref = random_wave(64, 61).to(torch::kDouble);
  auto est = (random_wave(64, 62) * 0.3).to(torch::kDouble) + ref;
  est.set_requires_grad(true);
  auto loss = si_sdr_loss(est.unsqueeze(0), ref.unsqueeze(0));
  loss.backward();
  auto grad = est.grad().clone();

  const double h = 1e-6;
  for (int64_t i : {0, 7, 33, 63}) {
    auto plus = est.detach().clone();
    plus[i] += h;
    auto minus = est.detach().clone();
    minus[i] -= h;
    const double fd = (si_sdr_loss(plus.unsqueeze(0), ref.unsqueeze(0)).item<double>() -
                       si_sdr_loss(minus.unsqueeze(0), ref.unsqueeze(0)).item<double>()) /
                      (2 * h);
    const double an = grad[i].item<double>();
    REQUIRE_THAT(an, Catch::Matchers::WithinRel(fd, 1e-4));
  }
}

TEST_CASE("mixing hits the requested snr", "[signal]") {
  auto target = random_wave(8000, 71);
  auto interferer = random_wave(8000, 72);
  for (double snr : {0.0, 2.5, 5.0, -3.0}) {
    auto mixed = mix_at_snr(target, interferer, snr);
    const double pt = (mixed.target * mixed.target).mean().item<double>();
    const double pi = (mixed.interferer * mixed.interferer).mean().item<double>();
    const double measured = 10.0 * std::log10(pt / pi);
    REQUIRE_THAT(measured, Catch::Matchers::WithinAbs(snr, 1e-4));
  }
}

TEST_CASE("mixture equals target plus scaled interferer", "[signal]") {
  auto target = random_wave(4000, 81);
  auto interferer = random_wave(4000, 82);
  auto mixed = mix_at_snr(target, interferer, 3.0);
  auto residue = mixed.mixture - mixed.target - mixed.interferer;
  REQUIRE(residue.abs().max().item<double>() < 1e-6);
  REQUIRE(mixed.mixture.abs().max().item<double>() <= 1.0 + 1e-6);
}

TEST_CASE("mixing rejects silent inputs", "[signal]") {
  auto live = random_wave(1000, 91);
  REQUIRE_THROWS_AS(mix_at_snr(torch::zeros({1000}), live, 0.0), DegenerateSignal);
  REQUIRE_THROWS_AS(mix_at_snr(live, torch::zeros({1000}), 0.0), DegenerateSignal);
}

TEST_CASE("mixing tiles a short interferer", "[signal]") {
  auto target = random_wave(1000, 95);
  auto interferer = random_wave(300, 96);
  auto mixed = mix_at_snr(target, interferer, 0.0);
  REQUIRE(mixed.mixture.size(0) == 1000);
  REQUIRE(mixed.interferer.size(0) == 1000);
}

TEST_CASE("wav round trip", "[signal]") {
  auto dir = std::filesystem::temp_directory_path() / "dgtse_wav_test";
  std::filesystem::create_directories(dir);
  auto path = (dir / "clip.wav").string();
  auto x = random_wave(1234, 101, 0.9);
  write_wav(path, Waveform(x, 16000));

  auto info = read_wav_info(path);
  REQUIRE(info.first == 16000);
  REQUIRE(info.second == 1234);

  auto back = read_wav(path);
  REQUIRE(back.sample_rate == 16000);
  REQUIRE(back.samples.size(0) == 1234);
  // 16-bit quantization bounds the error by one step.
  REQUIRE((back.samples - x).abs().max().item<double>() < 1.0 / 32768.0 + 1e-7);
  std::filesystem::remove_all(dir);
}

TEST_CASE("hash and seed utilities are stable", "[signal]") {
  REQUIRE(fnv1a64(nullptr, 0) == 0xcbf29ce484222325ull);
  REQUIRE(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
  REQUIRE(derive_seed(1, 2) == derive_seed(1, 2));
  REQUIRE(derive_seed(1, 2) != derive_seed(1, 3));
  REQUIRE(derive_seed(1, 2) != derive_seed(2, 2));
}
