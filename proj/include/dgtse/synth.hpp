// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_SYNTH_HPP_
#define DGTSE_SYNTH_HPP_

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "dgtse/common.hpp"
#include "dgtse/wav.hpp"

namespace dgtse {

// Deterministic speech-like signal generator for toy corpora. Utterances
// are sequences of syllables: voiced segments are glottal-style pulse
// trains shaped by per-speaker formant resonators, unvoiced segments are
// band-filtered noise bursts. Nothing here aims for naturalness; the point
// is speaker-distinctive, spectrally structured audio whose statistics the
// toy models can learn in minutes.

struct SpeakerProfile {
  double f0;                       // base pitch, Hz
  std::array<double, 3> formants;  // resonance centers, Hz
};

inline SpeakerProfile speaker_profile(int speaker_id) {
  static constexpr double kF0[] = {110.0, 170.0, 250.0, 135.0, 205.0, 95.0};
  static constexpr std::array<double, 3> kFormants[] = {
      {600.0, 1100.0, 2500.0}, {750.0, 1400.0, 2900.0}, {500.0, 1700.0, 2300.0},
      {680.0, 1250.0, 2700.0}, {560.0, 1550.0, 3100.0}, {800.0, 1000.0, 2450.0},
  };
  SpeakerProfile p;
  p.f0 = kF0[speaker_id % 6] * (1.0 + 0.03 * (speaker_id / 6));
  p.formants = kFormants[speaker_id % 6];
  return p;
}

namespace synth_detail {

// Two-pole resonator, applied in place over a segment.
class Resonator {
 public:
  Resonator(double center_hz, double bandwidth_hz, int sample_rate) {
    const double r = std::exp(-M_PI * bandwidth_hz / sample_rate);
    a1_ = 2.0 * r * std::cos(2.0 * M_PI * center_hz / sample_rate);
    a2_ = -r * r;
    b0_ = 1.0 - r;
  }
  double step(double x) {
    const double y = b0_ * x + a1_ * y1_ + a2_ * y2_;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  double b0_, a1_, a2_;
  double y1_ = 0, y2_ = 0;
};

}  // namespace synth_detail

inline torch::Tensor synth_utterance(int speaker_id, double seconds,
                                     uint64_t seed, int sample_rate = 16000) {
  if (seconds <= 0) throw ConfigError("synth: duration must be positive");
  const auto prof = speaker_profile(speaker_id);
  const int64_t total = static_cast<int64_t>(seconds * sample_rate);
  std::vector<double> out(total, 0.0);
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  int64_t t = 0;
  while (t < total) {
    const bool voiced = unit(rng) < 0.8;
    const int64_t dur = static_cast<int64_t>(
        (voiced ? 0.12 + 0.16 * unit(rng) : 0.06 + 0.06 * unit(rng)) * sample_rate);
    const int64_t end = std::min(total, t + dur);
    const int64_t len = end - t;
    if (len < sample_rate / 100) break;

    if (voiced) {
      const double f_start = prof.f0 * (0.85 + 0.35 * unit(rng));
      const double f_end = prof.f0 * (0.85 + 0.35 * unit(rng));
      std::array<synth_detail::Resonator, 3> res{
          synth_detail::Resonator(prof.formants[0] * (0.88 + 0.24 * unit(rng)), 90, sample_rate),
          synth_detail::Resonator(prof.formants[1] * (0.88 + 0.24 * unit(rng)), 140, sample_rate),
          synth_detail::Resonator(prof.formants[2] * (0.88 + 0.24 * unit(rng)), 220, sample_rate)};
      double phase = 1.0;
      for (int64_t i = 0; i < len; ++i) {
        const double f0 = f_start + (f_end - f_start) * i / std::max<int64_t>(len - 1, 1);
        phase += f0 / sample_rate;
        double x = 0.0;
        if (phase >= 1.0) {
          phase -= 1.0;
          x = 1.0;
        }
        x += 0.05 * (2.0 * unit(rng) - 1.0);
        double y = 0.0;
        for (auto& r : res) y += r.step(x);
        const double env = 0.5 * (1.0 - std::cos(2.0 * M_PI *
                                                  std::min<double>(i, len - 1 - i) /
                                                  std::max<int64_t>(len / 4, 1)));
        out[t + i] = y * std::min(env, 1.0);
      }
    } else {
      synth_detail::Resonator band(1200.0 + 2800.0 * unit(rng), 600, sample_rate);
      for (int64_t i = 0; i < len; ++i) {
        const double x = 2.0 * unit(rng) - 1.0;
        const double env = std::min<double>({i / (0.01 * sample_rate),
                                             (len - 1.0 - i) / (0.01 * sample_rate), 1.0});
        out[t + i] = 0.6 * band.step(x) * std::max(env, 0.0);
      }
    }
    t = end + static_cast<int64_t>((0.02 + 0.06 * unit(rng)) * sample_rate);
  }

  // Normalize to a fixed RMS, then pull back under full scale if needed.
  double power = 0.0;
  for (double v : out) power += v * v;
  const double rms = std::sqrt(power / total);
  double gain = rms > 0 ? 0.06 / rms : 1.0;
  double peak = 0.0;
  for (double v : out) peak = std::max(peak, std::abs(v * gain));
  if (peak > 0.95) gain *= 0.95 / peak;

  auto wav = torch::empty({total}, torch::kFloat);
  float* d = wav.data_ptr<float>();
  for (int64_t i = 0; i < total; ++i) d[i] = static_cast<float>(out[i] * gain);
  return wav;
}

// Writes a speaker/utterance tree of WAV files:
// root/spk<i>/utt<j>.wav. Returns the number of files written.
inline int make_corpus(const std::string& root, int n_speakers,
                       int utterances_per_speaker, double seconds,
                       uint64_t seed, int sample_rate = 16000) {
  if (n_speakers < 1 || utterances_per_speaker < 1)
    throw ConfigError("synth: corpus needs at least one speaker and utterance");
  int written = 0;
  for (int s = 0; s < n_speakers; ++s) {
    auto dir = std::filesystem::path(root) / ("spk" + std::to_string(s));
    std::filesystem::create_directories(dir);
    for (int u = 0; u < utterances_per_speaker; ++u) {
      const uint64_t utt_seed =
          derive_seed(seed, static_cast<uint64_t>(s) * 100003 + u);
      auto wave = synth_utterance(s, seconds, utt_seed, sample_rate);
      write_wav((dir / ("utt" + std::to_string(u) + ".wav")).string(),
                Waveform(wave, sample_rate));
      ++written;
    }
  }
  return written;
}

}  // namespace dgtse

#endif  // DGTSE_SYNTH_HPP_
