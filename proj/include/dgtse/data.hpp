// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_DATA_HPP_
#define DGTSE_DATA_HPP_

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgtse/common.hpp"
#include "dgtse/mixing.hpp"
#include "dgtse/wav.hpp"

namespace dgtse {

// Corpus indexing and online mixture synthesis. Sampling splits into a
// metadata-only planning step (fast, used for manifest generation and for
// property tests over many seeds) and an audio-loading step that realizes a
// plan into waveforms.

struct UtteranceInfo {
  std::string speaker;
  std::string path;
  int64_t n_samples = 0;
  int sample_rate = 0;
};

struct CorpusIndex {
  std::vector<UtteranceInfo> utterances;            // lexicographic order
  std::map<std::string, std::vector<size_t>> by_speaker;
  std::vector<std::string> skipped;                 // unreadable files
};

inline CorpusIndex index_corpus(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("index_corpus: not a directory: " + root);
  CorpusIndex idx;
  std::vector<fs::path> speakers;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) speakers.push_back(e.path());
  std::sort(speakers.begin(), speakers.end());
  for (const auto& spk : speakers) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(spk))
      if (e.is_regular_file() && e.path().extension() == ".wav")
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      try {
        auto [rate, n] = read_wav_info(f.string());
        if (n <= 0) throw DataError("empty");
        idx.by_speaker[spk.filename().string()].push_back(idx.utterances.size());
        idx.utterances.push_back(
            {spk.filename().string(), f.string(), n, rate});
      } catch (const std::exception&) {
        idx.skipped.push_back(f.string());
      }
    }
  }
  if (idx.by_speaker.size() < 2)
    throw DataError("index_corpus: need at least 2 speakers under " + root);
  return idx;
}

struct SourceRef {
  std::string path;
  int64_t offset = 0;
  int64_t length = 0;
};

struct MixPlan {
  SourceRef target_src;  // serialized as mixture_src: the mixture is built from it
  SourceRef interferer_src;
  SourceRef enroll_src;
  std::string target_speaker, interferer_speaker;
  double snr_db = 0;
  uint64_t seed = 0;
};

struct SampleConfig {
  double segment_seconds = 3.0;
  double enroll_max_seconds = 5.0;
  double snr_low_db = 0.0;
  double snr_high_db = 5.0;
  int sample_rate = 16000;
};

struct MixtureTriplet {
  torch::Tensor mixture;
  torch::Tensor enrollment;
  torch::Tensor target;
  torch::Tensor interferer;  // gain-adjusted, as summed into the mixture
  double snr_db = 0;
  std::string target_speaker, interferer_speaker;
};

namespace data_detail {

inline size_t pick(std::mt19937_64& rng, size_t n) {
  return std::uniform_int_distribution<size_t>(0, n - 1)(rng);
}

inline SourceRef crop(const UtteranceInfo& u, int64_t max_len, std::mt19937_64& rng) {
  SourceRef ref;
  ref.path = u.path;
  ref.length = std::min(u.n_samples, max_len);
  const int64_t slack = u.n_samples - ref.length;
  ref.offset = slack > 0
                   ? std::uniform_int_distribution<int64_t>(0, slack)(rng)
                   : 0;
  return ref;
}

}  // namespace data_detail

// Draws speakers, utterances, crop offsets, and the SNR without touching
// audio data. Deterministic in (index contents, seed).
inline MixPlan sample_plan(const CorpusIndex& idx, const SampleConfig& cfg,
                           uint64_t seed) {
  if (idx.by_speaker.size() < 2) throw DataError("sample_plan: need 2 speakers");
  auto rng = make_rng(seed);
  std::vector<std::string> speakers;
  for (const auto& [name, utts] : idx.by_speaker) speakers.push_back(name);

  std::string target_spk;
  const std::vector<size_t>* target_utts = nullptr;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto& cand = speakers[data_detail::pick(rng, speakers.size())];
    if (idx.by_speaker.at(cand).size() >= 2) {
      target_spk = cand;
      target_utts = &idx.by_speaker.at(cand);
      break;
    }
  }
  if (!target_utts)
    throw DataError("sample_plan: no speaker with 2+ utterances for enrollment");

  std::string interf_spk = target_spk;
  while (interf_spk == target_spk)
    interf_spk = speakers[data_detail::pick(rng, speakers.size())];
  const auto& interf_utts = idx.by_speaker.at(interf_spk);

  const size_t t_utt = (*target_utts)[data_detail::pick(rng, target_utts->size())];
  size_t e_utt = t_utt;
  while (e_utt == t_utt)
    e_utt = (*target_utts)[data_detail::pick(rng, target_utts->size())];
  const size_t i_utt = interf_utts[data_detail::pick(rng, interf_utts.size())];

  const auto seg = static_cast<int64_t>(cfg.segment_seconds * cfg.sample_rate);
  const auto enroll_cap =
      static_cast<int64_t>(cfg.enroll_max_seconds * cfg.sample_rate);
  MixPlan plan;
  plan.target_speaker = target_spk;
  plan.interferer_speaker = interf_spk;
  plan.target_src = data_detail::crop(idx.utterances[t_utt], seg, rng);
  plan.interferer_src = data_detail::crop(idx.utterances[i_utt], seg, rng);
  plan.enroll_src = data_detail::crop(idx.utterances[e_utt], enroll_cap, rng);
  plan.snr_db = std::uniform_real_distribution<double>(cfg.snr_low_db,
                                                       cfg.snr_high_db)(rng);
  plan.seed = seed;
  return plan;
}

inline torch::Tensor load_segment(const SourceRef& ref, int expect_rate) {
  auto w = read_wav(ref.path);
  if (w.sample_rate != expect_rate)
    throw DataError("load_segment: sample rate mismatch in " + ref.path);
  if (ref.offset < 0 || ref.offset + ref.length > w.size())
    throw DataError("load_segment: crop outside file bounds in " + ref.path);
  return w.samples.narrow(0, ref.offset, ref.length);
}

inline MixtureTriplet realize_plan(const MixPlan& plan, const SampleConfig& cfg) {
  auto target = load_segment(plan.target_src, cfg.sample_rate);
  auto interferer = load_segment(plan.interferer_src, cfg.sample_rate);
  auto enroll = load_segment(plan.enroll_src, cfg.sample_rate);
  auto mixed = mix_at_snr(target, interferer, plan.snr_db);
  MixtureTriplet t;
  t.mixture = mixed.mixture;
  t.target = mixed.target;
  t.interferer = mixed.interferer;
  t.enrollment = enroll;
  t.snr_db = plan.snr_db;
  t.target_speaker = plan.target_speaker;
  t.interferer_speaker = plan.interferer_speaker;
  return t;
}

// Plan + realize, with bounded deterministic retries when a crop lands on
// silence and the mix degenerates.
inline MixtureTriplet sample_triplet(const CorpusIndex& idx, const SampleConfig& cfg,
                                     uint64_t seed) {
  for (int attempt = 0; attempt < 8; ++attempt) {
    auto plan = sample_plan(idx, cfg, attempt == 0 ? seed : derive_seed(seed, attempt));
    try {
      return realize_plan(plan, cfg);
    } catch (const DegenerateSignal&) {
      continue;
    }
  }
  throw DataError("sample_triplet: repeated degenerate crops; corpus too silent");
}

// Manifest serialization: one JSON object per line.
inline nlohmann::json to_json(const SourceRef& r) {
  return nlohmann::json{r.path, r.offset, r.length};
}

inline SourceRef source_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3)
    throw DataError("manifest: source ref must be [path, offset, len]");
  return {j[0].get<std::string>(), j[1].get<int64_t>(), j[2].get<int64_t>()};
}

inline void write_manifest(const std::vector<MixPlan>& plans,
                           const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("write_manifest: cannot open " + path);
  for (const auto& p : plans) {
    nlohmann::json j{{"mixture_src", to_json(p.target_src)},
                     {"interferer_src", to_json(p.interferer_src)},
                     {"enroll_src", to_json(p.enroll_src)},
                     {"snr_db", p.snr_db},
                     {"seed", p.seed},
                     {"target_speaker", p.target_speaker},
                     {"interferer_speaker", p.interferer_speaker}};
    f << j.dump() << "\n";
  }
}

inline std::vector<MixPlan> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("read_manifest: cannot open " + path);
  std::vector<MixPlan> plans;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("read_manifest: bad JSON line in " + path);
    MixPlan p;
    p.target_src = source_from_json(j.at("mixture_src"));
    p.interferer_src = source_from_json(j.at("interferer_src"));
    p.enroll_src = source_from_json(j.at("enroll_src"));
    p.snr_db = j.at("snr_db").get<double>();
    p.seed = j.at("seed").get<uint64_t>();
    p.target_speaker = j.value("target_speaker", "");
    p.interferer_speaker = j.value("interferer_speaker", "");
    plans.push_back(std::move(p));
  }
  return plans;
}

inline std::vector<MixPlan> build_eval_manifest(const CorpusIndex& idx,
                                                const SampleConfig& cfg,
                                                int n_items, uint64_t seed) {
  if (n_items <= 0) throw ConfigError("manifest: n_items must be positive");
  std::vector<MixPlan> plans;
  plans.reserve(n_items);
  for (int i = 0; i < n_items; ++i)
    plans.push_back(sample_plan(idx, cfg, derive_seed(seed, i)));
  return plans;
}

}  // namespace dgtse

#endif  // DGTSE_DATA_HPP_
