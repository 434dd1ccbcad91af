// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_TRAIN_HPP_
#define DGTSE_TRAIN_HPP_

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dgtse/checkpoint.hpp"
#include "dgtse/codec.hpp"
#include "dgtse/data.hpp"
#include "dgtse/schedule.hpp"
#include "dgtse/sisdr.hpp"
#include "dgtse/two_stage.hpp"

namespace dgtse {

// Training harness. Data order is stateless: the batch at step k is drawn
// from derive_seed(seed, k), so resuming from a checkpoint needs only the
// step counter, the optimizer state, and the schedule state.

struct StepLog {
  int64_t step = 0;
  double loss = 0;
  double lr = 0;
};

struct FitSummary {
  std::vector<StepLog> logs;
  std::vector<double> epoch_val_losses;
  double first_smoothed = 0;  // mean loss over the first logged window
  double last_smoothed = 0;   // mean loss over the last logged window
  int64_t steps_run = 0;
  double best_val = std::numeric_limits<double>::infinity();
};

using ProgressFn = std::function<void(const StepLog&)>;

// Owns the optimizer and schedule for one set of parameters and applies
// single gradient steps. Kept separate from the per-model loops so resume
// behavior can be exercised step by step.
class Fitter {
 public:
  Fitter(std::vector<torch::Tensor> params, TrainConfig cfg)
      : cfg_(cfg),
        opt_(std::move(params), torch::optim::AdamOptions(cfg.lr_init)),
        sched_(cfg) {
    validate(cfg);
  }

  double step(const torch::Tensor& loss) {
    const double value = loss.item<double>();
    if (!std::isfinite(value))
      throw DataError("fit: non-finite loss at step " + std::to_string(step_));
    const double lr = sched_.lr_at(step_);
    for (auto& group : opt_.param_groups())
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    opt_.zero_grad();
    loss.backward();
    if (cfg_.grad_clip > 0)
      torch::nn::utils::clip_grad_norm_(parameters(), cfg_.grad_clip);
    opt_.step();
    ++step_;
    return lr;
  }

  std::vector<torch::Tensor> parameters() {
    std::vector<torch::Tensor> out;
    for (auto& g : opt_.param_groups())
      for (auto& p : g.params()) out.push_back(p);
    return out;
  }

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  PlateauSchedule& schedule() { return sched_; }
  torch::optim::Adam& optimizer() { return opt_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  torch::optim::Adam opt_;
  PlateauSchedule sched_;
  int64_t step_ = 0;
};

// In-memory copy of a corpus, so training loops do not reread WAV files on
// every step. Lookup by path mirrors SourceRef resolution.
class CachedCorpus {
 public:
  CachedCorpus(const CorpusIndex& idx, int expect_rate) : idx_(&idx) {
    for (size_t i = 0; i < idx.utterances.size(); ++i) {
      auto w = read_wav(idx.utterances[i].path);
      if (w.sample_rate != expect_rate)
        throw DataError("corpus: sample rate mismatch in " + idx.utterances[i].path);
      audio_.push_back(w.samples);
      by_path_[idx.utterances[i].path] = i;
    }
  }

  const CorpusIndex& index() const { return *idx_; }

  torch::Tensor segment(const SourceRef& ref) const {
    auto it = by_path_.find(ref.path);
    if (it == by_path_.end()) throw DataError("corpus: unknown path " + ref.path);
    const auto& full = audio_[it->second];
    if (ref.offset < 0 || ref.offset + ref.length > full.size(0))
      throw DataError("corpus: crop outside bounds for " + ref.path);
    return full.narrow(0, ref.offset, ref.length);
  }

  MixtureTriplet realize(const MixPlan& plan) const {
    auto mixed = mix_at_snr(segment(plan.target_src),
                            segment(plan.interferer_src), plan.snr_db);
    MixtureTriplet t;
    t.mixture = mixed.mixture;
    t.target = mixed.target;
    t.interferer = mixed.interferer;
    t.enrollment = segment(plan.enroll_src);
    t.snr_db = plan.snr_db;
    t.target_speaker = plan.target_speaker;
    t.interferer_speaker = plan.interferer_speaker;
    return t;
  }

  MixtureTriplet sample(const SampleConfig& cfg, uint64_t seed) const {
    for (int attempt = 0; attempt < 8; ++attempt) {
      auto plan = sample_plan(*idx_, cfg,
                              attempt == 0 ? seed : derive_seed(seed, attempt));
      try {
        return realize(plan);
      } catch (const DegenerateSignal&) {
        continue;
      }
    }
    throw DataError("corpus: repeated degenerate crops");
  }

  // Batch of clean fixed-length crops for codec training.
  torch::Tensor clean_batch(int batch, int64_t crop_len, uint64_t seed) const {
    auto rng = make_rng(seed);
    std::uniform_int_distribution<size_t> pick_utt(0, audio_.size() - 1);
    std::vector<torch::Tensor> rows;
    for (int b = 0; b < batch; ++b) {
      const auto& full = audio_[pick_utt(rng)];
      const int64_t take = std::min<int64_t>(full.size(0), crop_len);
      const int64_t slack = full.size(0) - take;
      const int64_t off =
          slack > 0 ? std::uniform_int_distribution<int64_t>(0, slack)(rng) : 0;
      rows.push_back(fit_length(full.narrow(0, off, take), crop_len));
    }
    return torch::stack(rows);
  }

 private:
  const CorpusIndex* idx_;
  std::vector<torch::Tensor> audio_;
  std::map<std::string, size_t> by_path_;
};

namespace train_detail {

inline void log_step(FitSummary& summary, ProgressFn& progress, int64_t step,
                     double loss, double lr) {
  summary.logs.push_back({step, loss, lr});
  if (progress) progress(summary.logs.back());
}

inline void finish_summary(FitSummary& summary, int window = 20) {
  const auto n = static_cast<int64_t>(summary.logs.size());
  if (n == 0) return;
  const int64_t w = std::min<int64_t>(window, n);
  double a = 0, b = 0;
  for (int64_t i = 0; i < w; ++i) {
    a += summary.logs[i].loss;
    b += summary.logs[n - 1 - i].loss;
  }
  summary.first_smoothed = a / w;
  summary.last_smoothed = b / w;
  summary.steps_run = summary.logs.back().step + 1;
}

constexpr uint64_t kValStream = 0x76616c6964ull;  // distinct seed stream

}  // namespace train_detail

struct CodecTrainOptions {
  int64_t steps = 2000;
  double crop_seconds = 1.0;
  int val_batches = 4;
};

inline FitSummary train_codec(NeuralCodec codec, const CachedCorpus& corpus,
                              TrainConfig tcfg, CodecTrainOptions opts,
                              ProgressFn progress = {}) {
  validate(tcfg);
  if (corpus.index().utterances.empty()) throw DataError("train_codec: empty corpus");
  const int64_t crop =
      static_cast<int64_t>(opts.crop_seconds * codec->config().sample_rate);

  if (!codec->quantizer()->fitted()) {
    auto first = corpus.clean_batch(std::max(tcfg.batch_size, 4), crop,
                                    derive_seed(tcfg.seed, 0));
    torch::NoGradGuard ng;
    codec->quantizer()->kmeans_init(codec->encode_latent(first), tcfg.seed);
  }

  Fitter fitter(codec->parameters(), tcfg);
  FitSummary summary;
  auto validate_loss = [&](int epoch) {
    torch::NoGradGuard ng;
    double total = 0;
    for (int i = 0; i < opts.val_batches; ++i) {
      auto batch = corpus.clean_batch(
          tcfg.batch_size, crop,
          derive_seed(tcfg.seed, train_detail::kValStream + epoch * 1000 + i));
      total += codec_loss(codec->forward(batch), batch, codec->config())
                   .total.item<double>();
    }
    return total / opts.val_batches;
  };

  for (int64_t step = 0; step < opts.steps; ++step) {
    auto batch = corpus.clean_batch(tcfg.batch_size, crop,
                                    derive_seed(tcfg.seed, step + 1));
    auto loss = codec_loss(codec->forward(batch), batch, codec->config());
    const double lr = fitter.step(loss.total);
    train_detail::log_step(summary, progress, step, loss.total.item<double>(), lr);
    if ((step + 1) % tcfg.steps_per_epoch == 0) {
      const int epoch = static_cast<int>((step + 1) / tcfg.steps_per_epoch);
      const double val = validate_loss(epoch);
      summary.epoch_val_losses.push_back(val);
      summary.best_val = std::min(summary.best_val, val);
      fitter.schedule().observe_epoch(val);
    }
  }
  train_detail::finish_summary(summary);
  return summary;
}

struct FrontendTrainOptions {
  int64_t steps = 2000;
  // Early stop once the estimate reaches this SI-SDR (dB) against the clean
  // target, checked on the training batch; 0 disables.
  double stop_at_si_sdr_db = 0.0;
  int check_every = 25;
};

// Shared shape of the frontend loops: `next_batch` supplies the triplet for
// a step seed (either fresh samples or one memorized triplet).
inline FitSummary train_frontend(Frontend frontend,
                                 const std::function<MixtureTriplet(uint64_t)>& next_batch,
                                 TrainConfig tcfg, FrontendTrainOptions opts,
                                 ProgressFn progress = {}) {
  validate(tcfg);
  Fitter fitter(frontend->parameters(), tcfg);
  FitSummary summary;
  for (int64_t step = 0; step < opts.steps; ++step) {
    auto t = next_batch(derive_seed(tcfg.seed, step + 1));
    auto est = frontend->forward(t.mixture.unsqueeze(0), t.enrollment.unsqueeze(0));
    auto loss = si_sdr_loss(est, t.target.unsqueeze(0));
    const double lr = fitter.step(loss);
    const double loss_v = loss.item<double>();
    train_detail::log_step(summary, progress, step, loss_v, lr);
    if ((step + 1) % tcfg.steps_per_epoch == 0) {
      summary.epoch_val_losses.push_back(loss_v);
      summary.best_val = std::min(summary.best_val, loss_v);
      fitter.schedule().observe_epoch(loss_v);
    }
    if (opts.stop_at_si_sdr_db > 0 && (step + 1) % opts.check_every == 0 &&
        -loss_v >= opts.stop_at_si_sdr_db)
      break;
  }
  train_detail::finish_summary(summary);
  return summary;
}

struct BackendTrainOptions {
  int64_t steps = 3000;
  double stop_at_ce = 0.0;  // early stop when CE drops below; 0 disables
  int check_every = 25;
};

// Backend-only training against ground-truth mixtures (no front-end): the
// mixture stream is the true mixture, targets are codec tokens and latents
// of the clean speech.
inline FitSummary train_backend(Backend backend, NeuralCodec codec,
                                const std::function<MixtureTriplet(uint64_t)>& next_batch,
                                TrainConfig tcfg, BackendTrainOptions opts,
                                bool use_enrollment = true,
                                ProgressFn progress = {}) {
  validate(tcfg);
  Fitter fitter(backend->parameters(), tcfg);
  FitSummary summary;
  const auto& bc = backend->config();
  for (int64_t step = 0; step < opts.steps; ++step) {
    auto t = next_batch(derive_seed(tcfg.seed, step + 1));
    auto mix = t.mixture.unsqueeze(0);
    auto enr = t.enrollment.unsqueeze(0);
    auto e_m = backend->encode_stream(mix, codec);
    auto e_r = use_enrollment
                   ? backend->encode_stream(enr, codec)
                   : torch::zeros({1, 0, bc.d_model});
    auto clean = codec->encode(t.target.unsqueeze(0));
    auto gold = clean.tokens.narrow(1, 0, bc.n_coarse);
    auto seq_tokens = gold;
    if (bc.output_layout == BackendConfig::OutputLayout::kRefOutput)
      seq_tokens = torch::cat(
          {codec->encode(enr).tokens.narrow(1, 0, bc.n_coarse), gold}, 2);
    auto seq = backend->decoder()->build_sequence(e_r, e_m, seq_tokens,
                                                  codec->quantizer());
    auto ar = backend->decoder()->forward_loss(seq);
    auto refined = backend->refiner()->forward(
        e_r, e_m, codec->quantizer()->lookup(gold).detach());
    auto loss = ar.loss + refine_l1l2_loss(refined, clean.latent);
    const double lr = fitter.step(loss);
    const double ce = ar.loss.item<double>();
    train_detail::log_step(summary, progress, step, loss.item<double>(), lr);
    if ((step + 1) % tcfg.steps_per_epoch == 0) {
      const double v = loss.item<double>();
      summary.epoch_val_losses.push_back(v);
      summary.best_val = std::min(summary.best_val, v);
      fitter.schedule().observe_epoch(v);
    }
    if (opts.stop_at_ce > 0 && (step + 1) % opts.check_every == 0 &&
        ce < opts.stop_at_ce)
      break;
  }
  train_detail::finish_summary(summary);
  return summary;
}

struct JointTrainOptions {
  int64_t steps = 500;
};

inline FitSummary train_joint(TwoStage& system,
                              const std::function<MixtureTriplet(uint64_t)>& next_batch,
                              const StrategyConfig& strat, TrainConfig tcfg,
                              JointTrainOptions opts, ProgressFn progress = {}) {
  validate(tcfg);
  system.set_frozen(strat.freeze_frontend);
  Fitter fitter(system.trainable_parameters(strat), tcfg);
  FitSummary summary;
  for (int64_t step = 0; step < opts.steps; ++step) {
    auto t = next_batch(derive_seed(tcfg.seed, step + 1));
    auto out = system.train_step(t.mixture.unsqueeze(0), t.enrollment.unsqueeze(0),
                                 t.target.unsqueeze(0), strat);
    const double lr = fitter.step(out.losses.total);
    train_detail::log_step(summary, progress, step,
                           out.losses.total.item<double>(), lr);
    if ((step + 1) % tcfg.steps_per_epoch == 0) {
      const double v = out.losses.total.item<double>();
      summary.epoch_val_losses.push_back(v);
      summary.best_val = std::min(summary.best_val, v);
      fitter.schedule().observe_epoch(v);
    }
  }
  train_detail::finish_summary(summary);
  return summary;
}

}  // namespace dgtse

#endif  // DGTSE_TRAIN_HPP_
