// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Command-line surface for the two-stage extraction system. Subcommands
// cover corpus synthesis, mixture manifest creation, per-stage training,
// joint training, single-file extraction, manifest evaluation, and ablation
// runs. Every run writes a reproducibility record (resolved config, config
// hash, seeds, checkpoint digests) next to its primary output.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dgtse/checkpoint.hpp"
#include "dgtse/codec.hpp"
#include "dgtse/common.hpp"
#include "dgtse/config.hpp"
#include "dgtse/data.hpp"
#include "dgtse/eval.hpp"
#include "dgtse/frontend.hpp"
#include "dgtse/synth.hpp"
#include "dgtse/train.hpp"
#include "dgtse/two_stage.hpp"
#include "dgtse/wav.hpp"

namespace {

using namespace dgtse;
namespace fs = std::filesystem;

// Options shared by every subcommand: a key-value config file plus
// repeatable key=value overrides.
struct ConfigOpts {
  std::string config_file;
  std::vector<std::string> overrides;

  KvConfig resolve() const {
    KvConfig kv;
    if (!config_file.empty()) kv = KvConfig::from_file(config_file);
    kv.apply_overrides(overrides);
    return kv;
  }
};

void add_config_opts(CLI::App* sub, ConfigOpts* opts) {
  sub->add_option("--config", opts->config_file, "key = value config file");
  sub->add_option("--set", opts->overrides, "config override (key=value), repeatable");
}

CodecConfig codec_config(const KvConfig& kv) {
  CodecConfig c;
  c.sample_rate = static_cast<int>(kv.get_int("sample_rate", 16000));
  c.latent_dim = static_cast<int>(kv.get_int("codec.latent_dim", 128));
  c.base_channels = static_cast<int>(kv.get_int("codec.base_channels", 32));
  c.n_stages = static_cast<int>(kv.get_int("codec.n_stages", 4));
  c.commitment_weight = kv.get_double("codec.commitment_weight", 0.25);
  c.rvq.n_layers = static_cast<int>(kv.get_int("codec.n_layers", 4));
  c.rvq.codebook_size = static_cast<int>(kv.get_int("codec.codebook_size", 256));
  c.rvq.dim = c.latent_dim;
  return c;
}

FrontendConfig frontend_config(const KvConfig& kv) {
  FrontendConfig c;
  c.stft.fft_size = static_cast<int>(kv.get_int("frontend.fft_size", 320));
  c.stft.win_length = static_cast<int>(kv.get_int("frontend.win_length", 320));
  c.stft.hop_length = static_cast<int>(kv.get_int("frontend.hop_length", 160));
  c.width = static_cast<int>(kv.get_int("frontend.width", 128));
  c.n_blocks = static_cast<int>(kv.get_int("frontend.n_blocks", 2));
  c.att_heads = static_cast<int>(kv.get_int("frontend.att_heads", 4));
  c.att_ffn = static_cast<int>(kv.get_int("frontend.att_ffn", 512));
  c.blstm_hidden = static_cast<int>(kv.get_int("frontend.blstm_hidden", 256));
  return c;
}

BackendConfig backend_config(const KvConfig& kv) {
  BackendConfig c;
  c.mel.stft.fft_size = static_cast<int>(kv.get_int("backend.mel_fft", 512));
  c.mel.stft.win_length = static_cast<int>(kv.get_int("backend.mel_win", c.mel.stft.fft_size));
  c.mel.stft.hop_length = static_cast<int>(kv.get_int("backend.mel_hop", 256));
  c.mel.n_mels = static_cast<int>(kv.get_int("backend.n_mels", 80));
  c.mel.sample_rate = static_cast<int>(kv.get_int("sample_rate", 16000));
  c.d_model = static_cast<int>(kv.get_int("backend.d_model", 512));
  c.conformer_layers = static_cast<int>(kv.get_int("backend.conformer_layers", 6));
  c.conformer_heads = static_cast<int>(kv.get_int("backend.conformer_heads", 8));
  c.decoder_blocks = static_cast<int>(kv.get_int("backend.decoder_blocks", 10));
  c.decoder_heads = static_cast<int>(kv.get_int("backend.decoder_heads", 8));
  c.refiner_layers = static_cast<int>(kv.get_int("backend.refiner_layers", 6));
  c.refiner_heads = static_cast<int>(kv.get_int("backend.refiner_heads", 8));
  c.ffn_dim = static_cast<int>(kv.get_int("backend.ffn_dim", 2048));
  c.conv_kernel = static_cast<int>(kv.get_int("backend.conv_kernel", 15));
  c.n_coarse = static_cast<int>(kv.get_int("backend.n_coarse", 2));
  c.codebook_size = static_cast<int>(kv.get_int("codec.codebook_size", 256));
  c.latent_dim = static_cast<int>(kv.get_int("codec.latent_dim", 128));
  c.generation_cap_factor = kv.get_double("backend.generation_cap", 1.25);

  const auto mode = kv.get_string("backend.input_mode", "continuous");
  if (mode == "continuous") c.input_mode = BackendConfig::InputMode::kContinuous;
  else if (mode == "discrete") c.input_mode = BackendConfig::InputMode::kDiscrete;
  else throw ConfigError("config: backend.input_mode must be continuous|discrete");

  const auto layout = kv.get_string("backend.output_layout", "aligned");
  if (layout == "aligned") c.output_layout = BackendConfig::OutputLayout::kAligned;
  else if (layout == "ref_output") c.output_layout = BackendConfig::OutputLayout::kRefOutput;
  else throw ConfigError("config: backend.output_layout must be aligned|ref_output");

  const auto streams = kv.get_string("backend.refiner_streams", "all");
  if (streams == "all") c.refiner_streams = BackendConfig::RefinerStreams::kAll;
  else if (streams == "mix_only") c.refiner_streams = BackendConfig::RefinerStreams::kMixOnly;
  else if (streams == "ref_only") c.refiner_streams = BackendConfig::RefinerStreams::kRefOnly;
  else throw ConfigError("config: backend.refiner_streams must be all|mix_only|ref_only");
  return c;
}

TrainConfig train_config(const KvConfig& kv) {
  TrainConfig c;
  c.lr_init = kv.get_double("train.lr_init", 1e-3);
  c.warmup_steps = kv.get_int("train.warmup_steps", 10000);
  c.plateau_patience_epochs = static_cast<int>(kv.get_int("train.plateau_patience_epochs", 3));
  c.lr_halving_factor = kv.get_double("train.lr_halving_factor", 0.5);
  c.max_epochs = static_cast<int>(kv.get_int("train.max_epochs", 100));
  c.batch_size = static_cast<int>(kv.get_int("train.batch_size", 1));
  c.steps_per_epoch = kv.get_int("train.steps_per_epoch", 100);
  c.grad_clip = kv.get_double("train.grad_clip", 5.0);
  c.seed = kv.get_seed("train.seed", 1);
  return c;
}

SampleConfig sample_config(const KvConfig& kv) {
  SampleConfig c;
  c.segment_seconds = kv.get_double("data.segment_seconds", 3.0);
  c.enroll_max_seconds = kv.get_double("data.enroll_max_seconds", 5.0);
  c.snr_low_db = kv.get_double("data.snr_low_db", 0.0);
  c.snr_high_db = kv.get_double("data.snr_high_db", 5.0);
  c.sample_rate = static_cast<int>(kv.get_int("sample_rate", 16000));
  return c;
}

StrategyConfig strategy_config(const KvConfig& kv) {
  StrategyConfig c;
  c.freeze_frontend = kv.get_bool("strategy.freeze_frontend", true);
  c.aux_sisdr = kv.get_bool("strategy.aux_sisdr", false);
  c.lambda_sisdr = kv.get_double("strategy.lambda_sisdr", 1.0);
  c.split_training = kv.get_bool("strategy.split_training", false);
  return c;
}

// Checkpoint headers carry the resolved config so a saved model can be
// reconstructed without the original config file.
KvConfig kv_from_header(const nlohmann::json& header) {
  KvConfig kv;
  for (const auto& [k, v] : header.at("config").items())
    kv.set(k, v.get<std::string>());
  return kv;
}

void save_module(const std::string& path, const std::string& kind,
                 const KvConfig& kv, torch::nn::Module& m,
                 const std::string& optimizer_blob = "",
                 const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header = extra;
  header["kind"] = kind;
  header["config"] = kv.to_json();
  save_checkpoint(path, header, named_state(m), optimizer_blob);
}

void check_kind(const Checkpoint& ck, const std::string& kind, const std::string& path) {
  if (ck.header.value("kind", "") != kind)
    throw DataError("checkpoint: " + path + " is not a " + kind + " checkpoint");
}

NeuralCodec load_codec_ckpt(const std::string& path) {
  auto ck = load_checkpoint(path);
  check_kind(ck, "codec", path);
  NeuralCodec codec(codec_config(kv_from_header(ck.header)));
  load_into_module(ck, *codec);
  return codec;
}

Frontend load_frontend_ckpt(const std::string& path) {
  auto ck = load_checkpoint(path);
  check_kind(ck, "frontend", path);
  Frontend fe(frontend_config(kv_from_header(ck.header)));
  load_into_module(ck, *fe);
  return fe;
}

Backend load_backend_ckpt(const std::string& path) {
  auto ck = load_checkpoint(path);
  check_kind(ck, "backend", path);
  Backend be(backend_config(kv_from_header(ck.header)));
  load_into_module(ck, *be);
  return be;
}

// Reproducibility record written next to each run's primary output. Content
// is timestamp-free so identical runs produce identical records.
void write_run_record(const std::string& out_path, const std::string& command,
                      const KvConfig& kv, const nlohmann::json& seeds,
                      const std::map<std::string, std::string>& checkpoints) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = kv.to_json();
  j["config_hash"] = hex64(kv.content_hash());
  j["seeds"] = seeds;
  nlohmann::json ck = nlohmann::json::object();
  for (const auto& [name, path] : checkpoints)
    ck[name] = hex64(file_digest(path));
  j["checkpoint_hashes"] = ck;
  std::ofstream f(out_path);
  if (!f) throw DataError("run record: cannot write " + out_path);
  f << j.dump(2) << "\n";
}

std::string run_record_path(const std::string& primary_output) {
  return primary_output + ".run.json";
}

// Step/validation log for a training run: one CSV so two runs can be
// compared byte for byte.
void write_fit_log(const std::string& path, const FitSummary& summary) {
  std::ofstream f(path);
  if (!f) throw DataError("fit log: cannot write " + path);
  f << "kind,index,loss,lr\n";
  char buf[128];
  for (const auto& row : summary.logs) {
    std::snprintf(buf, sizeof(buf), "step,%lld,%.17g,%.17g\n",
                  static_cast<long long>(row.step), row.loss, row.lr);
    f << buf;
  }
  for (size_t i = 0; i < summary.epoch_val_losses.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "epoch,%zu,%.17g,\n", i,
                  summary.epoch_val_losses[i]);
    f << buf;
  }
}

ProgressFn stdout_progress(int every) {
  return [every](const StepLog& log) {
    if (log.step % every == 0)
      std::printf("step %6lld  loss %.5f  lr %.6g\n",
                  static_cast<long long>(log.step), log.loss, log.lr);
  };
}

std::vector<ScorerSpec> parse_scorers(const std::vector<std::string>& raw) {
  std::vector<ScorerSpec> out;
  for (const auto& s : raw) {
    auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("scorer: want name=command, got '" + s + "'");
    out.push_back({s.substr(0, eq), s.substr(eq + 1)});
  }
  return out;
}

InferenceConfig::Mode parse_mode(const std::string& mode) {
  if (mode == "ar") return InferenceConfig::Mode::kAr;
  if (mode == "nar") return InferenceConfig::Mode::kNar;
  throw ConfigError("mode must be ar|nar");
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  torch::manual_seed(0);

  CLI::App app{"dgtse: discriminative-generative target speaker extraction"};
  app.require_subcommand(1);
  int rc = 0;

  // ---- make-corpus ----
  struct {
    std::string out;
    int speakers = 6, utterances = 4;
    double seconds = 6.0;
    uint64_t seed = 7;
  } mc;
  auto* sub_mc = app.add_subcommand("make-corpus", "synthesize a toy speaker corpus");
  sub_mc->add_option("--out", mc.out, "output directory")->required();
  sub_mc->add_option("--speakers", mc.speakers, "number of speakers");
  sub_mc->add_option("--utterances", mc.utterances, "utterances per speaker");
  sub_mc->add_option("--seconds", mc.seconds, "seconds per utterance");
  sub_mc->add_option("--seed", mc.seed, "corpus seed");
  sub_mc->callback([&] {
    const int n = make_corpus(mc.out, mc.speakers, mc.utterances, mc.seconds, mc.seed);
    std::printf("wrote %d utterances under %s\n", n, mc.out.c_str());
    KvConfig kv;
    write_run_record(run_record_path(mc.out + "/corpus"), "make-corpus", kv,
                     {{"seed", mc.seed}}, {});
  });

  // ---- mix ----
  struct {
    ConfigOpts cfg;
    std::string corpus, out, wav_dir;
    int n_items = 50;
    uint64_t seed = 11;
  } mx;
  auto* sub_mx = app.add_subcommand("mix", "freeze an evaluation manifest of mixtures");
  add_config_opts(sub_mx, &mx.cfg);
  sub_mx->add_option("--corpus", mx.corpus, "corpus root")->required();
  sub_mx->add_option("--out", mx.out, "manifest path (JSON lines)")->required();
  sub_mx->add_option("--n-items", mx.n_items, "number of triplets");
  sub_mx->add_option("--seed", mx.seed, "manifest seed");
  sub_mx->add_option("--wav-dir", mx.wav_dir, "also render triplet WAVs here");
  sub_mx->callback([&] {
    auto kv = mx.cfg.resolve();
    auto scfg = sample_config(kv);
    auto idx = index_corpus(mx.corpus);
    auto plans = build_eval_manifest(idx, scfg, mx.n_items, mx.seed);
    write_manifest(mx.out, plans);
    if (!mx.wav_dir.empty()) {
      fs::create_directories(mx.wav_dir);
      for (size_t i = 0; i < plans.size(); ++i) {
        auto t = realize_plan(plans[i], scfg.sample_rate);
        const auto base = fs::path(mx.wav_dir) / ("item_" + std::to_string(i));
        write_wav(base.string() + "_mixture.wav", {t.mixture, scfg.sample_rate});
        write_wav(base.string() + "_enroll.wav", {t.enrollment, scfg.sample_rate});
        write_wav(base.string() + "_target.wav", {t.target, scfg.sample_rate});
      }
    }
    std::printf("wrote %zu manifest lines to %s\n", plans.size(), mx.out.c_str());
    write_run_record(run_record_path(mx.out), "mix", kv, {{"seed", mx.seed}}, {});
  });

  // ---- train-codec ----
  struct {
    ConfigOpts cfg;
    std::string corpus, out;
    int64_t steps = 2000;
  } tc;
  auto* sub_tc = app.add_subcommand("train-codec", "train the neural codec");
  add_config_opts(sub_tc, &tc.cfg);
  sub_tc->add_option("--corpus", tc.corpus, "corpus root")->required();
  sub_tc->add_option("--out", tc.out, "output checkpoint")->required();
  sub_tc->add_option("--steps", tc.steps, "training steps");
  sub_tc->callback([&] {
    auto kv = tc.cfg.resolve();
    auto tcfg = train_config(kv);
    torch::manual_seed(tcfg.seed);
    auto idx = index_corpus(tc.corpus);
    CachedCorpus cache(idx, static_cast<int>(kv.get_int("sample_rate", 16000)));
    NeuralCodec codec(codec_config(kv));
    CodecTrainOptions opts;
    opts.steps = tc.steps;
    opts.crop_seconds = kv.get_double("codec.crop_seconds", 1.0);
    auto summary = train_codec(codec, cache, tcfg, opts, stdout_progress(50));
    save_module(tc.out, "codec", kv, *codec);
    write_fit_log(tc.out + ".log.csv", summary);
    std::printf("codec: loss %.4f -> %.4f over %lld steps\n", summary.first_smoothed,
                summary.last_smoothed, static_cast<long long>(summary.steps_run));
    write_run_record(run_record_path(tc.out), "train-codec", kv,
                     {{"train_seed", tcfg.seed}}, {{"codec", tc.out}});
  });

  // ---- train-frontend ----
  struct {
    ConfigOpts cfg;
    std::string corpus, out;
    int64_t steps = 2000;
  } tf;
  auto* sub_tf = app.add_subcommand("train-frontend", "train the discriminative front-end");
  add_config_opts(sub_tf, &tf.cfg);
  sub_tf->add_option("--corpus", tf.corpus, "corpus root")->required();
  sub_tf->add_option("--out", tf.out, "output checkpoint")->required();
  sub_tf->add_option("--steps", tf.steps, "training steps");
  sub_tf->callback([&] {
    auto kv = tf.cfg.resolve();
    auto tcfg = train_config(kv);
    torch::manual_seed(tcfg.seed);
    auto idx = index_corpus(tf.corpus);
    auto scfg = sample_config(kv);
    CachedCorpus cache(idx, scfg.sample_rate);
    Frontend fe(frontend_config(kv));
    FrontendTrainOptions opts;
    opts.steps = tf.steps;
    auto sampler = [&](uint64_t seed) { return cache.sample(scfg, seed); };
    auto summary = train_frontend(fe, sampler, tcfg, opts, stdout_progress(50));
    save_module(tf.out, "frontend", kv, *fe);
    write_fit_log(tf.out + ".log.csv", summary);
    std::printf("frontend: loss %.4f -> %.4f over %lld steps\n", summary.first_smoothed,
                summary.last_smoothed, static_cast<long long>(summary.steps_run));
    write_run_record(run_record_path(tf.out), "train-frontend", kv,
                     {{"train_seed", tcfg.seed}}, {{"frontend", tf.out}});
  });

  // ---- train-backend ----
  struct {
    ConfigOpts cfg;
    std::string corpus, codec, out;
    int64_t steps = 3000;
  } tb;
  auto* sub_tb = app.add_subcommand("train-backend",
                                    "train the generative back-end on true mixtures");
  add_config_opts(sub_tb, &tb.cfg);
  sub_tb->add_option("--corpus", tb.corpus, "corpus root")->required();
  sub_tb->add_option("--codec", tb.codec, "trained codec checkpoint")->required();
  sub_tb->add_option("--out", tb.out, "output checkpoint")->required();
  sub_tb->add_option("--steps", tb.steps, "training steps");
  sub_tb->callback([&] {
    auto kv = tb.cfg.resolve();
    auto tcfg = train_config(kv);
    torch::manual_seed(tcfg.seed);
    auto idx = index_corpus(tb.corpus);
    auto scfg = sample_config(kv);
    CachedCorpus cache(idx, scfg.sample_rate);
    auto codec = load_codec_ckpt(tb.codec);
    Backend be(backend_config(kv));
    BackendTrainOptions opts;
    opts.steps = tb.steps;
    auto sampler = [&](uint64_t seed) { return cache.sample(scfg, seed); };
    auto summary = train_backend(be, codec, sampler, tcfg, opts,
                                 kv.get_bool("backend.use_enrollment", true),
                                 stdout_progress(50));
    save_module(tb.out, "backend", kv, *be);
    write_fit_log(tb.out + ".log.csv", summary);
    std::printf("backend: loss %.4f -> %.4f over %lld steps\n", summary.first_smoothed,
                summary.last_smoothed, static_cast<long long>(summary.steps_run));
    write_run_record(run_record_path(tb.out), "train-backend", kv,
                     {{"train_seed", tcfg.seed}},
                     {{"backend", tb.out}, {"codec", tb.codec}});
  });

  // ---- train-joint ----
  struct {
    ConfigOpts cfg;
    std::string corpus, frontend, codec, backend_init, out, out_frontend;
    int64_t steps = 500;
  } tj;
  auto* sub_tj = app.add_subcommand("train-joint", "train the composed two-stage system");
  add_config_opts(sub_tj, &tj.cfg);
  sub_tj->add_option("--corpus", tj.corpus, "corpus root")->required();
  sub_tj->add_option("--frontend", tj.frontend, "pretrained front-end checkpoint")->required();
  sub_tj->add_option("--codec", tj.codec, "trained codec checkpoint")->required();
  sub_tj->add_option("--backend-init", tj.backend_init, "optional back-end warm start");
  sub_tj->add_option("--out", tj.out, "output back-end checkpoint")->required();
  sub_tj->add_option("--out-frontend", tj.out_frontend,
                     "updated front-end checkpoint (unfrozen runs)");
  sub_tj->add_option("--steps", tj.steps, "training steps");
  sub_tj->callback([&] {
    auto kv = tj.cfg.resolve();
    auto tcfg = train_config(kv);
    auto strat = strategy_config(kv);
    torch::manual_seed(tcfg.seed);
    auto idx = index_corpus(tj.corpus);
    auto scfg = sample_config(kv);
    CachedCorpus cache(idx, scfg.sample_rate);
    auto codec = load_codec_ckpt(tj.codec);
    auto fe = load_frontend_ckpt(tj.frontend);
    Backend be = tj.backend_init.empty() ? Backend(backend_config(kv))
                                         : load_backend_ckpt(tj.backend_init);
    TwoStage system(fe, be, codec, kv.get_bool("backend.use_enrollment", true));
    system.mark_frontend_pretrained();
    JointTrainOptions opts;
    opts.steps = tj.steps;
    auto sampler = [&](uint64_t seed) { return cache.sample(scfg, seed); };
    auto summary = train_joint(system, sampler, strat, tcfg, opts, stdout_progress(25));
    save_module(tj.out, "backend", kv, *be);
    write_fit_log(tj.out + ".log.csv", summary);
    std::map<std::string, std::string> ckpts{
        {"backend", tj.out}, {"codec", tj.codec}, {"frontend", tj.frontend}};
    if (!strat.freeze_frontend) {
      const std::string fe_out =
          tj.out_frontend.empty() ? tj.out + ".frontend.ckpt" : tj.out_frontend;
      save_module(fe_out, "frontend", kv, *fe);
      ckpts["frontend_updated"] = fe_out;
    }
    std::printf("joint: loss %.4f -> %.4f over %lld steps\n", summary.first_smoothed,
                summary.last_smoothed, static_cast<long long>(summary.steps_run));
    write_run_record(run_record_path(tj.out), "train-joint", kv,
                     {{"train_seed", tcfg.seed}}, ckpts);
  });

  // ---- extract ----
  struct {
    ConfigOpts cfg;
    std::string mixture, enroll, frontend, backend, codec, out, out_disc;
    std::string mode = "ar";
    double injection_ratio = 1.0;
    uint64_t seed = 0;
  } ex;
  auto* sub_ex = app.add_subcommand("extract", "extract the enrolled speaker from a mixture");
  add_config_opts(sub_ex, &ex.cfg);
  sub_ex->add_option("--mixture", ex.mixture, "mixture WAV")->required();
  sub_ex->add_option("--enroll", ex.enroll, "enrollment WAV")->required();
  sub_ex->add_option("--frontend", ex.frontend, "front-end checkpoint")->required();
  sub_ex->add_option("--backend", ex.backend, "back-end checkpoint")->required();
  sub_ex->add_option("--codec", ex.codec, "codec checkpoint")->required();
  sub_ex->add_option("--out", ex.out, "output WAV (generative estimate)")->required();
  sub_ex->add_option("--out-discriminative", ex.out_disc, "also write the stage-one estimate");
  sub_ex->add_option("--mode", ex.mode, "ar|nar");
  sub_ex->add_option("--injection-ratio", ex.injection_ratio, "NAR pseudo-token keep ratio");
  sub_ex->add_option("--seed", ex.seed, "inference seed");
  sub_ex->callback([&] {
    auto kv = ex.cfg.resolve();
    auto codec = load_codec_ckpt(ex.codec);
    auto fe = load_frontend_ckpt(ex.frontend);
    auto be = load_backend_ckpt(ex.backend);
    TwoStage system(fe, be, codec, kv.get_bool("backend.use_enrollment", true));
    system.mark_frontend_pretrained();
    auto mix = read_wav(ex.mixture);
    auto enr = read_wav(ex.enroll);
    if (mix.sample_rate != codec->config().sample_rate ||
        enr.sample_rate != codec->config().sample_rate)
      throw DataError("extract: input sample rate differs from the model's");
    InferenceConfig icfg;
    icfg.mode = parse_mode(ex.mode);
    icfg.injection_ratio = ex.injection_ratio;
    icfg.seed = ex.seed;
    auto result = system.infer(mix.samples.unsqueeze(0), enr.samples.unsqueeze(0), icfg);
    write_wav(ex.out, {result.g_o.squeeze(0), mix.sample_rate});
    if (!ex.out_disc.empty())
      write_wav(ex.out_disc, {result.d_o.squeeze(0), mix.sample_rate});
    std::printf("wrote %s\n", ex.out.c_str());
    write_run_record(run_record_path(ex.out), "extract", kv, {{"seed", ex.seed}},
                     {{"frontend", ex.frontend}, {"backend", ex.backend},
                      {"codec", ex.codec}});
  });

  // ---- evaluate ----
  struct {
    ConfigOpts cfg;
    std::string manifest, frontend, backend, codec;
    std::string system_name = "model";
    std::string mode = "ar";
    std::string out_json, out_csv, workdir = "eval_workdir";
    std::vector<std::string> scorers;
    double injection_ratio = 1.0;
    uint64_t seed = 0;
  } ev;
  auto* sub_ev = app.add_subcommand("evaluate", "score a system over a frozen manifest");
  add_config_opts(sub_ev, &ev.cfg);
  sub_ev->add_option("--manifest", ev.manifest, "manifest path")->required();
  sub_ev->add_option("--frontend", ev.frontend, "front-end checkpoint");
  sub_ev->add_option("--backend", ev.backend, "back-end checkpoint");
  sub_ev->add_option("--codec", ev.codec, "codec checkpoint");
  sub_ev->add_option("--system", ev.system_name, "model|oracle|identity");
  sub_ev->add_option("--mode", ev.mode, "ar|nar");
  sub_ev->add_option("--injection-ratio", ev.injection_ratio, "NAR pseudo-token keep ratio");
  sub_ev->add_option("--seed", ev.seed, "evaluation seed");
  sub_ev->add_option("--scorer", ev.scorers, "external scorer name=command, repeatable");
  sub_ev->add_option("--out-json", ev.out_json, "report JSON path")->required();
  sub_ev->add_option("--out-csv", ev.out_csv, "report CSV path");
  sub_ev->add_option("--workdir", ev.workdir, "scratch dir for scorer WAVs");
  sub_ev->callback([&] {
    auto kv = ev.cfg.resolve();
    auto plans = read_manifest(ev.manifest);
    const int rate = static_cast<int>(kv.get_int("sample_rate", 16000));
    InferenceConfig icfg;
    icfg.mode = parse_mode(ev.mode);
    icfg.injection_ratio = ev.injection_ratio;
    icfg.seed = ev.seed;

    EvalSystem system;
    std::map<std::string, std::string> ckpts;
    std::optional<TwoStage> model;
    NeuralCodec codec{nullptr};
    Frontend fe{nullptr};
    Backend be{nullptr};
    if (ev.system_name == "oracle") {
      system = oracle_system();
    } else if (ev.system_name == "identity") {
      system = identity_system();
    } else if (ev.system_name == "model") {
      if (ev.frontend.empty() || ev.backend.empty() || ev.codec.empty())
        throw ConfigError("evaluate: model system needs --frontend/--backend/--codec");
      codec = load_codec_ckpt(ev.codec);
      fe = load_frontend_ckpt(ev.frontend);
      be = load_backend_ckpt(ev.backend);
      model.emplace(fe, be, codec, kv.get_bool("backend.use_enrollment", true));
      model->mark_frontend_pretrained();
      system = two_stage_system(*model);
      ckpts = {{"frontend", ev.frontend}, {"backend", ev.backend}, {"codec", ev.codec}};
    } else {
      throw ConfigError("evaluate: --system must be model|oracle|identity");
    }

    auto loader = [rate](const MixPlan& plan) { return realize_plan(plan, rate); };
    auto report = evaluate(system, plans, loader, icfg, parse_scorers(ev.scorers),
                           ev.workdir, rate);
    write_report_json(report, ev.out_json);
    if (!ev.out_csv.empty()) write_report_csv(report, ev.out_csv);
    std::printf("items %zu  mean si_sdr_d %.3f  mean si_sdr_g %.3f%s\n",
                report.rows.size(), report.aggregates["si_sdr_d"],
                report.aggregates["si_sdr_g"],
                report.partial ? "  (partial: scorer failures)" : "");
    write_run_record(run_record_path(ev.out_json), "evaluate", kv,
                     {{"seed", ev.seed}}, ckpts);
    if (report.partial) rc = 3;
  });

  // ---- ablate ----
  struct {
    ConfigOpts cfg;
    std::string corpus, frontend, codec, out_dir;
    int64_t steps = 200;
    int n_items = 10;
    uint64_t seed = 17;
    int n_coarse = -1;
    std::string input_mode, output_layout, refiner_streams;
    bool split = false, unfrozen = false, aux_sisdr = false, no_enrollment = false;
    double lambda_sisdr = 1.0;
    double injection_ratio = 1.0;
  } ab;
  auto* sub_ab = app.add_subcommand("ablate",
                                    "train and evaluate one ablation configuration");
  add_config_opts(sub_ab, &ab.cfg);
  sub_ab->add_option("--corpus", ab.corpus, "corpus root")->required();
  sub_ab->add_option("--frontend", ab.frontend, "pretrained front-end checkpoint")->required();
  sub_ab->add_option("--codec", ab.codec, "trained codec checkpoint")->required();
  sub_ab->add_option("--out-dir", ab.out_dir, "output directory")->required();
  sub_ab->add_option("--steps", ab.steps, "joint training steps");
  sub_ab->add_option("--n-items", ab.n_items, "evaluation items");
  sub_ab->add_option("--seed", ab.seed, "run seed");
  sub_ab->add_option("--n-coarse", ab.n_coarse, "token layers predicted by the decoder");
  sub_ab->add_option("--input-mode", ab.input_mode, "continuous|discrete");
  sub_ab->add_option("--output-layout", ab.output_layout, "aligned|ref_output");
  sub_ab->add_option("--refiner-streams", ab.refiner_streams, "all|mix_only|ref_only");
  sub_ab->add_flag("--split-training", ab.split, "split decoder/refiner training");
  sub_ab->add_flag("--unfrozen", ab.unfrozen, "fine-tune the front-end jointly");
  sub_ab->add_flag("--aux-sisdr", ab.aux_sisdr, "add the waveform regularizer");
  sub_ab->add_flag("--no-enrollment", ab.no_enrollment, "drop the enrollment stream");
  sub_ab->add_option("--lambda", ab.lambda_sisdr, "regularizer weight");
  sub_ab->add_option("--injection-ratio", ab.injection_ratio, "NAR keep ratio");
  sub_ab->callback([&] {
    auto kv = ab.cfg.resolve();
    if (ab.n_coarse > 0) kv.set("backend.n_coarse", std::to_string(ab.n_coarse));
    if (!ab.input_mode.empty()) kv.set("backend.input_mode", ab.input_mode);
    if (!ab.output_layout.empty()) kv.set("backend.output_layout", ab.output_layout);
    if (!ab.refiner_streams.empty()) kv.set("backend.refiner_streams", ab.refiner_streams);
    if (ab.no_enrollment) kv.set("backend.use_enrollment", "false");
    kv.set("strategy.split_training", ab.split ? "true" : "false");
    kv.set("strategy.freeze_frontend", ab.unfrozen ? "false" : "true");
    kv.set("strategy.aux_sisdr", ab.aux_sisdr ? "true" : "false");
    kv.set("strategy.lambda_sisdr", std::to_string(ab.lambda_sisdr));
    kv.set("train.seed", std::to_string(ab.seed));

    fs::create_directories(ab.out_dir);
    auto tcfg = train_config(kv);
    auto strat = strategy_config(kv);
    torch::manual_seed(tcfg.seed);
    auto idx = index_corpus(ab.corpus);
    auto scfg = sample_config(kv);
    CachedCorpus cache(idx, scfg.sample_rate);
    auto codec = load_codec_ckpt(ab.codec);
    auto fe = load_frontend_ckpt(ab.frontend);
    Backend be(backend_config(kv));
    TwoStage system(fe, be, codec, kv.get_bool("backend.use_enrollment", true));
    system.mark_frontend_pretrained();

    JointTrainOptions opts;
    opts.steps = ab.steps;
    auto sampler = [&](uint64_t seed) { return cache.sample(scfg, seed); };
    auto summary = train_joint(system, sampler, strat, tcfg, opts, stdout_progress(25));
    const std::string be_path = (fs::path(ab.out_dir) / "backend.ckpt").string();
    save_module(be_path, "backend", kv, *be);
    write_fit_log(be_path + ".log.csv", summary);

    auto plans = build_eval_manifest(cache.index(), scfg, ab.n_items,
                                     derive_seed(ab.seed, 0x45414cull));
    write_manifest((fs::path(ab.out_dir) / "manifest.jsonl").string(), plans);
    auto loader = [&cache](const MixPlan& plan) { return cache.realize(plan); };
    auto run_eval = [&](InferenceConfig::Mode mode, const std::string& name) {
      InferenceConfig icfg;
      icfg.mode = mode;
      icfg.injection_ratio = ab.injection_ratio;
      icfg.seed = derive_seed(ab.seed, 0x4e4152ull);
      auto report = evaluate(two_stage_system(system), plans, loader, icfg);
      write_report_json(report, (fs::path(ab.out_dir) / (name + ".json")).string());
      write_report_csv(report, (fs::path(ab.out_dir) / (name + ".csv")).string());
      std::printf("%s: mean si_sdr_d %.3f  mean si_sdr_g %.3f\n", name.c_str(),
                  report.aggregates["si_sdr_d"], report.aggregates["si_sdr_g"]);
    };
    run_eval(InferenceConfig::Mode::kAr, "report_ar");
    run_eval(InferenceConfig::Mode::kNar, "report_nar");
    write_run_record((fs::path(ab.out_dir) / "run.json").string(), "ablate", kv,
                     {{"seed", ab.seed}},
                     {{"frontend", ab.frontend}, {"codec", ab.codec},
                      {"backend", be_path}});
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return rc;
}
