#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stage/codec.hpp"
#include "stage/config.hpp"
#include "stage/dataset.hpp"
#include "stage/error.hpp"
#include "stage/eval.hpp"
#include "stage/model.hpp"
#include "stage/training.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace stage;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Bad flag combinations or config values.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Options every command understands: a config file, a seed, and generic
// key=value overrides. Specific flags are applied on top of these.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Flat JSON run configuration");
    app->add_option("--seed", seed, "Random seed (default: STAGE_SEED or 0)");
    app->add_option("--set", overrides, "Config override, key=value (repeatable)");
  }

  RunConfig resolve() const {
    RunConfig c;
    try {
      c.seed = default_seed();
      if (!config_path.empty()) c = RunConfig::load(config_path, c);
      for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got " + kv);
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
      }
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
    if (seed) c.seed = *seed;
    return c;
  }
};

template <typename T>
void override_from(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

// Explicit flag first, then the paths.* entry of the configuration.
std::string pick_path(const std::string& flag_value, const std::string& configured, const char* flag) {
  if (!flag_value.empty()) return flag_value;
  if (!configured.empty()) return configured;
  throw UsageError(std::string(flag) + " is required (or set it in the configuration)");
}

void validate_config(const RunConfig& c) {
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw FormatError(path.string() + ": write failed");
}

fs::path sidecar(const fs::path& output) { return fs::path(output.string() + ".json"); }

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

ordered_json log_summary(const training::TrainResult& r) {
  ordered_json j;
  j["steps"] = r.log.size();
  j["final_loss"] = r.final_loss();
  j["first_loss"] = r.log.empty() ? 0.0 : r.log.front().loss;
  j["events"] = r.events;
  return j;
}

training::Progress progress_printer(std::size_t every, std::size_t total) {
  return [every, total](const training::StepLog& log) {
    if (every == 0) return;
    if (log.step % every == 0 || log.step + 1 == total) {
      std::printf("step %zu loss %.4f grad_norm %.3f lr %.3g/%.3g\n", log.step, log.loss, log.grad_norm,
                  log.base_lr, log.context_lr);
      std::fflush(stdout);
    }
  };
}

std::vector<signal::Waveform> codec_training_clips(const std::vector<training::Song>& songs) {
  std::vector<signal::Waveform> clips;
  for (const auto& song : songs) {
    std::vector<signal::Waveform> stems;
    for (const auto& [role, stem] : song.stems) {
      clips.push_back(stem);
      stems.push_back(stem);
    }
    clips.push_back(signal::mix(stems));
    clips.push_back(signal::synth_metronome(song.spec.tempo_bpm, song.spec.duration_s, song.spec.sample_rate));
  }
  return clips;
}

// ---------------------------------------------------------------- commands

int cmd_synth_dataset(const RunConfig& cfg, const fs::path& out) {
  auto songs = training::synth_dataset(cfg.dataset.songs, cfg.dataset.duration_s, cfg.seed,
                                       cfg.dataset.tempo_min, cfg.dataset.tempo_max,
                                       cfg.dataset.sample_rate);
  dataset::save(out, songs);
  std::printf("wrote %zu songs to %s\n", songs.size(), out.string().c_str());
  return kExitOk;
}

int cmd_train_codec(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out) {
  const auto songs = dataset::load(data_dir);
  auto opts = cfg.codec;
  opts.seed = cfg.seed;
  auto codec = codec::train_codec(codec_training_clips(songs), opts);
  ensure_parent(out);
  codec::save(codec, out);
  double mse = 0.0;
  for (const auto& song : songs) {
    mse += codec::reconstruction_error(codec, song.stems.begin()->second, codec.num_codebooks);
  }
  mse /= static_cast<double>(songs.size());
  ordered_json meta;
  meta["command"] = "train-codec";
  meta["seed"] = cfg.seed;
  meta["songs"] = songs.size();
  meta["train_mse"] = mse;
  meta["config"] = cfg.to_json();
  write_json(sidecar(out), meta);
  std::printf("codec K=%u V=%u frame=%u, reconstruction mse %.6g\n", codec.num_codebooks,
              codec.codebook_size, codec.frame_size, mse);
  return kExitOk;
}

int cmd_encode(const fs::path& codec_path, const fs::path& in, const fs::path& out) {
  const auto codec = codec::load(codec_path);
  const auto grid = codec::encode(codec, signal::load_wav(in, static_cast<int>(codec.sample_rate)));
  std::ofstream f(out);
  f << codec::to_text(grid);
  if (!f) throw FormatError(out.string() + ": write failed");
  std::printf("%zu frames x %zu codebooks\n", grid.num_frames(), grid.num_codebooks());
  return kExitOk;
}

int cmd_decode(const fs::path& codec_path, const fs::path& in, const fs::path& out) {
  const auto codec = codec::load(codec_path);
  std::ifstream f(in);
  if (!f) throw FormatError(in.string() + ": cannot open");
  const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  signal::write_wav(out, codec::decode(codec, codec::from_text(text)));
  return kExitOk;
}

int cmd_pretrain(RunConfig cfg, const fs::path& data_dir, const fs::path& codec_path, const fs::path& out,
                 std::size_t log_every) {
  const auto codec = codec::load(codec_path);
  cfg.model.num_codebooks = codec.num_codebooks;
  cfg.model.audio_vocab = codec.codebook_size;
  validate_config(cfg);
  const auto songs = dataset::load(data_dir);
  auto opts = cfg.pretrain;
  opts.seed = cfg.seed;
  auto result = training::pretrain(songs, codec, cfg.model, opts, progress_printer(log_every, opts.steps));
  ensure_parent(out);
  model::save(result.params, out);
  ordered_json meta;
  meta["command"] = "pretrain";
  meta["seed"] = cfg.seed;
  meta["training"] = log_summary(result);
  meta["config"] = cfg.to_json();
  write_json(sidecar(out), meta);
  std::printf("final loss %.4f\n", result.final_loss());
  return kExitOk;
}

int cmd_finetune(RunConfig cfg, const fs::path& model_path, const fs::path& data_dir, const fs::path& codec_path,
                 const fs::path& out, bool ablate, std::size_t log_every) {
  const auto codec = codec::load(codec_path);
  auto params = model::load(model_path);
  if (params.config.num_codebooks != codec.num_codebooks || params.config.audio_vocab != codec.codebook_size) {
    throw InvalidArgument("model checkpoint does not match the codec vocabulary");
  }
  cfg.model = params.config;
  cfg.codec.num_codebooks = codec.num_codebooks;
  cfg.codec.codebook_size = codec.codebook_size;
  cfg.codec.frame_size = codec.frame_size;
  if (ablate) cfg.sampler.p_metronome = 0.0;
  cfg.sampler.seed = cfg.seed;
  validate_config(cfg);
  const auto songs = dataset::load(data_dir);
  auto result = training::finetune(std::move(params), songs, codec, cfg.sampler, cfg.schedule, cfg.seed,
                                   progress_printer(log_every, cfg.schedule.total_steps()),
                                   [](const std::string& e) {
                                     std::printf("%s\n", e.c_str());
                                     std::fflush(stdout);
                                   });
  ensure_parent(out);
  model::save(result.params, out);
  ordered_json meta;
  meta["command"] = "finetune";
  meta["tag"] = ablate ? "abl" : "full";
  meta["seed"] = cfg.seed;
  meta["target_instrument"] = std::string(signal::to_string(cfg.sampler.target_instrument));
  meta["p_metronome"] = cfg.sampler.p_metronome;
  meta["schedule"] = {{"phase1_steps", cfg.schedule.phase1_steps},
                      {"phase1_context_lr", cfg.schedule.phase1_context_lr},
                      {"phase2_steps", cfg.schedule.phase2_steps},
                      {"base_lr_peak", cfg.schedule.base_lr_peak},
                      {"context_lr_final", cfg.schedule.context_lr_final},
                      {"ramp_steps", cfg.schedule.ramp_steps},
                      {"batch_size", cfg.schedule.batch_size}};
  meta["training"] = log_summary(result);
  meta["config"] = cfg.to_json();
  write_json(sidecar(out), meta);
  std::printf("final loss %.4f\n", result.final_loss());
  return kExitOk;
}

struct GenerateArgs {
  fs::path model_path, codec_path, out;
  std::string context_path, combine_path, dump_context;
  std::optional<double> metronome_bpm;
  double duration_s = 4.0;
};

int cmd_generate(const RunConfig& base_cfg, const GenerateArgs& a) {
  const bool has_context = !a.context_path.empty();
  const bool has_metronome = a.metronome_bpm.has_value();
  const bool has_combine = !a.combine_path.empty();
  if (has_combine && !has_metronome) throw UsageError("--combine requires --metronome-bpm");
  if (has_combine && has_context) throw UsageError("--combine replaces --context; give one of them");
  if (!has_combine && has_context == has_metronome) {
    throw UsageError("give exactly one context source: --context or --metronome-bpm");
  }
  if (!(a.duration_s > 0.0)) throw UsageError("--duration must be positive");
  if (has_metronome && !(*a.metronome_bpm > 0.0)) throw UsageError("--metronome-bpm must be positive");

  const auto codec = codec::load(a.codec_path);
  const auto params = model::load(a.model_path);
  if (params.config.num_codebooks != codec.num_codebooks || params.config.audio_vocab != codec.codebook_size) {
    throw InvalidArgument("model checkpoint does not match the codec vocabulary");
  }
  auto cfg = base_cfg;
  cfg.model = params.config;
  cfg.codec.num_codebooks = codec.num_codebooks;
  cfg.codec.codebook_size = codec.codebook_size;
  cfg.codec.frame_size = codec.frame_size;
  const int rate = static_cast<int>(codec.sample_rate);

  signal::Waveform context;
  if (has_context) {
    context = signal::load_wav(a.context_path, rate);
  } else {
    const auto metronome = signal::synth_metronome(*a.metronome_bpm, a.duration_s, rate);
    context = has_combine ? signal::combine_context(signal::load_wav(a.combine_path, rate), metronome) : metronome;
  }
  if (!a.dump_context.empty()) signal::write_wav(a.dump_context, context);

  const std::size_t lanes = codec.num_codebooks;
  const auto n_frames = static_cast<std::size_t>(std::lround(a.duration_s * codec.frame_rate()));
  const std::size_t limit = params.config.max_seq_len;
  if (n_frames == 0) throw UsageError("--duration is shorter than one codec frame");
  if (1 + n_frames + lanes - 1 > limit) {
    throw InvalidArgument("requested duration does not fit the model's max_seq_len");
  }
  auto ctx_grid = context.size() >= codec.frame_size ? codec::encode(codec, context) : codec::TokenGrid(0, lanes);
  // The context keeps its beginning (aligned with the target start) when the
  // combined sequence would not fit.
  const std::size_t room = limit - (n_frames + lanes - 1) - 1;
  const std::size_t max_ctx = room >= lanes ? room - lanes + 1 : 0;
  if (ctx_grid.num_frames() > max_ctx) {
    std::fprintf(stderr, "note: context truncated from %zu to %zu frames to fit max_seq_len\n",
                 ctx_grid.num_frames(), max_ctx);
    ctx_grid = ctx_grid.truncated(max_ctx);
  }
  const auto prefix = tokens::build_inference_prefix(ctx_grid, lanes, params.config.vocabulary());
  auto sampling = cfg.sampling;
  sampling.seed = cfg.seed;
  sampling.validate(params.config.audio_vocab);
  const auto grid = model::generate(params, prefix, n_frames, sampling);
  const auto audio = codec::decode(codec, grid);
  ensure_parent(a.out);
  signal::write_wav(a.out, audio);

  ordered_json meta;
  meta["command"] = "generate";
  meta["seed"] = cfg.seed;
  meta["context_source"] = has_combine ? "combine" : (has_context ? "file" : "metronome");
  meta["metronome_bpm"] = has_metronome ? ordered_json(*a.metronome_bpm) : ordered_json(nullptr);
  meta["duration_s"] = a.duration_s;
  meta["frames"] = n_frames;
  meta["context_frames"] = ctx_grid.num_frames();
  meta["sampling"] = {{"temperature", sampling.temperature}, {"top_k", sampling.top_k}};
  meta["config"] = cfg.to_json();
  write_json(sidecar(a.out), meta);
  std::printf("wrote %.3f s to %s\n", audio.duration_seconds(), a.out.string().c_str());
  return kExitOk;
}

int cmd_evaluate(const RunConfig& cfg, const fs::path& generated, const std::string& reference_dir,
                 const std::string& bpm_file, const fs::path& report_path) {
  if (reference_dir.empty() && bpm_file.empty()) {
    throw UsageError("give --reference and/or --reference-bpm-file");
  }
  eval::EvalReference ref;
  if (!reference_dir.empty()) ref.reference_dir = fs::path(reference_dir);
  if (!bpm_file.empty()) ref.bpm = eval::load_bpm_file(bpm_file);
  auto report = eval::evaluate_run(generated, ref, cfg.eval);
  auto j = report.to_json();
  j["config"]["fad_reference"] = reference_dir.empty() ? "none" : "caller-supplied reference directory";
  ensure_parent(report_path);
  write_json(report_path, j);

  std::printf("%-28s %9s %9s %9s\n", "clip", "precision", "recall", "f1");
  for (const auto& c : report.clips) {
    if (c.beats) {
      std::printf("%-28s %9.3f %9.3f %9.3f\n", c.name.c_str(), c.beats->precision, c.beats->recall, c.beats->f1);
    } else {
      std::printf("%-28s %9s %9s %9s\n", c.name.c_str(), "-", "-", "-");
    }
  }
  auto show = [](const char* label, const std::optional<double>& v) {
    if (v) std::printf("%s %.6g\n", label, *v);
    else std::printf("%s n/a\n", label);
  };
  show("mean_f1", report.mean_f1);
  show("fad", report.fad);
  show("kad", report.kad);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prefix-conditioned stem generation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "stage 0.1");

  // synth-dataset
  Common synth_common;
  std::string synth_out;
  std::optional<std::size_t> songs;
  std::optional<double> duration, tempo_min, tempo_max;
  auto* synth = app.add_subcommand("synth-dataset", "Synthesize a multi-stem dataset");
  synth_common.attach(synth);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--songs", songs, "Number of songs");
  synth->add_option("--duration", duration, "Song duration in seconds");
  synth->add_option("--tempo-min", tempo_min, "Lowest tempo (bpm)");
  synth->add_option("--tempo-max", tempo_max, "Highest tempo (bpm)");

  // train-codec
  Common codec_common;
  std::string codec_data, codec_out;
  std::optional<std::uint32_t> codebooks, codebook_size, frame_size;
  std::optional<int> iters;
  auto* train_codec = app.add_subcommand("train-codec", "Train the residual VQ codec");
  codec_common.attach(train_codec);
  train_codec->add_option("--dataset", codec_data, "Dataset directory (default: paths.dataset)");
  train_codec->add_option("--out", codec_out, "Codec checkpoint path")->required();
  train_codec->add_option("--codebooks", codebooks, "Number of codebooks K");
  train_codec->add_option("--codebook-size", codebook_size, "Centroids per codebook V");
  train_codec->add_option("--frame-size", frame_size, "Samples per frame");
  train_codec->add_option("--iters", iters, "Lloyd iterations per stage");

  // encode / decode
  std::string enc_codec, enc_in, enc_out;
  auto* encode = app.add_subcommand("encode", "Encode a WAV file to token text");
  encode->add_option("--codec", enc_codec, "Codec checkpoint")->required();
  encode->add_option("--in", enc_in, "Input WAV")->required();
  encode->add_option("--out", enc_out, "Output token text")->required();
  std::string dec_codec, dec_in, dec_out;
  auto* decode = app.add_subcommand("decode", "Decode token text to a WAV file");
  decode->add_option("--codec", dec_codec, "Codec checkpoint")->required();
  decode->add_option("--in", dec_in, "Input token text")->required();
  decode->add_option("--out", dec_out, "Output WAV")->required();

  // pretrain
  Common pre_common;
  std::string pre_data, pre_codec, pre_out;
  std::optional<std::size_t> pre_steps, pre_batch;
  std::optional<double> pre_lr;
  std::size_t pre_log_every = 50;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the transformer on full mixtures");
  pre_common.attach(pretrain);
  pretrain->add_option("--dataset", pre_data, "Dataset directory (default: paths.dataset)");
  pretrain->add_option("--codec", pre_codec, "Codec checkpoint (default: paths.codec)");
  pretrain->add_option("--out", pre_out, "Model checkpoint path")->required();
  pretrain->add_option("--steps", pre_steps, "Optimizer steps");
  pretrain->add_option("--batch-size", pre_batch, "Sequences per step");
  pretrain->add_option("--lr", pre_lr, "Learning rate");
  pretrain->add_option("--log-every", pre_log_every, "Print the loss every N steps (0: never)");

  // finetune
  Common ft_common;
  std::string ft_model, ft_data, ft_codec, ft_out, ft_target;
  bool ablate = false;
  std::optional<std::size_t> phase1_steps, phase2_steps, ft_batch;
  std::size_t ft_log_every = 50;
  auto* finetune = app.add_subcommand("finetune", "Two-phase prefix fine-tuning");
  ft_common.attach(finetune);
  finetune->add_option("--model", ft_model, "Pretrained model checkpoint (default: paths.model)");
  finetune->add_option("--dataset", ft_data, "Dataset directory (default: paths.dataset)");
  finetune->add_option("--codec", ft_codec, "Codec checkpoint (default: paths.codec)");
  finetune->add_option("--out", ft_out, "Output model checkpoint")->required();
  finetune->add_option("--target-stem", ft_target, "Target instrument")->check(CLI::IsMember({"drums", "bass"}));
  finetune->add_flag("--ablate-metronome", ablate, "Never build metronome-conditioned pairs");
  finetune->add_option("--steps-phase1", phase1_steps, "Context-row warm-up steps");
  finetune->add_option("--steps-phase2", phase2_steps, "Full fine-tuning steps");
  finetune->add_option("--batch-size", ft_batch, "Pairs per step");
  finetune->add_option("--log-every", ft_log_every, "Print the loss every N steps (0: never)");

  // generate
  Common gen_common;
  GenerateArgs gen;
  std::string gen_model, gen_codec, gen_out;
  std::optional<double> temperature;
  std::optional<std::uint32_t> top_k;
  auto* generate = app.add_subcommand("generate", "Generate a stem conditioned on a context");
  gen_common.attach(generate);
  generate->add_option("--model", gen_model, "Model checkpoint (default: paths.model)");
  generate->add_option("--codec", gen_codec, "Codec checkpoint (default: paths.codec)");
  generate->add_option("--context", gen.context_path, "Context WAV");
  generate->add_option("--metronome-bpm", gen.metronome_bpm, "Use a metronome of this tempo as context");
  generate->add_option("--duration", gen.duration_s, "Seconds to generate");
  generate->add_option("--combine", gen.combine_path, "Mixture WAV overlaid with the metronome");
  generate->add_option("--out", gen_out, "Output WAV")->required();
  generate->add_option("--dump-context", gen.dump_context, "Also write the context waveform here");
  generate->add_option("--temperature", temperature, "Sampling temperature");
  generate->add_option("--top-k", top_k, "Sample among the k most likely ids");

  // evaluate
  Common ev_common;
  std::string ev_generated, ev_reference, ev_bpm, ev_report;
  std::optional<double> tolerance;
  auto* evaluate = app.add_subcommand("evaluate", "Beat F1, FAD and KAD for a directory of clips");
  ev_common.attach(evaluate);
  evaluate->add_option("--generated", ev_generated, "Directory of generated WAVs")->required();
  evaluate->add_option("--reference", ev_reference, "Directory of reference WAVs");
  evaluate->add_option("--reference-bpm-file", ev_bpm, "JSON object mapping clip name to bpm");
  evaluate->add_option("--report", ev_report, "Report JSON path")->required();
  evaluate->add_option("--tolerance", tolerance, "Beat matching tolerance in seconds");

  // dump-config
  Common dump_common;
  std::string dump_out;
  auto* dump = app.add_subcommand("dump-config", "Print the effective configuration");
  dump_common.attach(dump);
  dump->add_option("--out", dump_out, "Write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      auto cfg = synth_common.resolve();
      override_from(songs, cfg.dataset.songs);
      override_from(duration, cfg.dataset.duration_s);
      override_from(tempo_min, cfg.dataset.tempo_min);
      override_from(tempo_max, cfg.dataset.tempo_max);
      validate_config(cfg);
      return cmd_synth_dataset(cfg, synth_out);
    }
    if (*train_codec) {
      auto cfg = codec_common.resolve();
      override_from(codebooks, cfg.codec.num_codebooks);
      override_from(codebook_size, cfg.codec.codebook_size);
      override_from(frame_size, cfg.codec.frame_size);
      override_from(iters, cfg.codec.iters);
      cfg.model.num_codebooks = cfg.codec.num_codebooks;
      cfg.model.audio_vocab = cfg.codec.codebook_size;
      validate_config(cfg);
      return cmd_train_codec(cfg, pick_path(codec_data, cfg.paths.dataset, "--dataset"), codec_out);
    }
    if (*encode) return cmd_encode(enc_codec, enc_in, enc_out);
    if (*decode) return cmd_decode(dec_codec, dec_in, dec_out);
    if (*pretrain) {
      auto cfg = pre_common.resolve();
      override_from(pre_steps, cfg.pretrain.steps);
      override_from(pre_batch, cfg.pretrain.batch_size);
      override_from(pre_lr, cfg.pretrain.lr);
      return cmd_pretrain(cfg, pick_path(pre_data, cfg.paths.dataset, "--dataset"),
                          pick_path(pre_codec, cfg.paths.codec, "--codec"), pre_out, pre_log_every);
    }
    if (*finetune) {
      auto cfg = ft_common.resolve();
      if (!ft_target.empty()) cfg.sampler.target_instrument = signal::parse_stem_role(ft_target);
      override_from(phase1_steps, cfg.schedule.phase1_steps);
      override_from(phase2_steps, cfg.schedule.phase2_steps);
      override_from(ft_batch, cfg.schedule.batch_size);
      return cmd_finetune(cfg, pick_path(ft_model, cfg.paths.model, "--model"),
                          pick_path(ft_data, cfg.paths.dataset, "--dataset"),
                          pick_path(ft_codec, cfg.paths.codec, "--codec"), ft_out, ablate, ft_log_every);
    }
    if (*generate) {
      auto cfg = gen_common.resolve();
      override_from(temperature, cfg.sampling.temperature);
      override_from(top_k, cfg.sampling.top_k);
      gen.model_path = pick_path(gen_model, cfg.paths.model, "--model");
      gen.codec_path = pick_path(gen_codec, cfg.paths.codec, "--codec");
      gen.out = gen_out;
      return cmd_generate(cfg, gen);
    }
    if (*evaluate) {
      auto cfg = ev_common.resolve();
      override_from(tolerance, cfg.eval.tolerance_s);
      try {
        cfg.eval.validate();
      } catch (const InvalidArgument& e) {
        throw UsageError(e.what());
      }
      return cmd_evaluate(cfg, ev_generated, ev_reference, ev_bpm, ev_report);
    }
    if (*dump) {
      const auto cfg = dump_common.resolve();
      if (dump_out.empty()) {
        std::cout << cfg.dump();
      } else {
        std::ofstream out(dump_out);
        out << cfg.dump();
        if (!out) throw FormatError(dump_out + ": write failed");
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
