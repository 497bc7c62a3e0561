#include "stage/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "stage/error.hpp"

namespace stage::training {
namespace {

using signal::StemRole;
using signal::Waveform;

void require_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument(std::string(what) + " must be in [0, 1]");
}

void require_ordered(double lo, double hi, const char* what) {
  if (!(lo <= hi)) throw InvalidArgument(std::string(what) + " range is not ordered");
}

double linear_ramp(double from, double to, std::size_t s, std::size_t ramp) {
  if (ramp == 0 || s >= ramp) return to;
  return from + (to - from) * static_cast<double>(s) / static_cast<double>(ramp);
}

// Zeroes gradient entries whose group is frozen this step.
void mask_frozen(std::vector<float>& grads, const std::vector<std::uint8_t>& context_mask,
                 double base_lr, double context_lr) {
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const double lr = context_mask[i] ? context_lr : base_lr;
    if (lr == 0.0) grads[i] = 0.0f;
  }
}

void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw TrainingError("non-finite loss at step " + std::to_string(step));
  }
}

std::size_t loss_targets(const tokens::InterleavedSequence& seq) {
  std::size_t n = 0;
  for (std::size_t i = seq.steps.lanes(); i < seq.loss_mask.size(); ++i) n += seq.loss_mask[i];
  return n;
}

// One optimizer step on a batch. Returns the token-weighted mean loss.
StepLog train_step(model::ModelParams<float>& params, Adam& adam,
                   const std::vector<tokens::InterleavedSequence>& batch,
                   const std::vector<std::uint8_t>& context_mask, double base_lr,
                   double context_lr, std::size_t step) {
  std::size_t total = 0;
  for (const auto& seq : batch) total += loss_targets(seq);
  if (total == 0) throw TrainingError("batch has no loss targets");
  std::vector<float> grads(params.values.size(), 0.0f);
  double loss_sum = 0.0;
  for (const auto& seq : batch) {
    if (loss_targets(seq) == 0) continue;
    loss_sum += model::accumulate_gradients(params, seq, 1.0 / static_cast<double>(total), grads).sum;
  }
  StepLog log;
  log.step = step;
  log.loss = loss_sum / static_cast<double>(total);
  check_finite(log.loss, step);
  mask_frozen(grads, context_mask, base_lr, context_lr);
  log.grad_norm = adam.clip(grads);
  log.clipped_norm = global_norm(grads);
  log.base_lr = base_lr;
  log.context_lr = context_lr;
  adam.update(params.values, grads, context_mask, base_lr, context_lr);
  return log;
}

}  // namespace

std::vector<Song> synth_dataset(std::size_t count, double duration_s, std::uint64_t seed,
                                double tempo_min, double tempo_max, int sample_rate) {
  require_ordered(tempo_min, tempo_max, "tempo");
  Rng rng(seed);
  std::vector<Song> songs;
  songs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Song song;
    char name[32];
    std::snprintf(name, sizeof(name), "song_%04zu", i);
    song.name = name;
    song.spec.tempo_bpm = uniform(rng, tempo_min, tempo_max);
    song.spec.key_root = static_cast<int>(uniform_index(rng, 12));
    song.spec.duration_s = duration_s;
    song.spec.sample_rate = sample_rate;
    for (StemRole role : signal::kAllRoles) song.spec.stem_seeds[role] = rng();
    song.spec.validate(tempo_min, tempo_max);
    song.stems = signal::synth_song(song.spec);
    songs.push_back(std::move(song));
  }
  return songs;
}

void PairSamplerConfig::validate() const {
  require_probability(p_metronome, "p_metronome");
  require_probability(p_augment, "p_augment");
  require_ordered(context_min_s, context_max_s, "context length");
  require_ordered(speed_min, speed_max, "speed");
  require_ordered(pitch_min, pitch_max, "pitch");
  if (!(context_min_s > 0.0)) throw InvalidArgument("context length must be positive");
  if (!(target_len_s > 0.0)) throw InvalidArgument("target length must be positive");
  if (context_max_s > target_len_s) throw InvalidArgument("context may not exceed the target length");
  if (speed_min < 0.5 || speed_max > 2.0) throw InvalidArgument("speed range must lie in [0.5, 2]");
  if (pitch_min < -12.0 || pitch_max > 12.0) throw InvalidArgument("pitch range must lie in [-12, 12]");
}

PairPlan plan_pair(const PairSamplerConfig& cfg, Rng& rng) {
  PairPlan plan;
  plan.context_len_s = uniform(rng, cfg.context_min_s, cfg.context_max_s);
  plan.metronome = bernoulli(rng, cfg.p_metronome);
  plan.subset_draw = rng();
  plan.augment = bernoulli(rng, cfg.p_augment);
  plan.speed = uniform(rng, cfg.speed_min, cfg.speed_max);
  plan.semitones = uniform(rng, cfg.pitch_min, cfg.pitch_max);
  plan.offset_draw = uniform(rng, 0.0, 1.0);
  return plan;
}

namespace {

// Random start that keeps the longer crop inside the song.
double crop_start(const signal::SongSpec& spec, const PairSamplerConfig& cfg, const PairPlan& plan) {
  if (!cfg.random_offset) return 0.0;
  const double room = spec.duration_s - std::max(cfg.target_len_s, plan.context_len_s);
  return room > 0.0 ? plan.offset_draw * room : 0.0;
}

}  // namespace

ContextPair realize_pair(const std::map<StemRole, Waveform>& song, const signal::SongSpec& spec,
                         const PairSamplerConfig& cfg, const PairPlan& plan) {
  const auto target_it = song.find(cfg.target_instrument);
  if (target_it == song.end()) {
    throw InvalidArgument("song has no " + std::string(signal::to_string(cfg.target_instrument)) +
                          " stem");
  }
  ContextPair pair;
  pair.plan = plan;
  pair.start_s = crop_start(spec, cfg, plan);
  const double start = pair.start_s;
  pair.target = signal::crop(target_it->second, start, cfg.target_len_s);
  if (plan.metronome) {
    // The pulse track runs from the song start, so it keeps the song's phase.
    pair.context = start > 0.0
                       ? signal::crop(signal::synth_metronome(spec.tempo_bpm, start + plan.context_len_s,
                                                              spec.sample_rate),
                                      start, plan.context_len_s)
                       : signal::synth_metronome(spec.tempo_bpm, plan.context_len_s, spec.sample_rate);
  } else {
    std::vector<const Waveform*> others;
    for (const auto& [role, stem] : song) {
      if (role != cfg.target_instrument) others.push_back(&stem);
    }
    if (others.empty()) throw InvalidArgument("song has no stems besides the target");
    const std::uint64_t subsets = (std::uint64_t{1} << others.size()) - 1;
    const std::uint64_t mask = 1 + plan.subset_draw % subsets;
    std::vector<Waveform> chosen;
    for (std::size_t i = 0; i < others.size(); ++i) {
      if (mask & (std::uint64_t{1} << i)) chosen.push_back(*others[i]);
    }
    pair.context = signal::crop(signal::mix(chosen), start, plan.context_len_s);
  }
  if (plan.augment) {
    pair.context = signal::pitch_transpose(signal::speed_transpose(pair.context, plan.speed),
                                           plan.semitones);
    pair.target = signal::pitch_transpose(signal::speed_transpose(pair.target, plan.speed),
                                          plan.semitones);
  }
  return pair;
}

ContextPair make_pair(const std::map<StemRole, Waveform>& song, const signal::SongSpec& spec,
                      const PairSamplerConfig& cfg, Rng& rng) {
  return realize_pair(song, spec, cfg, plan_pair(cfg, rng));
}

tokens::InterleavedSequence encode_pair(const codec::CodecModel& codec, const ContextPair& pair,
                                        const model::ModelConfig& config) {
  const auto vocab = config.vocabulary();
  const std::size_t lanes = config.num_codebooks;
  const std::size_t limit = config.max_seq_len;
  codec::TokenGrid context = pair.context.size() >= codec.frame_size
                                 ? codec::encode(codec, pair.context)
                                 : codec::TokenGrid(0, lanes);
  codec::TokenGrid target = codec::encode(codec, pair.target);
  if (limit < 2 * lanes) throw InvalidArgument("max_seq_len too small for a pair");
  // Keep room for the prefix plus at least one delayed target frame.
  if (context.num_frames() + 2 * lanes > limit) context = context.truncated(limit - 2 * lanes);
  const std::size_t prefix = context.num_frames() ? context.num_frames() + lanes : 1;
  const std::size_t max_target = limit - prefix - lanes + 1;
  if (target.num_frames() > max_target) target = target.truncated(max_target);
  return tokens::build_training_sequence(context, target, vocab);
}

void FinetuneSchedule::validate() const {
  if (phase1_steps == 0 || phase2_steps == 0 || batch_size == 0 || ramp_steps == 0) {
    throw InvalidArgument("schedule step counts must be positive");
  }
  if (!(phase1_context_lr > 0.0 && base_lr_peak > 0.0 && context_lr_final > 0.0)) {
    throw InvalidArgument("schedule learning rates must be positive");
  }
  if (ramp_steps > phase2_steps) throw InvalidArgument("ramp_steps exceeds phase2_steps");
}

double lr_at(std::size_t step, const FinetuneSchedule& schedule, ParamGroup group) {
  if (step < schedule.phase1_steps) {
    return group == ParamGroup::Base ? 0.0 : schedule.phase1_context_lr;
  }
  const std::size_t s = step - schedule.phase1_steps;
  if (group == ParamGroup::Base) {
    return linear_ramp(0.0, schedule.base_lr_peak, s, schedule.ramp_steps);
  }
  return linear_ramp(schedule.phase1_context_lr, schedule.context_lr_final, s,
                     schedule.ramp_steps);
}

Adam::Adam(std::size_t size, AdamConfig config)
    : config_(config), m_(size, 0.0f), v_(size, 0.0f) {}

double global_norm(const std::vector<float>& grads) {
  double sum = 0.0;
  for (float g : grads) sum += static_cast<double>(g) * g;
  return std::sqrt(sum);
}

double Adam::clip(std::vector<float>& grads) const {
  const double norm = global_norm(grads);
  if (norm > config_.clip_norm) {
    double scale = config_.clip_norm / norm;
    for (float& g : grads) g = static_cast<float>(g * scale);
    // Float rounding can leave the norm a hair above the limit.
    for (double n = global_norm(grads); n > config_.clip_norm; n = global_norm(grads)) {
      scale = (config_.clip_norm / n) * (1.0 - 1e-7);
      for (float& g : grads) g = static_cast<float>(g * scale);
    }
  }
  return norm;
}

void Adam::update(std::vector<float>& params, const std::vector<float>& grads,
                  const std::vector<std::uint8_t>& context_mask, double base_lr,
                  double context_lr) {
  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double lr = context_mask[i] ? context_lr : base_lr;
    if (lr == 0.0) continue;
    const double g = grads[i];
    const double m = b1 * m_[i] + (1.0 - b1) * g;
    const double v = b2 * v_[i] + (1.0 - b2) * g * g;
    m_[i] = static_cast<float>(m);
    v_[i] = static_cast<float>(v);
    const double step = lr * (m / c1) / (std::sqrt(v / c2) + config_.eps);
    params[i] = static_cast<float>(params[i] - step);
  }
}

TrainResult pretrain(const std::vector<Song>& data, const codec::CodecModel& codec,
                     const model::ModelConfig& config, const PretrainConfig& options,
                     const Progress& progress) {
  if (data.empty()) throw InvalidArgument("pretraining dataset is empty");
  config.validate();
  if (config.num_codebooks != codec.num_codebooks || config.audio_vocab != codec.codebook_size) {
    throw InvalidArgument("model vocabulary does not match the codec");
  }
  const auto vocab = config.vocabulary();
  const std::size_t lanes = config.num_codebooks;

  std::vector<codec::TokenGrid> grids;
  for (const auto& song : data) {
    std::vector<Waveform> stems;
    for (const auto& [role, stem] : song.stems) stems.push_back(stem);
    grids.push_back(codec::encode(codec, signal::mix(stems)));
  }
  std::size_t crop = static_cast<std::size_t>(std::llround(options.crop_s * codec.frame_rate()));
  crop = std::clamp<std::size_t>(crop, 2, config.max_seq_len - lanes + 1);

  TrainResult result;
  result.params = model::init_model<float>(config, options.seed);
  const auto context_mask = result.params.layout.context_row_mask();
  Adam adam(result.params.values.size());
  Rng rng(options.seed ^ 0x7072657472ULL);
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<tokens::InterleavedSequence> batch;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      const auto& grid = grids[uniform_index(rng, grids.size())];
      const std::size_t frames = std::min(crop, grid.num_frames());
      const std::size_t start = uniform_index(rng, grid.num_frames() - frames + 1);
      std::vector<std::int32_t> ids(grid.ids().begin() + static_cast<std::ptrdiff_t>(start * lanes),
                                    grid.ids().begin() +
                                        static_cast<std::ptrdiff_t>((start + frames) * lanes));
      batch.push_back(tokens::build_plain_sequence(codec::TokenGrid(lanes, std::move(ids)), vocab));
    }
    auto log = train_step(result.params, adam, batch, context_mask, options.lr, options.lr, step);
    if (progress) progress(log);
    result.log.push_back(log);
  }
  return result;
}

TrainResult finetune(model::ModelParams<float> params, const std::vector<Song>& data,
                     const codec::CodecModel& codec, const PairSamplerConfig& sampler,
                     const FinetuneSchedule& schedule, std::uint64_t seed,
                     const Progress& progress, const EventSink& events) {
  if (data.empty()) throw InvalidArgument("fine-tuning dataset is empty");
  sampler.validate();
  schedule.validate();
  const auto& config = params.config;
  if (config.num_codebooks != codec.num_codebooks || config.audio_vocab != codec.codebook_size) {
    throw InvalidArgument("model vocabulary does not match the codec");
  }
  TrainResult result;
  result.params = std::move(params);
  const auto context_mask = result.params.layout.context_row_mask();
  Adam adam(result.params.values.size());
  Rng rng(seed ^ (sampler.seed * 0x9E3779B97F4A7C15ULL));
  auto emit = [&](const std::string& e) {
    result.events.push_back(e);
    if (events) events(e);
  };
  for (std::size_t step = 0; step < schedule.total_steps(); ++step) {
    if (step == schedule.phase1_steps) emit("phase1 complete at step " + std::to_string(step));
    std::vector<tokens::InterleavedSequence> batch;
    for (std::size_t b = 0; b < schedule.batch_size; ++b) {
      const auto& song = data[uniform_index(rng, data.size())];
      batch.push_back(encode_pair(codec, make_pair(song.stems, song.spec, sampler, rng), config));
    }
    const double base_lr = lr_at(step, schedule, ParamGroup::Base);
    const double context_lr = lr_at(step, schedule, ParamGroup::ContextRow);
    auto log = train_step(result.params, adam, batch, context_mask, base_lr, context_lr, step);
    if (progress) progress(log);
    result.log.push_back(log);
  }
  emit("phase2 complete at step " + std::to_string(schedule.total_steps()));
  return result;
}

TrainResult fit_sequences(model::ModelParams<float> params,
                          const std::vector<tokens::InterleavedSequence>& sequences,
                          std::size_t steps, double lr, double stop_below,
                          const Progress& progress) {
  if (sequences.empty()) throw InvalidArgument("no sequences to fit");
  TrainResult result;
  result.params = std::move(params);
  const auto context_mask = result.params.layout.context_row_mask();
  Adam adam(result.params.values.size());
  for (std::size_t step = 0; step < steps; ++step) {
    auto log = train_step(result.params, adam, sequences, context_mask, lr, lr, step);
    if (progress) progress(log);
    result.log.push_back(log);
    if (log.loss < stop_below) break;
  }
  return result;
}

}  // namespace stage::training
