#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stage/codec.hpp"
#include "stage/model.hpp"
#include "stage/rng.hpp"
#include "stage/signal.hpp"
#include "stage/tokens.hpp"

namespace stage::training {

struct Song {
  std::string name;
  signal::SongSpec spec;
  std::map<signal::StemRole, signal::Waveform> stems;
};

// N songs with tempos uniform in [tempo_min, tempo_max]; deterministic in seed.
std::vector<Song> synth_dataset(std::size_t count, double duration_s, std::uint64_t seed,
                                double tempo_min = 100.0, double tempo_max = 180.0,
                                int sample_rate = signal::kDefaultSampleRate);

struct PairSamplerConfig {
  signal::StemRole target_instrument = signal::StemRole::Drums;
  double p_metronome = 0.5;
  double context_min_s = 2.0;
  double context_max_s = 4.0;
  double target_len_s = 4.0;
  double p_augment = 0.5;
  double speed_min = 0.8;
  double speed_max = 1.2;
  double pitch_min = -4.0;
  double pitch_max = 4.0;
  // Start both crops at a random time instead of t = 0.
  bool random_offset = false;
  std::uint64_t seed = 0;

  void validate() const;
};

// The random decisions behind one <context, target> pair.
struct PairPlan {
  double context_len_s = 0.0;
  bool metronome = false;
  std::uint64_t subset_draw = 0;
  bool augment = false;
  double speed = 1.0;
  double semitones = 0.0;
  // Uniform in [0, 1); picks the crop start when random_offset is set.
  double offset_draw = 0.0;
};

struct ContextPair {
  signal::Waveform context;
  signal::Waveform target;
  PairPlan plan;
  double start_s = 0.0;
};

// Consumes exactly seven draws from rng.
PairPlan plan_pair(const PairSamplerConfig& cfg, Rng& rng);
ContextPair realize_pair(const std::map<signal::StemRole, signal::Waveform>& song,
                         const signal::SongSpec& spec, const PairSamplerConfig& cfg,
                         const PairPlan& plan);
ContextPair make_pair(const std::map<signal::StemRole, signal::Waveform>& song,
                      const signal::SongSpec& spec, const PairSamplerConfig& cfg, Rng& rng);

// Encodes both sides and assembles the training sequence, dropping trailing
// target frames (then context frames) if it would exceed max_seq_len.
tokens::InterleavedSequence encode_pair(const codec::CodecModel& codec, const ContextPair& pair,
                                        const model::ModelConfig& config);

struct FinetuneSchedule {
  std::size_t phase1_steps = 200;
  double phase1_context_lr = 1e-4;
  std::size_t phase2_steps = 800;
  double base_lr_peak = 1e-5;
  double context_lr_final = 1e-5;
  std::size_t ramp_steps = 100;
  std::size_t batch_size = 8;

  std::size_t total_steps() const { return phase1_steps + phase2_steps; }
  void validate() const;
};

enum class ParamGroup { Base, ContextRow };

double lr_at(std::size_t step, const FinetuneSchedule& schedule, ParamGroup group);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double clip_norm = 1.0;
};

class Adam {
 public:
  Adam(std::size_t size, AdamConfig config = {});

  // Scales grads so their global L2 norm is at most clip_norm. Returns the
  // norm before clipping.
  double clip(std::vector<float>& grads) const;
  // Elements whose group learning rate is zero are left untouched, moments
  // included.
  void update(std::vector<float>& params, const std::vector<float>& grads,
              const std::vector<std::uint8_t>& context_mask, double base_lr, double context_lr);
  std::size_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<float> m_, v_;
  std::size_t step_ = 0;
};

double global_norm(const std::vector<float>& grads);

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double clipped_norm = 0.0;
  double base_lr = 0.0;
  double context_lr = 0.0;
};

struct TrainResult {
  model::ModelParams<float> params;
  std::vector<StepLog> log;
  std::vector<std::string> events;
  double final_loss() const { return log.empty() ? 0.0 : log.back().loss; }
};

using Progress = std::function<void(const StepLog&)>;
using EventSink = std::function<void(const std::string&)>;

struct PretrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double crop_s = 4.0;
  std::uint64_t seed = 0;
};

// Autoregressive training on full-mixture token sequences (no prefix).
TrainResult pretrain(const std::vector<Song>& data, const codec::CodecModel& codec,
                     const model::ModelConfig& config, const PretrainConfig& options,
                     const Progress& progress = {});

// Phase 1 trains only the context rows, phase 2 everything, per lr_at.
TrainResult finetune(model::ModelParams<float> params, const std::vector<Song>& data,
                     const codec::CodecModel& codec, const PairSamplerConfig& sampler,
                     const FinetuneSchedule& schedule, std::uint64_t seed,
                     const Progress& progress = {}, const EventSink& events = {});

// Fine-tuning on a fixed list of sequences, full batch every step, constant
// learning rate for all parameters.
TrainResult fit_sequences(model::ModelParams<float> params,
                          const std::vector<tokens::InterleavedSequence>& sequences,
                          std::size_t steps, double lr, double stop_below = 0.0,
                          const Progress& progress = {});

}  // namespace stage::training
