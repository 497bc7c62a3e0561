#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "stage/codec.hpp"
#include "stage/eval.hpp"
#include "stage/model.hpp"
#include "stage/training.hpp"

namespace stage {

struct DatasetConfig {
  std::size_t songs = 64;
  double duration_s = 8.0;
  double tempo_min = 100.0;
  double tempo_max = 180.0;
  int sample_rate = signal::kDefaultSampleRate;
};

struct PathsConfig {
  std::string dataset;
  std::string codec;
  std::string model;
};

// Every tunable of every command. Serialized as one flat JSON object with
// dotted keys ("model.d_model", "schedule.phase1_steps", ...).
struct RunConfig {
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  codec::TrainOptions codec;
  model::ModelConfig model;
  training::PretrainConfig pretrain;
  training::PairSamplerConfig sampler;
  training::FinetuneSchedule schedule;
  model::SamplingConfig sampling;
  eval::EvalConfig eval;
  PathsConfig paths;

  // Fixed key order; dump(load(dump(c))) == dump(c) byte for byte.
  nlohmann::ordered_json to_json() const;
  std::string dump() const;
  // Starts from `base` and applies the keys present; unknown keys and type
  // mismatches throw FormatError.
  static RunConfig from_json(const nlohmann::json& doc, const RunConfig& base);
  static RunConfig from_json(const nlohmann::json& doc);
  static RunConfig load(const std::filesystem::path& path, const RunConfig& base);
  static RunConfig load(const std::filesystem::path& path);
  // Applies one "key=value" style override, parsing value as JSON when possible.
  void set(const std::string& key, const std::string& value);
  void validate() const;
};

// Default seed: STAGE_SEED when set and numeric, else 0.
std::uint64_t default_seed();

}  // namespace stage
