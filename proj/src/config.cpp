#include "stage/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <type_traits>
#include <vector>

#include "stage/error.hpp"

namespace stage {
namespace {

using Json = nlohmann::json;

struct Field {
  std::string key;
  std::function<nlohmann::ordered_json(const RunConfig&)> get;
  std::function<void(RunConfig&, const Json&)> set;
};

[[noreturn]] void type_error(const std::string& key, const char* expected) {
  throw FormatError("config key " + key + ": expected " + expected);
}

template <typename T>
T read_value(const std::string& key, const Json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) type_error(key, "a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) type_error(key, "an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_unsigned()) {
        const auto u = v.get<std::uint64_t>();
        if (u > std::numeric_limits<T>::max()) type_error(key, "a smaller integer");
        return static_cast<T>(u);
      }
      if (v.get<std::int64_t>() < 0) type_error(key, "a non-negative integer");
    }
    const auto i = v.get<std::int64_t>();
    if (i < static_cast<std::int64_t>(std::numeric_limits<T>::min()) ||
        static_cast<std::uint64_t>(i) > static_cast<std::uint64_t>(std::numeric_limits<T>::max())) {
      type_error(key, "an integer in range");
    }
    return static_cast<T>(i);
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) type_error(key, "a number");
    return v.get<T>();
  } else {
    if (!v.is_string()) type_error(key, "a string");
    return v.get<std::string>();
  }
}

// A field reached through a member-pointer chain.
template <typename Group, typename T>
Field field(std::string key, Group RunConfig::*group, T Group::*member) {
  return Field{key,
               [group, member](const RunConfig& c) { return nlohmann::ordered_json(c.*group.*member); },
               [key, group, member](RunConfig& c, const Json& v) {
                 c.*group.*member = read_value<T>(key, v);
               }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"seed", [](const RunConfig& c) { return nlohmann::ordered_json(c.seed); },
                 [](RunConfig& c, const Json& v) { c.seed = read_value<std::uint64_t>("seed", v); }});
    f.push_back(field("dataset.songs", &RunConfig::dataset, &DatasetConfig::songs));
    f.push_back(field("dataset.duration_s", &RunConfig::dataset, &DatasetConfig::duration_s));
    f.push_back(field("dataset.tempo_min", &RunConfig::dataset, &DatasetConfig::tempo_min));
    f.push_back(field("dataset.tempo_max", &RunConfig::dataset, &DatasetConfig::tempo_max));
    f.push_back(field("dataset.sample_rate", &RunConfig::dataset, &DatasetConfig::sample_rate));
    f.push_back(field("codec.num_codebooks", &RunConfig::codec, &codec::TrainOptions::num_codebooks));
    f.push_back(field("codec.codebook_size", &RunConfig::codec, &codec::TrainOptions::codebook_size));
    f.push_back(field("codec.frame_size", &RunConfig::codec, &codec::TrainOptions::frame_size));
    f.push_back(field("codec.iters", &RunConfig::codec, &codec::TrainOptions::iters));
    f.push_back(field("codec.max_frames", &RunConfig::codec, &codec::TrainOptions::max_frames));
    f.push_back(field("model.d_model", &RunConfig::model, &model::ModelConfig::d_model));
    f.push_back(field("model.n_layers", &RunConfig::model, &model::ModelConfig::n_layers));
    f.push_back(field("model.n_heads", &RunConfig::model, &model::ModelConfig::n_heads));
    f.push_back(field("model.d_ff", &RunConfig::model, &model::ModelConfig::d_ff));
    f.push_back(field("model.max_seq_len", &RunConfig::model, &model::ModelConfig::max_seq_len));
    f.push_back({"model.position_mode",
                 [](const RunConfig& c) { return nlohmann::ordered_json(model::to_string(c.model.position_mode)); },
                 [](RunConfig& c, const Json& v) {
                   c.model.position_mode =
                       model::parse_position_mode(read_value<std::string>("model.position_mode", v));
                 }});
    f.push_back(field("pretrain.steps", &RunConfig::pretrain, &training::PretrainConfig::steps));
    f.push_back(field("pretrain.batch_size", &RunConfig::pretrain, &training::PretrainConfig::batch_size));
    f.push_back(field("pretrain.lr", &RunConfig::pretrain, &training::PretrainConfig::lr));
    f.push_back(field("pretrain.crop_s", &RunConfig::pretrain, &training::PretrainConfig::crop_s));
    f.push_back({"sampler.target_instrument",
                 [](const RunConfig& c) {
                   return nlohmann::ordered_json(std::string(signal::to_string(c.sampler.target_instrument)));
                 },
                 [](RunConfig& c, const Json& v) {
                   c.sampler.target_instrument =
                       signal::parse_stem_role(read_value<std::string>("sampler.target_instrument", v));
                 }});
    using PS = training::PairSamplerConfig;
    f.push_back(field("sampler.p_metronome", &RunConfig::sampler, &PS::p_metronome));
    f.push_back(field("sampler.context_min_s", &RunConfig::sampler, &PS::context_min_s));
    f.push_back(field("sampler.context_max_s", &RunConfig::sampler, &PS::context_max_s));
    f.push_back(field("sampler.target_len_s", &RunConfig::sampler, &PS::target_len_s));
    f.push_back(field("sampler.p_augment", &RunConfig::sampler, &PS::p_augment));
    f.push_back(field("sampler.speed_min", &RunConfig::sampler, &PS::speed_min));
    f.push_back(field("sampler.speed_max", &RunConfig::sampler, &PS::speed_max));
    f.push_back(field("sampler.pitch_min", &RunConfig::sampler, &PS::pitch_min));
    f.push_back(field("sampler.pitch_max", &RunConfig::sampler, &PS::pitch_max));
    f.push_back(field("sampler.random_offset", &RunConfig::sampler, &PS::random_offset));
    using FS = training::FinetuneSchedule;
    f.push_back(field("schedule.phase1_steps", &RunConfig::schedule, &FS::phase1_steps));
    f.push_back(field("schedule.phase1_context_lr", &RunConfig::schedule, &FS::phase1_context_lr));
    f.push_back(field("schedule.phase2_steps", &RunConfig::schedule, &FS::phase2_steps));
    f.push_back(field("schedule.base_lr_peak", &RunConfig::schedule, &FS::base_lr_peak));
    f.push_back(field("schedule.context_lr_final", &RunConfig::schedule, &FS::context_lr_final));
    f.push_back(field("schedule.ramp_steps", &RunConfig::schedule, &FS::ramp_steps));
    f.push_back(field("schedule.batch_size", &RunConfig::schedule, &FS::batch_size));
    f.push_back(field("sampling.temperature", &RunConfig::sampling, &model::SamplingConfig::temperature));
    f.push_back(field("sampling.top_k", &RunConfig::sampling, &model::SamplingConfig::top_k));
    f.push_back(field("eval.tolerance_s", &RunConfig::eval, &eval::EvalConfig::tolerance_s));
    f.push_back(field("eval.normalize_peak", &RunConfig::eval, &eval::EvalConfig::normalize_peak));
    f.push_back(field("eval.sample_rate", &RunConfig::eval, &eval::EvalConfig::sample_rate));
    f.push_back(field("paths.dataset", &RunConfig::paths, &PathsConfig::dataset));
    f.push_back(field("paths.codec", &RunConfig::paths, &PathsConfig::codec));
    f.push_back(field("paths.model", &RunConfig::paths, &PathsConfig::model));
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

}  // namespace

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

std::string RunConfig::dump() const { return to_json().dump(2) + "\n"; }

RunConfig RunConfig::from_json(const nlohmann::json& doc, const RunConfig& base) {
  if (!doc.is_object()) throw FormatError("config must be a JSON object");
  RunConfig c = base;
  for (const auto& [key, value] : doc.items()) {
    const Field* f = find_field(key);
    if (!f) throw FormatError("unknown config key: " + key);
    f->set(c, value);
  }
  // The model vocabulary follows the codec it is trained on.
  c.model.num_codebooks = c.codec.num_codebooks;
  c.model.audio_vocab = c.codec.codebook_size;
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open config");
  try {
    return from_json(nlohmann::json::parse(in), base);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

RunConfig RunConfig::from_json(const nlohmann::json& doc) { return from_json(doc, RunConfig{}); }

RunConfig RunConfig::load(const std::filesystem::path& path) { return load(path, RunConfig{}); }

void RunConfig::set(const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw FormatError("unknown config key: " + key);
  Json v = Json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  f->set(*this, v);
  model.num_codebooks = codec.num_codebooks;
  model.audio_vocab = codec.codebook_size;
}

void RunConfig::validate() const {
  if (dataset.songs == 0) throw InvalidArgument("dataset.songs must be positive");
  if (!(dataset.duration_s > 0.0)) throw InvalidArgument("dataset.duration_s must be positive");
  if (!(dataset.tempo_min <= dataset.tempo_max)) throw InvalidArgument("dataset tempo range is not ordered");
  if (codec.num_codebooks == 0 || codec.codebook_size < 2 || codec.frame_size == 0 || codec.iters < 0) {
    throw InvalidArgument("invalid codec options");
  }
  model.validate();
  if (pretrain.steps == 0 || pretrain.batch_size == 0 || !(pretrain.lr > 0.0) || !(pretrain.crop_s > 0.0)) {
    throw InvalidArgument("invalid pretraining options");
  }
  sampler.validate();
  schedule.validate();
  // top_k <= V is checked against the actual checkpoint at generation time.
  if (sampling.top_k == 0 || !(sampling.temperature > 0.0)) throw InvalidArgument("invalid sampling options");
  eval.validate();
}

std::uint64_t default_seed() {
  const char* env = std::getenv("STAGE_SEED");
  if (!env || !*env) return 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw InvalidArgument("STAGE_SEED must be a non-negative integer");
  return v;
}

}  // namespace stage
