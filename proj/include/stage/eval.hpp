#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stage/signal.hpp"

namespace stage::eval {

// Strictly increasing onset times in seconds, all >= 0.
using BeatList = std::vector<double>;
using Embedding = std::vector<double>;

inline constexpr double kBeatTolerance = 0.07;
inline constexpr std::size_t kMelBands = 40;
inline constexpr std::size_t kEmbeddingDim = 2 * kMelBands;

// Throws InvalidArgument unless times are finite, >= 0 and strictly increasing.
void validate_beats(const BeatList& beats);

// Energy-flux onset picking: RMS over 25 ms frames every 10 ms, half-wave
// rectified first difference, local maxima within +-50 ms that exceed
// mean + 1.5 std of the envelope.
BeatList detect_beats(const signal::Waveform& w);
// The onset envelope used by detect_beats, one value per hop.
std::vector<double> onset_envelope(const signal::Waveform& w);

struct BeatScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t matches = 0;
};

// Maximum one-to-one matching with |t_ref - t_est| <= tolerance_s.
BeatScore beat_f1(const BeatList& reference, const BeatList& estimate,
                  double tolerance_s = kBeatTolerance);

// Log mel filterbank statistics: 40 band means followed by 40 band stds.
Embedding embed_clip(const signal::Waveform& w);

// |mu_a - mu_b|^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}) for given moments.
double frechet_distance(const std::vector<double>& mu_a, const std::vector<std::vector<double>>& cov_a,
                        const std::vector<double>& mu_b, const std::vector<std::vector<double>>& cov_b);
// Frechet distance between Gaussian fits of two embedding sets.
double fad(const std::vector<Embedding>& set_a, const std::vector<Embedding>& set_b);
// Unbiased squared MMD with kernel (x.y/d + 1)^3.
double kad(const std::vector<Embedding>& set_a, const std::vector<Embedding>& set_b);

struct EvalConfig {
  double tolerance_s = kBeatTolerance;
  double normalize_peak = 0.9;
  int sample_rate = signal::kDefaultSampleRate;

  void validate() const;
};

// Where beat references and reference audio come from. Either or both may be
// given; BPM entries take precedence over beats detected in reference audio.
struct EvalReference {
  std::optional<std::filesystem::path> reference_dir;
  std::map<std::string, double> bpm;  // clip file name -> tempo
};

// Reads {"clip.wav": bpm, ...}.
std::map<std::string, double> load_bpm_file(const std::filesystem::path& path);

struct ClipScore {
  std::string name;
  std::optional<BeatScore> beats;
};

struct EvalReport {
  std::vector<ClipScore> clips;
  std::optional<double> mean_f1;
  std::optional<double> fad;
  std::optional<double> kad;
  std::size_t generated_count = 0;
  std::size_t reference_count = 0;
  std::size_t scored_count = 0;
  nlohmann::ordered_json config;

  nlohmann::ordered_json to_json() const;
};

// Sorted *.wav file names in a directory; throws InvalidArgument if none.
std::vector<std::filesystem::path> list_clips(const std::filesystem::path& dir);

EvalReport evaluate_run(const std::filesystem::path& generated_dir, const EvalReference& reference,
                        const EvalConfig& config = {});

}  // namespace stage::eval
