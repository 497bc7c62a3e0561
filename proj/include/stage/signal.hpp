#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stage::signal {

inline constexpr int kDefaultSampleRate = 8000;

// Mono audio. Samples are nominally in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = kDefaultSampleRate;

  Waveform() = default;
  Waveform(std::vector<double> s, int rate);

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  double duration_seconds() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
  double peak() const;

  static Waveform silence(std::size_t length, int rate);
};

enum class StemRole { Drums, Bass, Chords };

inline constexpr StemRole kAllRoles[] = {StemRole::Drums, StemRole::Bass,
                                         StemRole::Chords};

std::string_view to_string(StemRole role);
// Accepts "drums", "bass", "chords"; throws InvalidArgument otherwise.
StemRole parse_stem_role(std::string_view name);

struct SongSpec {
  double tempo_bpm = 120.0;
  int key_root = 0;
  double duration_s = 4.0;
  std::map<StemRole, std::uint64_t> stem_seeds;
  int sample_rate = kDefaultSampleRate;

  void validate(double tempo_min = 100.0, double tempo_max = 180.0) const;
};

// Beat grid t = n * 60 / bpm for every t < duration_s.
std::vector<double> beat_times(double bpm, double duration_s);

// Click track: a 10 ms decaying tone burst (peak 1.0) on every beat.
Waveform synth_metronome(double bpm, double duration_s, int sample_rate);

// Deterministic, tempo-locked drums, bass, and chord stems.
std::map<StemRole, Waveform> synth_song(const SongSpec& spec);

// Sample-wise sum, scaled by 1/peak when the sum clips.
Waveform mix(std::span<const Waveform> stems);

// Overlay of mixture and beat track; the shorter input is zero-padded.
Waveform combine_context(const Waveform& mixture, const Waveform& metronome);

// Zero-pads (or truncates) to exactly `length` samples.
Waveform pad_to(const Waveform& w, std::size_t length);
Waveform crop(const Waveform& w, double start_s, double length_s);
// Scales so that peak == target (no-op for silence).
Waveform normalize_peak(const Waveform& w, double target);

// Linear-interpolation resampling that plays `factor` times faster.
Waveform speed_transpose(const Waveform& w, double factor);
// Changes the sample rate, keeping duration.
Waveform resample(const Waveform& w, int new_rate);
// Pitch shift by 2^(semitones/12) with duration preserved.
Waveform pitch_transpose(const Waveform& w, double semitones);
// Waveform-similarity overlap-add time stretch; output is `ratio` times longer.
Waveform time_stretch(const Waveform& w, double ratio);

// 16-bit PCM mono RIFF/WAVE.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);
// read_wav followed by resampling to `sample_rate` when the file differs.
Waveform load_wav(const std::filesystem::path& path, int sample_rate);

}  // namespace stage::signal
