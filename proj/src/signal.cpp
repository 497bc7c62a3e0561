#include "stage/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "stage/error.hpp"
#include "stage/rng.hpp"

namespace stage::signal {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::size_t samples_for(double seconds, int rate) {
  return static_cast<std::size_t>(std::llround(seconds * rate));
}

void check_rate(int rate) {
  if (rate <= 0) throw InvalidArgument("sample rate must be positive");
}

double midi_to_hz(double midi) {
  return 440.0 * std::pow(2.0, (midi - 69.0) / 12.0);
}

// Adds `event` into `out` starting at sample `at`, truncating at the end.
void add_at(std::vector<double>& out, const std::vector<double>& event,
            std::size_t at, double gain = 1.0) {
  for (std::size_t i = 0; i < event.size() && at + i < out.size(); ++i) {
    out[at + i] += gain * event[i];
  }
}

std::vector<double> noise_burst(Rng& rng, std::size_t length,
                                double decay_samples) {
  std::vector<double> burst(length);
  for (std::size_t i = 0; i < length; ++i) {
    burst[i] = (2.0 * uniform01(rng) - 1.0) *
               std::exp(-static_cast<double>(i) / decay_samples);
  }
  return burst;
}

void scale_to_peak(std::vector<double>& v, double target) {
  double peak = 0.0;
  for (double x : v) peak = std::max(peak, std::abs(x));
  if (peak > 0.0) {
    for (double& x : v) x *= target / peak;
  }
}

void clamp_unit(std::vector<double>& v) {
  for (double& x : v) x = std::clamp(x, -1.0, 1.0);
}

// A decaying 500 Hz tone burst. A smooth tone keeps the click similar to itself
// under small shifts, so a frame codec needs few codewords for every phase.
std::vector<double> click_sound(int rate) {
  std::vector<double> click(std::max<std::size_t>(1, samples_for(0.010, rate)));
  for (std::size_t i = 0; i < click.size(); ++i) {
    const double t = static_cast<double>(i) / rate;
    click[i] = std::cos(kTwoPi * 500.0 * t) * std::exp(-t / 0.003);
  }
  scale_to_peak(click, 1.0);
  return click;
}

std::vector<double> kick_sound(Rng& rng, int rate) {
  const double f_start = uniform(rng, 100.0, 140.0);
  const double f_end = uniform(rng, 45.0, 55.0);
  const std::size_t n = samples_for(0.15, rate);
  std::vector<double> kick(n);
  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate;
    const double f = f_end + (f_start - f_end) * std::exp(-t / 0.03);
    phase += kTwoPi * f / rate;
    kick[i] = std::sin(phase) * std::exp(-t / 0.05);
  }
  const auto transient = noise_burst(rng, samples_for(0.004, rate), 0.001 * rate);
  add_at(kick, transient, 0, 0.5);
  scale_to_peak(kick, 0.9);
  return kick;
}

std::vector<double> snare_sound(Rng& rng, int rate) {
  const std::size_t n = samples_for(0.12, rate);
  auto snare = noise_burst(rng, n, 0.03 * rate);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate;
    snare[i] += 0.5 * std::sin(kTwoPi * 190.0 * t) * std::exp(-t / 0.04);
  }
  scale_to_peak(snare, 0.8);
  return snare;
}

std::vector<double> hat_sound(Rng& rng, int rate, double amplitude) {
  auto hat = noise_burst(rng, samples_for(0.02, rate), 0.004 * rate);
  // First difference pushes the energy up the spectrum.
  for (std::size_t i = hat.size(); i-- > 1;) hat[i] -= hat[i - 1];
  scale_to_peak(hat, amplitude);
  return hat;
}

Waveform synth_drums(const SongSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const int rate = spec.sample_rate;
  std::vector<double> out(samples_for(spec.duration_s, rate), 0.0);
  const auto kick = kick_sound(rng, rate);
  const auto snare = snare_sound(rng, rate);
  const double hat_amp = uniform(rng, 0.06, 0.12);
  const auto hat = hat_sound(rng, rate, hat_amp);
  const int division = bernoulli(rng, 0.5) ? 2 : 4;
  const bool backbeat_snare = bernoulli(rng, 0.75);

  const double beat = 60.0 / spec.tempo_bpm;
  const auto beats = beat_times(spec.tempo_bpm, spec.duration_s);
  for (std::size_t n = 0; n < beats.size(); ++n) {
    const std::size_t at = samples_for(beats[n], rate);
    const bool snare_here = backbeat_snare && (n % 2 == 1);
    add_at(out, snare_here ? snare : kick, at);
    for (int s = 1; s < division; ++s) {
      const double t = beats[n] + beat * s / division;
      if (t < spec.duration_s) add_at(out, hat, samples_for(t, rate));
    }
  }
  clamp_unit(out);
  return Waveform(std::move(out), rate);
}

Waveform synth_bass(const SongSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const int rate = spec.sample_rate;
  std::vector<double> out(samples_for(spec.duration_s, rate), 0.0);
  const double beat = 60.0 / spec.tempo_bpm;
  const std::size_t note_len = samples_for(0.9 * beat, rate);
  const std::size_t release = samples_for(0.01, rate);
  const double root_midi = 36.0 + spec.key_root;
  constexpr int kIntervals[] = {0, 0, 7, 12};

  for (double t0 : beat_times(spec.tempo_bpm, spec.duration_s)) {
    const int interval = kIntervals[uniform_index(rng, 4)];
    const double f = midi_to_hz(root_midi + interval);
    std::vector<double> note(note_len);
    for (std::size_t i = 0; i < note_len; ++i) {
      const double t = static_cast<double>(i) / rate;
      double env = std::min(1.0, t / 0.005) * std::exp(-t / 0.25);
      if (i + release > note_len) {
        env *= static_cast<double>(note_len - i) / static_cast<double>(release);
      }
      const double ph = kTwoPi * f * t;
      note[i] = env * (std::sin(ph) + 0.5 * std::sin(2 * ph) +
                       0.25 * std::sin(3 * ph));
    }
    add_at(out, note, samples_for(t0, rate), 0.45 / 1.75);
  }
  clamp_unit(out);
  return Waveform(std::move(out), rate);
}

Waveform synth_chords(const SongSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const int rate = spec.sample_rate;
  std::vector<double> out(samples_for(spec.duration_s, rate), 0.0);
  const double bar = 4.0 * 60.0 / spec.tempo_bpm;
  constexpr int kDegrees[] = {0, 5, 7, 9};
  const std::size_t fade = samples_for(0.03, rate);

  for (double start = 0.0; start < spec.duration_s; start += bar) {
    const int degree = start == 0.0 ? 0 : kDegrees[uniform_index(rng, 4)];
    const bool minor = degree == 9;
    const int third = minor ? 3 : 4;
    double base = 60.0 + ((spec.key_root + degree) % 12);
    const std::size_t begin = samples_for(start, rate);
    const std::size_t end =
        std::min(out.size(), samples_for(start + bar, rate));
    for (int interval : {0, third, 7}) {
      const double f = midi_to_hz(base + interval);
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t k = i - begin;
        double env = 1.0;
        if (k < fade) env = static_cast<double>(k) / fade;
        if (end - i < fade) env = std::min(env, static_cast<double>(end - i) / fade);
        const double t = static_cast<double>(k) / rate;
        out[i] += 0.12 * env *
                  (std::sin(kTwoPi * f * t) + 0.3 * std::sin(kTwoPi * 2 * f * t));
      }
    }
  }
  clamp_unit(out);
  return Waveform(std::move(out), rate);
}

double interpolate(const std::vector<double>& x, double pos) {
  if (pos <= 0.0) return x.empty() ? 0.0 : x.front();
  const auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= x.size()) return x.empty() ? 0.0 : x.back();
  const double frac = pos - static_cast<double>(i);
  return x[i] + frac * (x[i + 1] - x[i]);
}

}  // namespace

Waveform::Waveform(std::vector<double> s, int rate)
    : samples(std::move(s)), sample_rate(rate) {
  check_rate(rate);
}

double Waveform::peak() const {
  double p = 0.0;
  for (double x : samples) p = std::max(p, std::abs(x));
  return p;
}

Waveform Waveform::silence(std::size_t length, int rate) {
  return Waveform(std::vector<double>(length, 0.0), rate);
}

std::string_view to_string(StemRole role) {
  switch (role) {
    case StemRole::Drums:
      return "drums";
    case StemRole::Bass:
      return "bass";
    case StemRole::Chords:
      return "chords";
  }
  return "unknown";
}

StemRole parse_stem_role(std::string_view name) {
  for (StemRole r : kAllRoles) {
    if (to_string(r) == name) return r;
  }
  throw InvalidArgument("unknown stem role: " + std::string(name));
}

void SongSpec::validate(double tempo_min, double tempo_max) const {
  if (!(tempo_bpm >= tempo_min && tempo_bpm <= tempo_max)) {
    throw InvalidArgument("tempo out of range: " + std::to_string(tempo_bpm));
  }
  if (key_root < 0 || key_root > 11) throw InvalidArgument("key_root must be 0..11");
  if (!(duration_s > 0.0)) throw InvalidArgument("duration must be positive");
  check_rate(sample_rate);
}

std::vector<double> beat_times(double bpm, double duration_s) {
  if (!(bpm > 0.0) || !(duration_s > 0.0)) {
    throw InvalidArgument("bpm and duration must be positive");
  }
  std::vector<double> times;
  const double period = 60.0 / bpm;
  for (std::size_t n = 0;; ++n) {
    const double t = static_cast<double>(n) * period;
    if (t >= duration_s) break;
    times.push_back(t);
  }
  return times;
}

Waveform synth_metronome(double bpm, double duration_s, int sample_rate) {
  if (!(bpm > 0.0)) throw InvalidArgument("metronome bpm must be positive");
  if (!(duration_s > 0.0)) throw InvalidArgument("metronome duration must be positive");
  check_rate(sample_rate);
  std::vector<double> out(samples_for(duration_s, sample_rate), 0.0);
  const auto click = click_sound(sample_rate);
  for (double t : beat_times(bpm, duration_s)) {
    const std::size_t at = samples_for(t, sample_rate);
    if (at < out.size()) add_at(out, click, at);
  }
  return Waveform(std::move(out), sample_rate);
}

std::map<StemRole, Waveform> synth_song(const SongSpec& spec) {
  spec.validate(0.0 + 1e-9, 1e9);
  auto seed_of = [&](StemRole r) {
    auto it = spec.stem_seeds.find(r);
    return it == spec.stem_seeds.end() ? std::uint64_t{static_cast<unsigned>(r) + 1}
                                       : it->second;
  };
  std::map<StemRole, Waveform> stems;
  stems.emplace(StemRole::Drums, synth_drums(spec, seed_of(StemRole::Drums)));
  stems.emplace(StemRole::Bass, synth_bass(spec, seed_of(StemRole::Bass)));
  stems.emplace(StemRole::Chords, synth_chords(spec, seed_of(StemRole::Chords)));
  return stems;
}

Waveform mix(std::span<const Waveform> stems) {
  if (stems.empty()) throw InvalidArgument("mix needs at least one stem");
  const int rate = stems.front().sample_rate;
  const std::size_t length = stems.front().size();
  for (const auto& s : stems) {
    if (s.sample_rate != rate) throw InvalidArgument("mix: sample rates differ");
    if (s.size() != length) throw InvalidArgument("mix: lengths differ");
  }
  std::vector<double> out(length, 0.0);
  for (const auto& s : stems) {
    for (std::size_t i = 0; i < length; ++i) out[i] += s.samples[i];
  }
  double peak = 0.0;
  for (double x : out) peak = std::max(peak, std::abs(x));
  if (peak > 1.0) {
    const double gain = 1.0 / peak;
    for (double& x : out) x *= gain;
  }
  return Waveform(std::move(out), rate);
}

Waveform pad_to(const Waveform& w, std::size_t length) {
  Waveform out = w;
  out.samples.resize(length, 0.0);
  return out;
}

Waveform combine_context(const Waveform& mixture, const Waveform& metronome) {
  if (mixture.sample_rate != metronome.sample_rate) {
    throw InvalidArgument("combine_context: sample rates differ");
  }
  const std::size_t length = std::max(mixture.size(), metronome.size());
  const Waveform parts[] = {pad_to(mixture, length), pad_to(metronome, length)};
  return mix(parts);
}

Waveform crop(const Waveform& w, double start_s, double length_s) {
  const std::size_t begin = std::min(w.size(), samples_for(start_s, w.sample_rate));
  const std::size_t end =
      std::min(w.size(), begin + samples_for(length_s, w.sample_rate));
  return Waveform(std::vector<double>(w.samples.begin() + begin, w.samples.begin() + end),
                  w.sample_rate);
}

Waveform normalize_peak(const Waveform& w, double target) {
  Waveform out = w;
  scale_to_peak(out.samples, target);
  return out;
}

Waveform speed_transpose(const Waveform& w, double factor) {
  if (!(factor >= 0.5 && factor <= 2.0)) {
    throw InvalidArgument("speed factor must be in [0.5, 2.0]");
  }
  const auto length = static_cast<std::size_t>(
      std::llround(static_cast<double>(w.size()) / factor));
  std::vector<double> out(length);
  for (std::size_t j = 0; j < length; ++j) {
    out[j] = interpolate(w.samples, static_cast<double>(j) * factor);
  }
  return Waveform(std::move(out), w.sample_rate);
}

Waveform resample(const Waveform& w, int new_rate) {
  check_rate(new_rate);
  if (new_rate == w.sample_rate) return w;
  const double step = static_cast<double>(w.sample_rate) / new_rate;
  const auto length = static_cast<std::size_t>(
      std::llround(static_cast<double>(w.size()) / step));
  std::vector<double> out(length);
  for (std::size_t j = 0; j < length; ++j) {
    out[j] = interpolate(w.samples, static_cast<double>(j) * step);
  }
  return Waveform(std::move(out), new_rate);
}

Waveform time_stretch(const Waveform& w, double ratio) {
  if (!(ratio > 0.0)) throw InvalidArgument("stretch ratio must be positive");
  const int rate = w.sample_rate;
  const auto window = std::max<std::size_t>(16, samples_for(0.04, rate));
  const std::size_t synth_hop = window / 2;
  const double analysis_hop = static_cast<double>(synth_hop) / ratio;
  const auto tolerance = static_cast<std::ptrdiff_t>(samples_for(0.01, rate));
  const auto out_len = static_cast<std::size_t>(
      std::llround(static_cast<double>(w.size()) * ratio));

  std::vector<double> hann(window);
  for (std::size_t i = 0; i < window; ++i) {
    hann[i] = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / window);
  }
  const auto& x = w.samples;
  const auto n_in = static_cast<std::ptrdiff_t>(x.size());
  auto at = [&](std::ptrdiff_t i) { return i >= 0 && i < n_in ? x[i] : 0.0; };

  std::vector<double> out(out_len + window, 0.0);
  std::vector<double> weight(out_len + window, 0.0);
  std::ptrdiff_t prev = 0;
  for (std::size_t k = 0; k * synth_hop < out_len; ++k) {
    const auto nominal = static_cast<std::ptrdiff_t>(std::llround(k * analysis_hop));
    std::ptrdiff_t chosen = nominal;
    if (k > 0) {
      // Pick the offset whose segment best continues the previous grain.
      const std::ptrdiff_t natural = prev + static_cast<std::ptrdiff_t>(synth_hop);
      double best = -1e300;
      for (std::ptrdiff_t delta = -tolerance; delta <= tolerance; ++delta) {
        const std::ptrdiff_t cand = nominal + delta;
        double corr = 0.0;
        for (std::size_t i = 0; i < window; ++i) {
          corr += at(cand + static_cast<std::ptrdiff_t>(i)) *
                  at(natural + static_cast<std::ptrdiff_t>(i));
        }
        if (corr > best) {
          best = corr;
          chosen = cand;
        }
      }
    }
    const std::size_t base = k * synth_hop;
    for (std::size_t i = 0; i < window; ++i) {
      out[base + i] += hann[i] * at(chosen + static_cast<std::ptrdiff_t>(i));
      weight[base + i] += hann[i];
    }
    prev = chosen;
  }
  out.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    if (weight[i] > 1e-3) out[i] /= weight[i];
  }
  clamp_unit(out);
  return Waveform(std::move(out), rate);
}

Waveform pitch_transpose(const Waveform& w, double semitones) {
  if (!(semitones >= -12.0 && semitones <= 12.0)) {
    throw InvalidArgument("pitch shift must be in [-12, 12] semitones");
  }
  if (semitones == 0.0) return w;
  const double ratio = std::pow(2.0, semitones / 12.0);
  Waveform shifted = speed_transpose(time_stretch(w, ratio), ratio);
  clamp_unit(shifted.samples);
  return shifted;
}

}  // namespace stage::signal
