#include "stage/eval.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>

#include "stage/error.hpp"

namespace stage::eval {
namespace {

using signal::Waveform;

std::size_t samples_for(double seconds, int rate) {
  return static_cast<std::size_t>(std::lround(seconds * rate));
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters with edges evenly spaced on the mel scale, evaluated at
// each FFT bin frequency. Row-major bands x bins.
std::vector<double> mel_filterbank(std::size_t bins, std::size_t nfft, int rate) {
  const double top = hz_to_mel(rate / 2.0);
  std::vector<double> edges(kMelBands + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(kMelBands + 1));
  }
  std::vector<double> bank(kMelBands * bins, 0.0);
  for (std::size_t b = 0; b < kMelBands; ++b) {
    const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * rate / static_cast<double>(nfft);
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      bank[b * bins + k] = w;
    }
  }
  return bank;
}

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

void require_set(const std::vector<Embedding>& set, const char* which) {
  if (set.size() < 2) throw InvalidArgument(std::string(which) + " needs at least 2 embeddings");
  for (const auto& e : set) {
    if (e.size() != set.front().size() || e.empty()) {
      throw InvalidArgument(std::string(which) + " has inconsistent embedding dimensions");
    }
  }
}

void require_pair(const std::vector<Embedding>& a, const std::vector<Embedding>& b) {
  require_set(a, "first set");
  require_set(b, "second set");
  if (a.front().size() != b.front().size()) throw InvalidArgument("embedding dimension mismatch");
}

Eigen::MatrixXd to_matrix(const std::vector<Embedding>& set) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(set[0].size()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t j = 0; j < set[i].size(); ++j) m(i, j) = set[i][j];
  }
  return m;
}

// Eigenvalues are clamped at zero before the square root.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

double frechet(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
               const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
  // tr sqrt(sqrtA B sqrtA) is the sum of singular values of sqrtB sqrtA.
  // Taking singular values directly avoids square-rooting tiny, noisy
  // eigenvalues when the covariances are near singular.
  const Eigen::MatrixXd product = sqrt_psd(cov_b) * sqrt_psd(cov_a);
  const double tr_sqrt = Eigen::BDCSVD<Eigen::MatrixXd>(product).singularValues().sum();
  double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  if (d < 0.0 && d >= -1e-9) d = 0.0;
  return d;
}

double cubic_kernel(const Embedding& x, const Embedding& y) {
  double dot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * y[i];
  const double base = dot / static_cast<double>(x.size()) + 1.0;
  return base * base * base;
}

// Sum in ascending order so equal multisets of values give equal sums.
double sorted_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum;
}

// Mean kernel value over ordered pairs (i, j), skipping i == j when asked.
double mean_kernel(const std::vector<Embedding>& a, const std::vector<Embedding>& b, bool skip_diagonal) {
  std::vector<double> values;
  values.reserve(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (skip_diagonal && i == j) continue;
      values.push_back(cubic_kernel(a[i], b[j]));
    }
  }
  return sorted_sum(values) / static_cast<double>(values.size());
}

Waveform load_clip(const std::filesystem::path& path, const EvalConfig& config) {
  return signal::load_wav(path, config.sample_rate);
}

}  // namespace

void validate_beats(const BeatList& beats) {
  for (std::size_t i = 0; i < beats.size(); ++i) {
    if (!std::isfinite(beats[i]) || beats[i] < 0.0) {
      throw InvalidArgument("beat times must be finite and non-negative");
    }
    if (i > 0 && !(beats[i] > beats[i - 1])) {
      throw InvalidArgument("beat times must be strictly increasing");
    }
  }
}

std::vector<double> onset_envelope(const Waveform& w) {
  if (w.empty()) throw InvalidArgument("cannot detect beats in an empty waveform");
  const std::size_t frame = samples_for(0.025, w.sample_rate);
  const std::size_t hop = samples_for(0.010, w.sample_rate);
  // Frame i covers samples [(i+1)*hop - frame, (i+1)*hop), zero-padded on the
  // left, so a new onset first shows up in the frame whose last hop holds it.
  const std::size_t frames = (w.size() + hop - 1) / hop;
  std::vector<double> env(frames);
  double prev = 0.0;
  for (std::size_t i = 0; i < frames; ++i) {
    const std::ptrdiff_t end = static_cast<std::ptrdiff_t>((i + 1) * hop);
    const std::ptrdiff_t begin = end - static_cast<std::ptrdiff_t>(frame);
    double energy = 0.0;
    for (std::ptrdiff_t s = std::max<std::ptrdiff_t>(begin, 0);
         s < std::min<std::ptrdiff_t>(end, static_cast<std::ptrdiff_t>(w.size())); ++s) {
      energy += w.samples[s] * w.samples[s];
    }
    const double rms = std::sqrt(energy / static_cast<double>(frame));
    env[i] = std::max(0.0, rms - prev);
    prev = rms;
  }
  return env;
}

BeatList detect_beats(const Waveform& w) {
  const auto env = onset_envelope(w);
  const double hop_s = static_cast<double>(samples_for(0.010, w.sample_rate)) / w.sample_rate;
  const auto radius = static_cast<std::ptrdiff_t>(std::lround(0.050 / hop_s));
  double mean = 0.0;
  for (double v : env) mean += v;
  mean /= static_cast<double>(env.size());
  double var = 0.0;
  for (double v : env) var += (v - mean) * (v - mean);
  const double threshold = mean + 1.5 * std::sqrt(var / static_cast<double>(env.size()));

  BeatList beats;
  const auto n = static_cast<std::ptrdiff_t>(env.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    if (!(env[i] > threshold)) continue;
    bool is_peak = true;
    for (std::ptrdiff_t j = std::max<std::ptrdiff_t>(0, i - radius);
         j <= std::min(n - 1, i + radius) && is_peak; ++j) {
      // On plateaus only the first frame counts.
      if (j < i) is_peak = env[i] > env[j];
      else if (j > i) is_peak = env[i] >= env[j];
    }
    if (is_peak) beats.push_back((static_cast<double>(i) + 0.5) * hop_s);
  }
  return beats;
}

BeatScore beat_f1(const BeatList& reference, const BeatList& estimate, double tolerance_s) {
  if (!(tolerance_s >= 0.0)) throw InvalidArgument("tolerance must be non-negative");
  validate_beats(reference);
  validate_beats(estimate);
  if (reference.empty() && estimate.empty()) return {1.0, 1.0, 1.0, 0};
  // Greedy left-to-right matching is optimal when every window has the same
  // width: the earliest unmatched pair within tolerance is never a bad choice.
  std::size_t i = 0, j = 0, matches = 0;
  while (i < reference.size() && j < estimate.size()) {
    if (std::abs(reference[i] - estimate[j]) <= tolerance_s) {
      ++matches;
      ++i;
      ++j;
    } else if (estimate[j] < reference[i]) {
      ++j;
    } else {
      ++i;
    }
  }
  BeatScore score;
  score.matches = matches;
  if (!estimate.empty()) score.precision = static_cast<double>(matches) / estimate.size();
  if (!reference.empty()) score.recall = static_cast<double>(matches) / reference.size();
  if (score.precision + score.recall > 0.0) {
    score.f1 = 2.0 * score.precision * score.recall / (score.precision + score.recall);
  }
  return score;
}

Embedding embed_clip(const Waveform& w) {
  if (w.duration_seconds() < 0.1) throw InvalidArgument("clip shorter than 0.1 s");
  const std::size_t frame = samples_for(0.025, w.sample_rate);
  const std::size_t hop = samples_for(0.010, w.sample_rate);
  std::size_t nfft = 1;
  while (nfft < 2 * frame) nfft *= 2;
  const std::size_t bins = nfft / 2 + 1;
  const auto bank = mel_filterbank(bins, nfft, w.sample_rate);
  std::vector<double> window(frame);
  for (std::size_t i = 0; i < frame; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / frame);
  }

  double* in = fftw_alloc_real(nfft);
  fftw_complex* out = fftw_alloc_complex(bins);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(nfft), in, out, FFTW_ESTIMATE);
  }
  const std::size_t frames = 1 + (w.size() - frame) / hop;
  std::vector<double> sum(kMelBands, 0.0), sum_sq(kMelBands, 0.0), power(bins);
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(in, in + nfft, 0.0);
    for (std::size_t i = 0; i < frame; ++i) in[i] = w.samples[f * hop + i] * window[i];
    fftw_execute_dft_r2c(plan, in, out);
    for (std::size_t k = 0; k < bins; ++k) power[k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    for (std::size_t b = 0; b < kMelBands; ++b) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += bank[b * bins + k] * power[k];
      const double v = std::log(e + 1e-8);
      sum[b] += v;
      sum_sq[b] += v * v;
    }
  }
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);

  Embedding e(kEmbeddingDim);
  const double n = static_cast<double>(frames);
  for (std::size_t b = 0; b < kMelBands; ++b) {
    const double mean = sum[b] / n;
    e[b] = mean;
    e[kMelBands + b] = std::sqrt(std::max(0.0, sum_sq[b] / n - mean * mean));
  }
  return e;
}

double frechet_distance(const std::vector<double>& mu_a, const std::vector<std::vector<double>>& cov_a,
                        const std::vector<double>& mu_b, const std::vector<std::vector<double>>& cov_b) {
  const std::size_t d = mu_a.size();
  if (d == 0 || mu_b.size() != d || cov_a.size() != d || cov_b.size() != d) {
    throw InvalidArgument("Gaussian moments have mismatched dimensions");
  }
  Eigen::VectorXd ma(d), mb(d);
  Eigen::MatrixXd ca(d, d), cb(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    if (cov_a[i].size() != d || cov_b[i].size() != d) throw InvalidArgument("covariance is not square");
    ma(i) = mu_a[i];
    mb(i) = mu_b[i];
    for (std::size_t j = 0; j < d; ++j) {
      ca(i, j) = cov_a[i][j];
      cb(i, j) = cov_b[i][j];
    }
  }
  return frechet(ma, ca, mb, cb);
}

double fad(const std::vector<Embedding>& set_a, const std::vector<Embedding>& set_b) {
  require_pair(set_a, set_b);
  auto fit = [](const std::vector<Embedding>& set, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const Eigen::MatrixXd x = to_matrix(set);
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    cov.diagonal().array() += 1e-6;
  };
  Eigen::VectorXd ma, mb;
  Eigen::MatrixXd ca, cb;
  fit(set_a, ma, ca);
  fit(set_b, mb, cb);
  return frechet(ma, ca, mb, cb);
}

double kad(const std::vector<Embedding>& set_a, const std::vector<Embedding>& set_b) {
  require_pair(set_a, set_b);
  // Equal sizes use the paired U-statistic, which also drops the i == j cross
  // terms; a set compared with itself then scores exactly 0.
  const bool paired = set_a.size() == set_b.size();
  return mean_kernel(set_a, set_a, true) + mean_kernel(set_b, set_b, true) -
         2.0 * mean_kernel(set_a, set_b, paired);
}

void EvalConfig::validate() const {
  if (!(tolerance_s >= 0.0)) throw InvalidArgument("tolerance must be non-negative");
  if (!(normalize_peak > 0.0 && normalize_peak <= 1.0)) {
    throw InvalidArgument("normalize_peak must be in (0, 1]");
  }
  if (sample_rate <= 0) throw InvalidArgument("sample_rate must be positive");
}

std::map<std::string, double> load_bpm_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open BPM file");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw FormatError(path.string() + ": expected an object of clip -> bpm");
  std::map<std::string, double> out;
  for (const auto& [name, value] : doc.items()) {
    if (!value.is_number() || !(value.get<double>() > 0.0)) {
      throw FormatError(path.string() + ": bpm for " + name + " must be a positive number");
    }
    out[name] = value.get<double>();
  }
  return out;
}

std::vector<std::filesystem::path> list_clips(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InvalidArgument(dir.string() + ": not a directory");
  std::vector<std::filesystem::path> clips;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".wav") clips.push_back(entry.path());
  }
  if (clips.empty()) throw InvalidArgument(dir.string() + ": no WAV clips");
  std::sort(clips.begin(), clips.end(),
            [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  return clips;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["clips"] = nlohmann::ordered_json::array();
  for (const auto& c : clips) {
    nlohmann::ordered_json entry;
    entry["name"] = c.name;
    if (c.beats) {
      entry["precision"] = c.beats->precision;
      entry["recall"] = c.beats->recall;
      entry["f1"] = c.beats->f1;
    } else {
      entry["precision"] = nullptr;
      entry["recall"] = nullptr;
      entry["f1"] = nullptr;
    }
    j["clips"].push_back(entry);
  }
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  j["mean_f1"] = opt(mean_f1);
  j["fad"] = opt(fad);
  j["kad"] = opt(kad);
  j["counts"] = {{"generated", generated_count},
                 {"reference", reference_count},
                 {"scored", scored_count}};
  j["config"] = config;
  return j;
}

EvalReport evaluate_run(const std::filesystem::path& generated_dir, const EvalReference& reference,
                        const EvalConfig& config) {
  config.validate();
  const auto generated = list_clips(generated_dir);
  std::vector<std::filesystem::path> references;
  if (reference.reference_dir) references = list_clips(*reference.reference_dir);

  EvalReport report;
  report.generated_count = generated.size();
  report.reference_count = references.size();
  report.clips.resize(generated.size());
  std::vector<Embedding> gen_embed(generated.size());
  std::vector<Embedding> ref_embed(references.size());

  // Exceptions cannot leave an OpenMP region, so the first one is carried out.
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto n_gen = static_cast<std::ptrdiff_t>(generated.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n_gen; ++i) {
    try {
      const auto& path = generated[i];
      const std::string name = path.filename().string();
      const Waveform clip = load_clip(path, config);
      ClipScore score{name, std::nullopt};
      std::optional<BeatList> truth;
      if (auto it = reference.bpm.find(name); it != reference.bpm.end()) {
        truth = signal::beat_times(it->second, clip.duration_seconds());
      } else if (reference.reference_dir) {
        const auto ref_path = *reference.reference_dir / name;
        if (std::filesystem::exists(ref_path)) truth = detect_beats(load_clip(ref_path, config));
      }
      if (truth) score.beats = beat_f1(*truth, detect_beats(clip), config.tolerance_s);
      report.clips[i] = std::move(score);
      if (!references.empty()) gen_embed[i] = embed_clip(signal::normalize_peak(clip, config.normalize_peak));
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  }
  const auto n_ref = static_cast<std::ptrdiff_t>(references.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n_ref; ++i) {
    try {
      ref_embed[i] = embed_clip(signal::normalize_peak(load_clip(references[i], config),
                                                       config.normalize_peak));
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  double f1_sum = 0.0;
  for (const auto& c : report.clips) {
    if (!c.beats) continue;
    f1_sum += c.beats->f1;
    ++report.scored_count;
  }
  if (report.scored_count) report.mean_f1 = f1_sum / static_cast<double>(report.scored_count);
  // Gaussian fits need two clips per side; with fewer the distances stay null.
  if (gen_embed.size() >= 2 && ref_embed.size() >= 2) {
    report.fad = fad(gen_embed, ref_embed);
    report.kad = kad(gen_embed, ref_embed);
  }
  report.config = {{"tolerance_s", config.tolerance_s},
                   {"normalize_peak", config.normalize_peak},
                   {"sample_rate", config.sample_rate},
                   {"generated_dir", generated_dir.filename().string()},
                   {"reference_dir", reference.reference_dir
                                         ? nlohmann::ordered_json(reference.reference_dir->filename().string())
                                         : nlohmann::ordered_json(nullptr)},
                   {"bpm_references", reference.bpm.size()}};
  return report;
}

}  // namespace stage::eval
