#include "stage/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <string>

#include "stage/error.hpp"
#include "stage/kernels.hpp"
#include "stage/rng.hpp"

namespace stage::codec {
namespace {

double to_float_precision(double x) { return static_cast<double>(static_cast<float>(x)); }

// Frames are stored row-major, frame_size values per row.
std::vector<double> collect_frames(std::span<const signal::Waveform> clips,
                                   std::size_t frame_size) {
  std::vector<double> frames;
  for (const auto& clip : clips) {
    const std::size_t count = clip.size() / frame_size;
    frames.insert(frames.end(), clip.samples.begin(),
                  clip.samples.begin() + static_cast<std::ptrdiff_t>(count * frame_size));
  }
  return frames;
}

std::vector<double> subsample(const std::vector<double>& frames, std::size_t dim,
                              std::size_t keep, std::uint64_t seed) {
  const std::size_t n = frames.size() / dim;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed ^ 0x5375627361ULL);
  for (std::size_t i = 0; i < keep; ++i) {
    std::swap(order[i], order[i + uniform_index(rng, n - i)]);
  }
  order.resize(keep);
  std::sort(order.begin(), order.end());
  std::vector<double> out(keep * dim);
  for (std::size_t i = 0; i < keep; ++i) {
    std::copy_n(frames.begin() + static_cast<std::ptrdiff_t>(order[i] * dim), dim,
                out.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  return out;
}

// k-means++ seeding with centroid 0 fixed at the origin.
void seed_centroids(const std::vector<double>& points, std::size_t dim,
                    std::size_t count, Rng& rng, double* centroids) {
  const std::size_t n = points.size() / dim;
  std::fill(centroids, centroids + count * dim, 0.0);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) {
    d2[i] = kernels::dot(points.data() + i * dim, points.data() + i * dim, dim);
  }
  for (std::size_t c = 1; c < count; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    if (!(total > 0.0)) break;  // every point already coincides with a centroid
    const double target = uniform01(rng) * total;
    double run = 0.0;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      run += d2[i];
      if (run > target && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    double* dst = centroids + c * dim;
    for (std::size_t j = 0; j < dim; ++j) dst[j] = to_float_precision(points[pick * dim + j]);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], kernels::squared_distance(points.data() + i * dim, dst, dim));
    }
  }
}

void lloyd(const std::vector<double>& points, std::size_t dim, std::size_t count,
           int iters, double* centroids, std::vector<std::int32_t>& labels) {
  const std::size_t n = points.size() / dim;
  labels.assign(n, 0);
  std::vector<double> sums(count * dim);
  std::vector<std::size_t> counts(count);
  for (int it = 0; it < iters; ++it) {
    kernels::parallel::assign_nearest(points.data(), n, dim, centroids, count,
                                      labels.data(), static_cast<double*>(nullptr));
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      ++counts[c];
      kernels::axpy(1.0, points.data() + i * dim, sums.data() + c * dim, dim);
    }
    for (std::size_t c = 1; c < count; ++c) {
      if (counts[c] == 0) continue;
      const double inv = 1.0 / static_cast<double>(counts[c]);
      for (std::size_t j = 0; j < dim; ++j) {
        centroids[c * dim + j] = to_float_precision(sums[c * dim + j] * inv);
      }
    }
  }
  kernels::parallel::assign_nearest(points.data(), n, dim, centroids, count,
                                    labels.data(), static_cast<double*>(nullptr));
}

void check_ids(const CodecModel& codec, const TokenGrid& grid) {
  if (grid.num_frames() > 0 && grid.num_codebooks() != codec.num_codebooks) {
    throw InvalidArgument("token grid codebook count does not match codec");
  }
  for (std::int32_t id : grid.ids()) {
    if (id < 0 || static_cast<std::uint32_t>(id) >= codec.codebook_size) {
      throw InvalidArgument("token id out of range: " + std::to_string(id));
    }
  }
}

}  // namespace

TokenGrid::TokenGrid(std::size_t num_frames, std::size_t num_codebooks)
    : num_codebooks_(num_codebooks), ids_(num_frames * num_codebooks, 0) {}

TokenGrid::TokenGrid(std::size_t num_codebooks, std::vector<std::int32_t> ids)
    : num_codebooks_(num_codebooks), ids_(std::move(ids)) {
  if (num_codebooks_ == 0 || ids_.size() % num_codebooks_ != 0) {
    throw InvalidArgument("token grid is not rectangular");
  }
}

TokenGrid TokenGrid::truncated(std::size_t frames) const {
  frames = std::min(frames, num_frames());
  TokenGrid out(frames, num_codebooks_);
  std::copy_n(ids_.begin(), frames * num_codebooks_, out.ids_.begin());
  return out;
}

std::string to_text(const TokenGrid& grid) {
  std::string out;
  for (std::size_t t = 0; t < grid.num_frames(); ++t) {
    for (std::size_t k = 0; k < grid.num_codebooks(); ++k) {
      if (k) out += ' ';
      out += std::to_string(grid.at(t, k));
    }
    out += '\n';
  }
  return out;
}

TokenGrid from_text(const std::string& text) {
  std::istringstream lines(text);
  std::string line;
  std::size_t width = 0;
  std::vector<std::int32_t> ids;
  while (std::getline(lines, line)) {
    std::istringstream fields(line);
    std::size_t count = 0;
    std::int32_t id = 0;
    while (fields >> id) {
      ids.push_back(id);
      ++count;
    }
    if (count == 0) continue;
    if (width == 0) width = count;
    if (count != width) throw FormatError("token text: ragged frame");
  }
  if (width == 0) return {};
  return TokenGrid(width, std::move(ids));
}

void CodecModel::validate() const {
  if (num_codebooks < 1) throw InvalidArgument("codec needs at least one codebook");
  if (codebook_size < 2) throw InvalidArgument("codebook size must be at least 2");
  if (frame_size < 1) throw InvalidArgument("frame size must be positive");
  if (sample_rate < 1) throw InvalidArgument("sample rate must be positive");
  if (centroids.size() != std::size_t{num_codebooks} * codebook_size * frame_size) {
    throw InvalidArgument("centroid table has the wrong size");
  }
}

CodecModel train_codec(std::span<const signal::Waveform> clips,
                       const TrainOptions& options) {
  if (clips.empty()) throw TrainingError("codec training needs at least one clip");
  if (options.num_codebooks < 1 || options.codebook_size < 2 || options.frame_size < 1) {
    throw InvalidArgument("invalid codec dimensions");
  }
  const int rate = clips.front().sample_rate;
  for (const auto& c : clips) {
    if (c.sample_rate != rate) throw InvalidArgument("codec training clips differ in sample rate");
  }
  const std::size_t dim = options.frame_size;
  const std::size_t count = options.codebook_size;
  std::vector<double> residual = collect_frames(clips, dim);
  std::size_t n = residual.size() / dim;
  if (n < 10 * count) {
    throw TrainingError("insufficient data: " + std::to_string(n) + " frames for " +
                        std::to_string(count) + " centroids (need 10x)");
  }
  if (options.max_frames > 0 && n > options.max_frames) {
    residual = subsample(residual, dim, std::max(options.max_frames, 10 * count), options.seed);
    n = residual.size() / dim;
  }

  CodecModel codec;
  codec.frame_size = options.frame_size;
  codec.num_codebooks = options.num_codebooks;
  codec.codebook_size = options.codebook_size;
  codec.sample_rate = static_cast<std::uint32_t>(rate);
  codec.centroids.assign(std::size_t{options.num_codebooks} * count * dim, 0.0);

  Rng rng(options.seed);
  std::vector<std::int32_t> labels;
  for (std::size_t book = 0; book < options.num_codebooks; ++book) {
    double* table = codec.centroid(book, 0);
    seed_centroids(residual, dim, count, rng, table);
    lloyd(residual, dim, count, options.iters, table, labels);
    for (std::size_t i = 0; i < n; ++i) {
      kernels::axpy(-1.0, table + static_cast<std::size_t>(labels[i]) * dim,
                    residual.data() + i * dim, dim);
    }
  }
  return codec;
}

namespace {

// Greedy residual search: each stage takes the centroid nearest to what the
// previous stages left over.
void greedy_codes(const CodecModel& codec, const double* frame, std::int32_t* ids,
                  std::vector<double>& residual) {
  const std::size_t dim = codec.frame_size;
  residual.assign(frame, frame + dim);
  for (std::size_t k = 0; k < codec.num_codebooks; ++k) {
    ids[k] = kernels::nearest_centroid(residual.data(), codec.centroid(k, 0),
                                       static_cast<std::size_t>(codec.codebook_size), dim,
                                       static_cast<double*>(nullptr));
    kernels::axpy(-1.0, codec.centroid(k, static_cast<std::size_t>(ids[k])), residual.data(), dim);
  }
}

// Sum of the selected centroids, clamped like decode().
void reconstruct(const CodecModel& codec, const std::int32_t* ids, double* out) {
  const std::size_t dim = codec.frame_size;
  std::fill(out, out + dim, 0.0);
  for (std::size_t k = 0; k < codec.num_codebooks; ++k) {
    kernels::axpy(1.0, codec.centroid(k, static_cast<std::size_t>(ids[k])), out, dim);
  }
  for (std::size_t i = 0; i < dim; ++i) out[i] = std::clamp(out[i], -1.0, 1.0);
}

}  // namespace

TokenGrid encode(const CodecModel& codec, const signal::Waveform& w) {
  if (static_cast<std::uint32_t>(w.sample_rate) != codec.sample_rate) {
    throw InvalidArgument("encode: sample rate does not match codec");
  }
  const std::size_t dim = codec.frame_size;
  if (w.size() < dim) throw InvalidArgument("encode: waveform shorter than one frame");
  const std::size_t frames = w.size() / dim;
  const std::size_t books = codec.num_codebooks;
  TokenGrid grid(frames, books);
  const auto n = static_cast<std::ptrdiff_t>(frames);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    std::vector<std::int32_t> ids(books), candidate(books), again(books);
    std::vector<double> residual, recon(dim);
    greedy_codes(codec, w.samples.data() + t * static_cast<std::ptrdiff_t>(dim), ids.data(), residual);
    // Greedy codes are not always reproduced when their own reconstruction is
    // encoded again. Keep the longest prefix (later stages zeroed) that is,
    // so encode(decode(g)) == g. A single stage always qualifies, and per-frame
    // error stays non-increasing in the stage count.
    for (std::size_t keep = books; keep >= 1; --keep) {
      std::fill(candidate.begin(), candidate.end(), 0);
      std::copy(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), candidate.begin());
      reconstruct(codec, candidate.data(), recon.data());
      greedy_codes(codec, recon.data(), again.data(), residual);
      if (again == candidate || keep == 1) break;
    }
    for (std::size_t k = 0; k < books; ++k) grid.at(static_cast<std::size_t>(t), k) = candidate[k];
  }
  return grid;
}

signal::Waveform decode_partial(const CodecModel& codec, const TokenGrid& grid,
                                std::size_t stages) {
  check_ids(codec, grid);
  const std::size_t dim = codec.frame_size;
  std::vector<double> out(grid.num_frames() * dim, 0.0);
  for (std::size_t t = 0; t < grid.num_frames(); ++t) {
    double* dst = out.data() + t * dim;
    for (std::size_t k = 0; k < stages; ++k) {
      kernels::axpy(1.0, codec.centroid(k, static_cast<std::size_t>(grid.at(t, k))), dst, dim);
    }
  }
  for (double& x : out) x = std::clamp(x, -1.0, 1.0);
  return signal::Waveform(std::move(out), static_cast<int>(codec.sample_rate));
}

signal::Waveform decode(const CodecModel& codec, const TokenGrid& grid) {
  return decode_partial(codec, grid, codec.num_codebooks);
}

double reconstruction_error(const CodecModel& codec, const signal::Waveform& w,
                            std::size_t stages) {
  if (stages < 1 || stages > codec.num_codebooks) {
    throw InvalidArgument("stages must be in [1, K]");
  }
  const auto recon = decode_partial(codec, encode(codec, w), stages);
  double sum = 0.0;
  for (std::size_t i = 0; i < recon.size(); ++i) {
    const double d = w.samples[i] - recon.samples[i];
    sum += d * d;
  }
  return sum / static_cast<double>(recon.size());
}

void save(const CodecModel& codec, const std::filesystem::path& path) {
  codec.validate();
  std::string out = "STGC";
  auto put = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(codec.num_codebooks);
  put(codec.codebook_size);
  put(codec.frame_size);
  put(codec.sample_rate);
  for (double c : codec.centroids) {
    const auto f = static_cast<float>(c);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put(bits);
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw FormatError(path.string() + ": cannot open for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw FormatError(path.string() + ": write failed");
}

CodecModel load(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError(path.string() + ": cannot open codec checkpoint");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(file)),
                                         std::istreambuf_iterator<char>());
  if (bytes.size() < 20 || std::memcmp(bytes.data(), "STGC", 4) != 0) {
    throw FormatError(path.string() + ": not a codec checkpoint");
  }
  auto get = [&](std::size_t off) {
    return std::uint32_t{bytes[off]} | (std::uint32_t{bytes[off + 1]} << 8) |
           (std::uint32_t{bytes[off + 2]} << 16) | (std::uint32_t{bytes[off + 3]} << 24);
  };
  CodecModel codec;
  codec.num_codebooks = get(4);
  codec.codebook_size = get(8);
  codec.frame_size = get(12);
  codec.sample_rate = get(16);
  const std::size_t values =
      std::size_t{codec.num_codebooks} * codec.codebook_size * codec.frame_size;
  if (bytes.size() != 20 + 4 * values) {
    throw FormatError(path.string() + ": codec checkpoint size mismatch");
  }
  codec.centroids.resize(values);
  for (std::size_t i = 0; i < values; ++i) {
    const std::uint32_t bits = get(20 + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    codec.centroids[i] = f;
  }
  codec.validate();
  return codec;
}

}  // namespace stage::codec
