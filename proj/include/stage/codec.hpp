#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "stage/signal.hpp"

namespace stage::codec {

// T frames x K codebook ids, frame-major.
class TokenGrid {
 public:
  TokenGrid() = default;
  TokenGrid(std::size_t num_frames, std::size_t num_codebooks);
  TokenGrid(std::size_t num_codebooks, std::vector<std::int32_t> ids);

  std::size_t num_frames() const { return num_codebooks_ ? ids_.size() / num_codebooks_ : 0; }
  std::size_t num_codebooks() const { return num_codebooks_; }
  std::int32_t at(std::size_t frame, std::size_t book) const {
    return ids_[frame * num_codebooks_ + book];
  }
  std::int32_t& at(std::size_t frame, std::size_t book) {
    return ids_[frame * num_codebooks_ + book];
  }
  std::span<const std::int32_t> frame(std::size_t t) const {
    return {ids_.data() + t * num_codebooks_, num_codebooks_};
  }
  const std::vector<std::int32_t>& ids() const { return ids_; }
  // Keeps the first `frames` frames.
  TokenGrid truncated(std::size_t frames) const;

  bool operator==(const TokenGrid&) const = default;

 private:
  std::size_t num_codebooks_ = 0;
  std::vector<std::int32_t> ids_;
};

// Debug text form: one frame per line, K space-separated ids.
std::string to_text(const TokenGrid& grid);
TokenGrid from_text(const std::string& text);

// Residual vector quantizer over raw sample frames. Centroid 0 of every
// codebook is pinned to the zero vector, so silence and "no refinement" are
// always representable. Centroid values are kept at float precision so that
// checkpoints round-trip exactly.
struct CodecModel {
  std::uint32_t frame_size = 64;
  std::uint32_t num_codebooks = 4;
  std::uint32_t codebook_size = 256;
  std::uint32_t sample_rate = signal::kDefaultSampleRate;
  // codebook-major, centroid-major, dimension-minor
  std::vector<double> centroids;

  const double* centroid(std::size_t book, std::size_t index) const {
    return centroids.data() + (book * codebook_size + index) * frame_size;
  }
  double* centroid(std::size_t book, std::size_t index) {
    return centroids.data() + (book * codebook_size + index) * frame_size;
  }
  double frame_rate() const { return static_cast<double>(sample_rate) / frame_size; }
  void validate() const;
};

struct TrainOptions {
  std::uint32_t num_codebooks = 4;
  std::uint32_t codebook_size = 256;
  std::uint32_t frame_size = 64;
  int iters = 10;
  std::uint64_t seed = 0;
  // 0 keeps every frame; otherwise a seeded uniform subsample of this size.
  std::size_t max_frames = 0;
};

CodecModel train_codec(std::span<const signal::Waveform> clips,
                       const TrainOptions& options);

TokenGrid encode(const CodecModel& codec, const signal::Waveform& w);
signal::Waveform decode(const CodecModel& codec, const TokenGrid& grid);
// Decode using only the first `stages` codebooks.
signal::Waveform decode_partial(const CodecModel& codec, const TokenGrid& grid,
                                std::size_t stages);
double reconstruction_error(const CodecModel& codec, const signal::Waveform& w,
                            std::size_t stages);

// Little-endian: "STGC", K, V, frame_size, sample_rate (u32), then float32
// centroids in storage order.
void save(const CodecModel& codec, const std::filesystem::path& path);
CodecModel load(const std::filesystem::path& path);

}  // namespace stage::codec
