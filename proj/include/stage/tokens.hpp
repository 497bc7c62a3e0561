#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stage/codec.hpp"

namespace stage::tokens {

// Audio ids occupy [0, V); three special ids follow.
struct Vocabulary {
  std::int32_t audio_vocab = 256;

  std::int32_t empty() const { return audio_vocab; }
  std::int32_t pad() const { return audio_vocab + 1; }
  std::int32_t context() const { return audio_vocab + 2; }
  std::int32_t total() const { return audio_vocab + 3; }
  bool is_audio(std::int32_t id) const { return id >= 0 && id < audio_vocab; }
};

// Time-major list of K-lane steps.
class StepSequence {
 public:
  StepSequence() = default;
  explicit StepSequence(std::size_t lanes) : lanes_(lanes) {}
  StepSequence(std::size_t lanes, std::vector<std::int32_t> ids);

  std::size_t lanes() const { return lanes_; }
  std::size_t size() const { return lanes_ ? ids_.size() / lanes_ : 0; }
  bool empty() const { return ids_.empty(); }
  std::span<const std::int32_t> step(std::size_t p) const {
    return {ids_.data() + p * lanes_, lanes_};
  }
  std::int32_t at(std::size_t p, std::size_t lane) const { return ids_[p * lanes_ + lane]; }
  std::int32_t& at(std::size_t p, std::size_t lane) { return ids_[p * lanes_ + lane]; }
  void push_back(std::span<const std::int32_t> step);
  void push_filled(std::int32_t id);
  void append(const StepSequence& other);
  // Steps [begin, end).
  StepSequence slice(std::size_t begin, std::size_t end) const;
  const std::vector<std::int32_t>& ids() const { return ids_; }

  bool operator==(const StepSequence&) const = default;

 private:
  std::size_t lanes_ = 0;
  std::vector<std::int32_t> ids_;
};

struct InterleavedSequence {
  StepSequence steps;
  // One flag per (step, lane); true where the id is a loss target.
  std::vector<std::uint8_t> loss_mask;
  // Steps belonging to the context prefix, CONTEXT separator included.
  std::size_t context_len = 0;

  bool masked_in(std::size_t p, std::size_t lane) const {
    return loss_mask[p * steps.lanes() + lane] != 0;
  }
  std::size_t target_count() const;
};

// Step p, lane i holds grid[p - i][i], or EMPTY outside the grid.
// A grid with no frames yields no steps.
StepSequence apply_delay(const codec::TokenGrid& grid, const Vocabulary& vocab);

// Exact inverse of apply_delay; throws MalformedSequence when the EMPTY
// skeleton or audio ids are violated.
codec::TokenGrid invert_delay(const StepSequence& steps, std::size_t lanes,
                              const Vocabulary& vocab);

// delay(context) ++ [CONTEXT x K] ++ delay(target), loss on target audio ids.
InterleavedSequence build_training_sequence(const codec::TokenGrid& context,
                                            const codec::TokenGrid& target,
                                            const Vocabulary& vocab);

// Plain autoregressive sequence without a prefix (used for pretraining).
InterleavedSequence build_plain_sequence(const codec::TokenGrid& grid,
                                         const Vocabulary& vocab);

// delay(context) ++ [CONTEXT x K]
StepSequence build_inference_prefix(const codec::TokenGrid& context,
                                    std::size_t lanes, const Vocabulary& vocab);

}  // namespace stage::tokens
