#include "stage/tokens.hpp"

#include <string>

#include "stage/error.hpp"

namespace stage::tokens {

StepSequence::StepSequence(std::size_t lanes, std::vector<std::int32_t> ids)
    : lanes_(lanes), ids_(std::move(ids)) {
  if (lanes_ == 0 || ids_.size() % lanes_ != 0) {
    throw InvalidArgument("step sequence is not rectangular");
  }
}

void StepSequence::push_back(std::span<const std::int32_t> step) {
  if (step.size() != lanes_) throw InvalidArgument("step has the wrong lane count");
  ids_.insert(ids_.end(), step.begin(), step.end());
}

void StepSequence::push_filled(std::int32_t id) { ids_.insert(ids_.end(), lanes_, id); }

void StepSequence::append(const StepSequence& other) {
  if (other.empty()) return;
  if (other.lanes_ != lanes_) throw InvalidArgument("lane count mismatch");
  ids_.insert(ids_.end(), other.ids_.begin(), other.ids_.end());
}

StepSequence StepSequence::slice(std::size_t begin, std::size_t end) const {
  StepSequence out(lanes_);
  out.ids_.assign(ids_.begin() + static_cast<std::ptrdiff_t>(begin * lanes_),
                  ids_.begin() + static_cast<std::ptrdiff_t>(end * lanes_));
  return out;
}

std::size_t InterleavedSequence::target_count() const {
  std::size_t n = 0;
  for (auto m : loss_mask) n += m;
  return n;
}

StepSequence apply_delay(const codec::TokenGrid& grid, const Vocabulary& vocab) {
  const std::size_t frames = grid.num_frames();
  const std::size_t lanes = grid.num_codebooks();
  StepSequence steps(lanes);
  if (frames == 0) return steps;
  const std::size_t length = frames + lanes - 1;
  std::vector<std::int32_t> ids(length * lanes, vocab.empty());
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < lanes; ++i) ids[(t + i) * lanes + i] = grid.at(t, i);
  }
  return StepSequence(lanes, std::move(ids));
}

codec::TokenGrid invert_delay(const StepSequence& steps, std::size_t lanes,
                              const Vocabulary& vocab) {
  if (lanes == 0) throw InvalidArgument("invert_delay: zero lanes");
  // apply_delay maps an empty grid to zero steps.
  if (steps.size() == 0 && steps.lanes() == lanes) return codec::TokenGrid(0, lanes);
  if (steps.size() < lanes || steps.lanes() != lanes) {
    throw MalformedSequence("invert_delay: need at least K steps of K lanes");
  }
  const std::size_t frames = steps.size() - lanes + 1;
  codec::TokenGrid grid(frames, lanes);
  for (std::size_t p = 0; p < steps.size(); ++p) {
    for (std::size_t i = 0; i < lanes; ++i) {
      const std::int32_t id = steps.at(p, i);
      const bool inside = p >= i && p - i < frames;
      if (inside) {
        if (!vocab.is_audio(id)) {
          throw MalformedSequence("expected an audio id at step " + std::to_string(p) +
                                  ", lane " + std::to_string(i));
        }
        grid.at(p - i, i) = id;
      } else if (id != vocab.empty()) {
        throw MalformedSequence("expected EMPTY at step " + std::to_string(p) + ", lane " +
                                std::to_string(i));
      }
    }
  }
  return grid;
}

StepSequence build_inference_prefix(const codec::TokenGrid& context, std::size_t lanes,
                                    const Vocabulary& vocab) {
  if (context.num_frames() > 0 && context.num_codebooks() != lanes) {
    throw InvalidArgument("context codebook count mismatch");
  }
  StepSequence prefix(lanes);
  prefix.append(apply_delay(context, vocab));
  prefix.push_filled(vocab.context());
  return prefix;
}

InterleavedSequence build_training_sequence(const codec::TokenGrid& context,
                                            const codec::TokenGrid& target,
                                            const Vocabulary& vocab) {
  const std::size_t lanes = target.num_codebooks();
  if (lanes == 0) throw InvalidArgument("target grid has no codebooks");
  if (context.num_frames() > 0 && context.num_codebooks() != lanes) {
    throw InvalidArgument("context and target differ in codebook count");
  }
  InterleavedSequence seq;
  seq.steps = build_inference_prefix(context, lanes, vocab);
  seq.context_len = seq.steps.size();
  seq.steps.append(apply_delay(target, vocab));
  seq.loss_mask.assign(seq.steps.ids().size(), 0);
  for (std::size_t p = seq.context_len; p < seq.steps.size(); ++p) {
    for (std::size_t i = 0; i < lanes; ++i) {
      seq.loss_mask[p * lanes + i] = vocab.is_audio(seq.steps.at(p, i)) ? 1 : 0;
    }
  }
  return seq;
}

InterleavedSequence build_plain_sequence(const codec::TokenGrid& grid,
                                         const Vocabulary& vocab) {
  InterleavedSequence seq;
  seq.steps = apply_delay(grid, vocab);
  seq.context_len = 0;
  seq.loss_mask.assign(seq.steps.ids().size(), 0);
  for (std::size_t k = 0; k < seq.loss_mask.size(); ++k) {
    seq.loss_mask[k] = vocab.is_audio(seq.steps.ids()[k]) ? 1 : 0;
  }
  return seq;
}

}  // namespace stage::tokens
