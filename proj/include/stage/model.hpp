#pragma once

// Decoder-only transformer over delay-interleaved codebook tokens.
//
// Input at step t is the sum of K per-lane embeddings plus a sinusoidal
// position code; pre-norm blocks with causal self-attention and a GELU MLP
// follow, and K independent heads predict the K ids of step t + 1.
//
// All trainable values live in one flat vector whose order is fixed by
// ParamLayout (and is also the checkpoint order):
//   embedding[k]           total_vocab x d_model, k = 0..K-1
//   for each layer:
//     ln1.gain, ln1.bias   d_model
//     attn.w_qkv           3*d_model x d_model,  attn.b_qkv 3*d_model
//     attn.w_out           d_model x d_model,    attn.b_out d_model
//     ln2.gain, ln2.bias   d_model
//     mlp.w_in             d_ff x d_model,       mlp.b_in d_ff
//     mlp.w_out            d_model x d_ff,       mlp.b_out d_model
//   ln_final.gain, ln_final.bias
//   head[k].weight         total_vocab x d_model, head[k].bias total_vocab
// Weight matrices are stored output-major (row o holds the weights of
// output unit o).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stage/codec.hpp"
#include "stage/tokens.hpp"

namespace stage::model {

// Shared: one position axis over prefix and target. Aligned: the CONTEXT
// step restarts the count at 0, so the step predicting target frame t shares
// its position code with context frame t.
enum class PositionMode : std::uint32_t { Shared = 0, Aligned = 1 };

std::string to_string(PositionMode mode);
PositionMode parse_position_mode(const std::string& name);

struct ModelConfig {
  std::uint32_t d_model = 128;
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 4;
  std::uint32_t d_ff = 512;
  std::uint32_t max_seq_len = 1024;
  std::uint32_t num_codebooks = 4;
  std::uint32_t audio_vocab = 256;
  PositionMode position_mode = PositionMode::Aligned;

  std::uint32_t total_vocab() const { return audio_vocab + 3; }
  tokens::Vocabulary vocabulary() const {
    return {static_cast<std::int32_t>(audio_vocab)};
  }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

class ParamLayout {
 public:
  struct Layer {
    std::size_t ln1_gain, ln1_bias, w_qkv, b_qkv, w_out, b_out;
    std::size_t ln2_gain, ln2_bias, w_in, b_in, w_ff_out, b_ff_out;
  };

  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& config);

  std::size_t embedding(std::size_t lane) const { return embeddings_[lane]; }
  const Layer& layer(std::size_t l) const { return layers_[l]; }
  std::size_t final_gain() const { return final_gain_; }
  std::size_t final_bias() const { return final_bias_; }
  std::size_t head_weight(std::size_t lane) const { return head_weights_[lane]; }
  std::size_t head_bias(std::size_t lane) const { return head_biases_[lane]; }
  std::size_t total() const { return total_; }
  const std::vector<TensorSlot>& tensors() const { return tensors_; }

  // 1 for elements of the "context_row" group (the CONTEXT-id row of every
  // embedding table), 0 for the "base" group.
  std::vector<std::uint8_t> context_row_mask() const;

 private:
  std::size_t add(const std::string& name, std::size_t size);

  std::uint32_t d_model_ = 0;
  std::uint32_t context_id_ = 0;
  std::vector<std::size_t> embeddings_;
  std::vector<Layer> layers_;
  std::size_t final_gain_ = 0, final_bias_ = 0;
  std::vector<std::size_t> head_weights_, head_biases_;
  std::vector<TensorSlot> tensors_;
  std::size_t total_ = 0;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<T> values;

  ModelParams() = default;
  explicit ModelParams(const ModelConfig& c)
      : config(c), layout(c), values(layout.total(), T(0)) {}

  const T* at(std::size_t offset) const { return values.data() + offset; }
  T* at(std::size_t offset) { return values.data() + offset; }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out(config);
    for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
    return out;
  }
};

// Per-step, per-lane logits, stored lane-major internally.
template <typename T>
struct Logits {
  std::size_t steps = 0;
  std::size_t lanes = 0;
  std::size_t vocab = 0;
  std::vector<T> values;

  std::span<const T> at(std::size_t step, std::size_t lane) const {
    return {values.data() + (lane * steps + step) * vocab, vocab};
  }
  std::span<T> at(std::size_t step, std::size_t lane) {
    return {values.data() + (lane * steps + step) * vocab, vocab};
  }
};

struct SamplingConfig {
  double temperature = 1.0;
  std::uint32_t top_k = 64;
  std::uint64_t seed = 0;

  void validate(std::uint32_t audio_vocab) const;
};

// Position code index used for step t of a sequence whose prefix has
// `context_len` steps.
std::size_t position_of(std::size_t t, std::size_t context_len, PositionMode mode);

template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed);

// Position t predicts the ids of step t + 1.
template <typename T>
Logits<T> forward(const ModelParams<T>& params, const tokens::StepSequence& steps,
                  std::size_t context_len = 0);

// Mean cross-entropy over unmasked (step, lane) targets.
template <typename T>
double loss(const Logits<T>& logits, const tokens::InterleavedSequence& sequence);

struct LossStats {
  double sum = 0.0;  // summed cross-entropy, in nats
  std::size_t count = 0;
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

// Adds scale * d(summed CE)/d(params) into `grads` (sized like params).
template <typename T>
LossStats accumulate_gradients(const ModelParams<T>& params,
                               const tokens::InterleavedSequence& sequence,
                               double scale, std::vector<T>& grads);
// Same, but loss targets are read from `targets` (shaped like the sequence)
// instead of the sequence's own next steps.
template <typename T>
LossStats accumulate_gradients(const ModelParams<T>& params,
                               const tokens::InterleavedSequence& sequence,
                               const tokens::StepSequence& targets, double scale,
                               std::vector<T>& grads);

// Gradient of the mean masked loss.
template <typename T>
std::vector<T> grad(const ModelParams<T>& params, const tokens::InterleavedSequence& sequence);

// Key/value-cached single-step decoder. Produces logits bitwise identical to
// the corresponding rows of forward().
template <typename T>
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ModelParams<T>& params, std::size_t context_len);

  // Appends one step; returns its logits, K x total_vocab, lane-major.
  std::span<const T> push(std::span<const std::int32_t> step);
  std::size_t length() const { return length_; }

 private:
  const ModelParams<T>& params_;
  std::size_t context_len_;
  std::size_t length_ = 0;
  std::vector<std::vector<T>> keys_, values_;
  std::vector<T> x_, h_, qkv_, att_, tmp_, ff_, ff_act_, probs_, logits_;
};

template <typename T>
codec::TokenGrid generate(const ModelParams<T>& params, const tokens::StepSequence& prefix,
                          std::size_t n_frames, const SamplingConfig& sampling);

// "STGM" checkpoint: u32 d_model, n_layers, n_heads, d_ff, max_seq_len,
// num_codebooks, audio_vocab, total_vocab, position_mode, parameter count,
// then float32 values in layout order. Little-endian.
void save(const ModelParams<float>& params, const std::filesystem::path& path);
ModelParams<float> load(const std::filesystem::path& path);

}  // namespace stage::model
