#include "stage/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "stage/error.hpp"
#include "stage/kernels.hpp"
#include "stage/rng.hpp"

namespace stage::model {
namespace {

namespace par = kernels::parallel;

constexpr double kLayerNormEps = 1e-5;

template <typename T>
void layer_norm_row(const T* x, const T* gain, const T* bias, std::size_t d, T* y,
                    T* mean_out, T* rstd_out) {
  T mean = 0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<T>(d);
  T var = 0;
  for (std::size_t i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<T>(d);
  const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
  for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

// dx = LN'(x)^T dy; accumulates dgain, dbias.
template <typename T>
void layer_norm_backward_row(const T* x, T mean, T rstd, const T* gain, const T* dy,
                             std::size_t d, T* dx, T* dgain, T* dbias) {
  T sum_g = 0;
  T sum_gx = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T g = dy[i] * gain[i];
    sum_g += g;
    sum_gx += g * xhat;
    dgain[i] += dy[i] * xhat;
    dbias[i] += dy[i];
  }
  const T inv_d = T(1) / static_cast<T>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T g = dy[i] * gain[i];
    dx[i] = rstd * (g - sum_g * inv_d - xhat * sum_gx * inv_d);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
T gelu(T x) {
  const T u = static_cast<T>(kGeluC) * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T u = static_cast<T>(kGeluC) * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  return T(0.5) * (T(1) + th) +
         T(0.5) * x * (T(1) - th * th) * static_cast<T>(kGeluC) * (T(1) + T(3 * 0.044715) * x * x);
}

template <typename T>
void add_position(std::size_t pos, std::size_t d, T* x) {
  for (std::size_t i = 0; i < d; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i / 2 * 2) / static_cast<double>(d));
    const double angle = static_cast<double>(pos) * freq;
    x[i] += static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
  }
}

template <typename T>
void embed_row(const ModelParams<T>& p, std::span<const std::int32_t> ids, std::size_t pos,
               T* x) {
  const std::size_t d = p.config.d_model;
  std::fill(x, x + d, T(0));
  for (std::size_t k = 0; k < ids.size(); ++k) {
    kernels::axpy(T(1), p.at(p.layout.embedding(k)) + static_cast<std::size_t>(ids[k]) * d, x, d);
  }
  add_position(pos, d, x);
}

void check_steps(const ModelConfig& config, const tokens::StepSequence& steps) {
  if (steps.empty()) throw InvalidArgument("forward: empty sequence");
  if (steps.size() > config.max_seq_len) {
    throw InvalidArgument("sequence length " + std::to_string(steps.size()) +
                          " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  if (steps.lanes() != config.num_codebooks) throw InvalidArgument("lane count mismatch");
  for (std::int32_t id : steps.ids()) {
    if (id < 0 || static_cast<std::uint32_t>(id) >= config.total_vocab()) {
      throw InvalidArgument("token id out of range: " + std::to_string(id));
    }
  }
}

// Activations of one forward pass, kept for the backward pass.
template <typename T>
struct Pass {
  struct LayerActs {
    std::vector<T> ln1, mean1, rstd1, qkv, probs, att, mid, ln2, mean2, rstd2, ff, ff_act;
  };

  const ModelParams<T>& p;
  std::size_t n, d, dff, heads, lanes, vocab, layers;
  std::vector<std::vector<T>> xs;  // residual stream, layers + 1 entries
  std::vector<LayerActs> acts;
  std::vector<T> lnf, meanf, rstdf;
  Logits<T> logits;

  Pass(const ModelParams<T>& params, std::size_t rows)
      : p(params),
        n(rows),
        d(params.config.d_model),
        dff(params.config.d_ff),
        heads(params.config.n_heads),
        lanes(params.config.num_codebooks),
        vocab(params.config.total_vocab()),
        layers(params.config.n_layers) {}

  void run(const tokens::StepSequence& steps, std::size_t context_len) {
    const auto& L = p.layout;
    const PositionMode mode = p.config.position_mode;
    xs.assign(layers + 1, std::vector<T>(n * d));
    acts.resize(layers);
    for (std::size_t t = 0; t < n; ++t) {
      embed_row(p, steps.step(t), position_of(t, context_len, mode), xs[0].data() + t * d);
    }
    std::vector<T> tmp(n * d);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& w = L.layer(l);
      auto& a = acts[l];
      const T* x = xs[l].data();
      a.ln1.resize(n * d);
      a.mean1.resize(n);
      a.rstd1.resize(n);
      for (std::size_t t = 0; t < n; ++t) {
        layer_norm_row(x + t * d, p.at(w.ln1_gain), p.at(w.ln1_bias), d, a.ln1.data() + t * d,
                       &a.mean1[t], &a.rstd1[t]);
      }
      a.qkv.resize(n * 3 * d);
      par::linear(a.ln1.data(), n, d, p.at(w.w_qkv), p.at(w.b_qkv), 3 * d, a.qkv.data());
      a.probs.assign(heads * n * n, T(0));
      a.att.resize(n * d);
      par::causal_attention(a.qkv.data(), n, d, heads, a.probs.data(), a.att.data());
      par::linear(a.att.data(), n, d, p.at(w.w_out), p.at(w.b_out), d, tmp.data());
      a.mid.resize(n * d);
      for (std::size_t i = 0; i < n * d; ++i) a.mid[i] = x[i] + tmp[i];
      a.ln2.resize(n * d);
      a.mean2.resize(n);
      a.rstd2.resize(n);
      for (std::size_t t = 0; t < n; ++t) {
        layer_norm_row(a.mid.data() + t * d, p.at(w.ln2_gain), p.at(w.ln2_bias), d,
                       a.ln2.data() + t * d, &a.mean2[t], &a.rstd2[t]);
      }
      a.ff.resize(n * dff);
      a.ff_act.resize(n * dff);
      par::linear(a.ln2.data(), n, d, p.at(w.w_in), p.at(w.b_in), dff, a.ff.data());
      for (std::size_t i = 0; i < n * dff; ++i) a.ff_act[i] = gelu(a.ff[i]);
      par::linear(a.ff_act.data(), n, dff, p.at(w.w_ff_out), p.at(w.b_ff_out), d, tmp.data());
      T* out = xs[l + 1].data();
      for (std::size_t i = 0; i < n * d; ++i) out[i] = a.mid[i] + tmp[i];
    }
    lnf.resize(n * d);
    meanf.resize(n);
    rstdf.resize(n);
    const T* top = xs[layers].data();
    for (std::size_t t = 0; t < n; ++t) {
      layer_norm_row(top + t * d, p.at(L.final_gain()), p.at(L.final_bias()), d,
                     lnf.data() + t * d, &meanf[t], &rstdf[t]);
    }
    logits.steps = n;
    logits.lanes = lanes;
    logits.vocab = vocab;
    logits.values.resize(lanes * n * vocab);
    for (std::size_t k = 0; k < lanes; ++k) {
      par::linear(lnf.data(), n, d, p.at(L.head_weight(k)), p.at(L.head_bias(k)), vocab,
                  logits.values.data() + k * n * vocab);
    }
  }

  // dlogits uses the lane-major logits layout.
  void backward(const tokens::StepSequence& steps, const std::vector<T>& dlogits,
                std::vector<T>& g) {
    const auto& L = p.layout;
    std::vector<T> dx(n * d, T(0));
    std::vector<T> tmp(n * d);
    std::vector<T> dln(n * d, T(0));
    for (std::size_t k = 0; k < lanes; ++k) {
      par::linear_backward(lnf.data(), dlogits.data() + k * n * vocab, p.at(L.head_weight(k)), n,
                           d, vocab, tmp.data(), g.data() + L.head_weight(k),
                           g.data() + L.head_bias(k));
      for (std::size_t i = 0; i < n * d; ++i) dln[i] += tmp[i];
    }
    const T* top = xs[layers].data();
    for (std::size_t t = 0; t < n; ++t) {
      layer_norm_backward_row(top + t * d, meanf[t], rstdf[t], p.at(L.final_gain()),
                              dln.data() + t * d, d, dx.data() + t * d,
                              g.data() + L.final_gain(), g.data() + L.final_bias());
    }

    std::vector<T> dh(n * dff);
    std::vector<T> dmid(n * d);
    std::vector<T> dqkv(n * 3 * d);
    std::vector<T> scratch(heads * n);
    for (std::size_t l = layers; l-- > 0;) {
      const auto& w = L.layer(l);
      auto& a = acts[l];
      // MLP
      par::linear_backward(a.ff_act.data(), dx.data(), p.at(w.w_ff_out), n, dff, d,
                           dh.data(), g.data() + w.w_ff_out, g.data() + w.b_ff_out);
      for (std::size_t i = 0; i < n * dff; ++i) dh[i] *= gelu_grad(a.ff[i]);
      par::linear_backward(a.ln2.data(), dh.data(), p.at(w.w_in), n, d, dff, dln.data(),
                           g.data() + w.w_in, g.data() + w.b_in);
      for (std::size_t t = 0; t < n; ++t) {
        layer_norm_backward_row(a.mid.data() + t * d, a.mean2[t], a.rstd2[t], p.at(w.ln2_gain),
                                dln.data() + t * d, d, tmp.data() + t * d,
                                g.data() + w.ln2_gain, g.data() + w.ln2_bias);
      }
      for (std::size_t i = 0; i < n * d; ++i) dmid[i] = dx[i] + tmp[i];
      // Attention
      par::linear_backward(a.att.data(), dmid.data(), p.at(w.w_out), n, d, d, tmp.data(),
                           g.data() + w.w_out, g.data() + w.b_out);
      std::fill(dqkv.begin(), dqkv.end(), T(0));
      par::causal_attention_backward(a.qkv.data(), a.probs.data(), tmp.data(), n, d, heads,
                                     dqkv.data(), scratch.data());
      par::linear_backward(a.ln1.data(), dqkv.data(), p.at(w.w_qkv), n, d, 3 * d, dln.data(),
                           g.data() + w.w_qkv, g.data() + w.b_qkv);
      const T* x = xs[l].data();
      for (std::size_t t = 0; t < n; ++t) {
        layer_norm_backward_row(x + t * d, a.mean1[t], a.rstd1[t], p.at(w.ln1_gain),
                                dln.data() + t * d, d, tmp.data() + t * d,
                                g.data() + w.ln1_gain, g.data() + w.ln1_bias);
      }
      for (std::size_t i = 0; i < n * d; ++i) dx[i] = dmid[i] + tmp[i];
    }
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t k = 0; k < lanes; ++k) {
        const auto id = static_cast<std::size_t>(steps.at(t, k));
        kernels::axpy(T(1), dx.data() + t * d, g.data() + L.embedding(k) + id * d, d);
      }
    }
  }
};

std::size_t loss_target_count(const tokens::InterleavedSequence& seq) {
  const std::size_t lanes = seq.steps.lanes();
  std::size_t count = 0;
  for (std::size_t i = lanes; i < seq.loss_mask.size(); ++i) count += seq.loss_mask[i];
  return count;
}

void check_sequence(const tokens::InterleavedSequence& seq) {
  if (seq.loss_mask.size() != seq.steps.ids().size()) {
    throw InvalidArgument("loss mask does not match the sequence shape");
  }
}

// Cross-entropy of one logits row against `target`; optionally writes
// scale * (softmax - onehot) into drow.
template <typename T>
double cross_entropy(std::span<const T> row, std::int32_t target, double scale, T* drow) {
  double max_v = -1e300;
  for (T v : row) max_v = std::max(max_v, static_cast<double>(v));
  double sum = 0.0;
  for (T v : row) sum += std::exp(static_cast<double>(v) - max_v);
  const double lse = max_v + std::log(sum);
  if (drow) {
    for (std::size_t v = 0; v < row.size(); ++v) {
      const double prob = std::exp(static_cast<double>(row[v]) - lse);
      drow[v] = static_cast<T>(scale * (prob - (static_cast<std::int32_t>(v) == target ? 1.0 : 0.0)));
    }
  }
  return lse - static_cast<double>(row[static_cast<std::size_t>(target)]);
}

template <typename T>
std::int32_t sample_lane(std::span<const T> logits, std::int32_t audio_vocab,
                         const SamplingConfig& cfg, Rng& rng) {
  std::vector<std::int32_t> order(static_cast<std::size_t>(audio_vocab));
  std::iota(order.begin(), order.end(), 0);
  const auto k = std::min<std::size_t>(cfg.top_k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::int32_t a, std::int32_t b) {
                      if (logits[a] != logits[b]) return logits[a] > logits[b];
                      return a < b;
                    });
  if (k == 1) return order[0];
  const double top = static_cast<double>(logits[order[0]]);
  std::vector<double> weights(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    weights[i] = std::exp((static_cast<double>(logits[order[i]]) - top) / cfg.temperature);
    total += weights[i];
  }
  const double u = uniform01(rng) * total;
  double run = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    run += weights[i];
    if (u < run) return order[i];
  }
  return order[k - 1];
}

}  // namespace

std::string to_string(PositionMode mode) {
  return mode == PositionMode::Shared ? "shared" : "aligned";
}

PositionMode parse_position_mode(const std::string& name) {
  if (name == "shared") return PositionMode::Shared;
  if (name == "aligned") return PositionMode::Aligned;
  throw InvalidArgument("unknown position mode: " + name);
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0) {
    throw InvalidArgument("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw InvalidArgument("d_model must be divisible by n_heads");
  if (num_codebooks == 0) throw InvalidArgument("num_codebooks must be positive");
  if (audio_vocab < 2) throw InvalidArgument("audio_vocab must be at least 2");
  if (position_mode != PositionMode::Shared && position_mode != PositionMode::Aligned) {
    throw InvalidArgument("invalid position mode");
  }
}

void SamplingConfig::validate(std::uint32_t audio_vocab) const {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  if (top_k < 1 || top_k > audio_vocab) throw InvalidArgument("top_k must be in [1, V]");
}

std::size_t position_of(std::size_t t, std::size_t context_len, PositionMode mode) {
  // Aligned: the CONTEXT step restarts the count at 0, so every later step
  // shares its code with the context step holding the frame it predicts.
  if (mode == PositionMode::Aligned && context_len > 0 && t + 1 >= context_len) return t + 1 - context_len;
  return t;
}

ParamLayout::ParamLayout(const ModelConfig& c) : d_model_(c.d_model), context_id_(c.audio_vocab + 2) {
  c.validate();
  const std::size_t d = c.d_model;
  const std::size_t vocab = c.total_vocab();
  for (std::size_t k = 0; k < c.num_codebooks; ++k) {
    embeddings_.push_back(add("embedding." + std::to_string(k), vocab * d));
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layer." + std::to_string(l) + ".";
    Layer w{};
    w.ln1_gain = add(pre + "ln1.gain", d);
    w.ln1_bias = add(pre + "ln1.bias", d);
    w.w_qkv = add(pre + "attn.w_qkv", 3 * d * d);
    w.b_qkv = add(pre + "attn.b_qkv", 3 * d);
    w.w_out = add(pre + "attn.w_out", d * d);
    w.b_out = add(pre + "attn.b_out", d);
    w.ln2_gain = add(pre + "ln2.gain", d);
    w.ln2_bias = add(pre + "ln2.bias", d);
    w.w_in = add(pre + "mlp.w_in", std::size_t{c.d_ff} * d);
    w.b_in = add(pre + "mlp.b_in", c.d_ff);
    w.w_ff_out = add(pre + "mlp.w_out", d * c.d_ff);
    w.b_ff_out = add(pre + "mlp.b_out", d);
    layers_.push_back(w);
  }
  final_gain_ = add("ln_final.gain", d);
  final_bias_ = add("ln_final.bias", d);
  for (std::size_t k = 0; k < c.num_codebooks; ++k) {
    head_weights_.push_back(add("head." + std::to_string(k) + ".weight", vocab * d));
    head_biases_.push_back(add("head." + std::to_string(k) + ".bias", vocab));
  }
}

std::size_t ParamLayout::add(const std::string& name, std::size_t size) {
  tensors_.push_back({name, total_, size});
  total_ += size;
  return total_ - size;
}

std::vector<std::uint8_t> ParamLayout::context_row_mask() const {
  std::vector<std::uint8_t> mask(total_, 0);
  for (std::size_t off : embeddings_) {
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(off + std::size_t{context_id_} * d_model_),
                d_model_, 1);
  }
  return mask;
}

template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<T> p(config);
  Rng rng(seed);
  const double d = config.d_model;
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (const auto& slot : p.layout.tensors()) {
    const std::string& name = slot.name;
    auto ends_with = [&](const char* suffix) {
      const std::size_t n = std::strlen(suffix);
      return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
    };
    double stddev = 0.0;
    double constant = 0.0;
    if (ends_with(".gain")) {
      constant = 1.0;
    } else if (name.rfind("embedding.", 0) == 0) {
      stddev = 0.5;
    } else if (ends_with("w_qkv") || ends_with("mlp.w_in")) {
      stddev = 0.5 / std::sqrt(d);
    } else if (ends_with("attn.w_out")) {
      stddev = 0.5 / std::sqrt(d) * residual_scale;
    } else if (ends_with("mlp.w_out")) {
      stddev = 0.5 / std::sqrt(static_cast<double>(config.d_ff)) * residual_scale;
    } else if (ends_with(".weight")) {
      stddev = 0.02;
    }
    for (std::size_t i = 0; i < slot.size; ++i) {
      p.values[slot.offset + i] =
          static_cast<T>(stddev > 0.0 ? stddev * normal01(rng) : constant);
    }
  }
  return p;
}

template <typename T>
Logits<T> forward(const ModelParams<T>& params, const tokens::StepSequence& steps,
                  std::size_t context_len) {
  check_steps(params.config, steps);
  Pass<T> pass(params, steps.size());
  pass.run(steps, context_len);
  return std::move(pass.logits);
}

template <typename T>
double loss(const Logits<T>& logits, const tokens::InterleavedSequence& seq) {
  check_sequence(seq);
  if (logits.steps != seq.steps.size() || logits.lanes != seq.steps.lanes()) {
    throw InvalidArgument("logits shape does not match the sequence");
  }
  LossStats stats;
  for (std::size_t t = 0; t + 1 < logits.steps; ++t) {
    for (std::size_t i = 0; i < logits.lanes; ++i) {
      if (!seq.masked_in(t + 1, i)) continue;
      stats.sum += cross_entropy(logits.at(t, i), seq.steps.at(t + 1, i), 0.0,
                                 static_cast<T*>(nullptr));
      ++stats.count;
    }
  }
  if (stats.count == 0) throw UndefinedLoss("loss mask selects no targets");
  return stats.mean();
}

template <typename T>
LossStats accumulate_gradients(const ModelParams<T>& params,
                               const tokens::InterleavedSequence& seq, double scale,
                               std::vector<T>& grads) {
  return accumulate_gradients(params, seq, seq.steps, scale, grads);
}

template <typename T>
LossStats accumulate_gradients(const ModelParams<T>& params,
                               const tokens::InterleavedSequence& seq,
                               const tokens::StepSequence& targets, double scale,
                               std::vector<T>& grads) {
  check_sequence(seq);
  if (targets.lanes() != seq.steps.lanes() || targets.size() != seq.steps.size()) {
    throw InvalidArgument("target sequence does not match the input shape");
  }
  check_steps(params.config, seq.steps);
  if (grads.size() != params.values.size()) grads.assign(params.values.size(), T(0));
  Pass<T> pass(params, seq.steps.size());
  pass.run(seq.steps, seq.context_len);
  const auto& logits = pass.logits;
  std::vector<T> dlogits(logits.values.size(), T(0));
  LossStats stats;
  for (std::size_t t = 0; t + 1 < logits.steps; ++t) {
    for (std::size_t i = 0; i < logits.lanes; ++i) {
      if (!seq.masked_in(t + 1, i)) continue;
      T* drow = dlogits.data() + (i * logits.steps + t) * logits.vocab;
      stats.sum += cross_entropy(logits.at(t, i), targets.at(t + 1, i), scale, drow);
      ++stats.count;
    }
  }
  if (stats.count == 0) throw UndefinedLoss("loss mask selects no targets");
  pass.backward(seq.steps, dlogits, grads);
  return stats;
}

template <typename T>
std::vector<T> grad(const ModelParams<T>& params, const tokens::InterleavedSequence& seq) {
  check_sequence(seq);
  const std::size_t count = loss_target_count(seq);
  if (count == 0) throw UndefinedLoss("loss mask selects no targets");
  std::vector<T> grads(params.values.size(), T(0));
  accumulate_gradients(params, seq, 1.0 / static_cast<double>(count), grads);
  return grads;
}

template <typename T>
IncrementalDecoder<T>::IncrementalDecoder(const ModelParams<T>& params, std::size_t context_len)
    : params_(params), context_len_(context_len) {
  const auto& c = params.config;
  keys_.assign(c.n_layers, std::vector<T>(std::size_t{c.max_seq_len} * c.d_model));
  values_.assign(c.n_layers, std::vector<T>(std::size_t{c.max_seq_len} * c.d_model));
  x_.resize(c.d_model);
  h_.resize(c.d_model);
  qkv_.resize(3 * std::size_t{c.d_model});
  att_.resize(c.d_model);
  tmp_.resize(c.d_model);
  ff_.resize(c.d_ff);
  ff_act_.resize(c.d_ff);
  probs_.resize(c.max_seq_len);
  logits_.resize(std::size_t{c.num_codebooks} * c.total_vocab());
}

template <typename T>
std::span<const T> IncrementalDecoder<T>::push(std::span<const std::int32_t> step) {
  const auto& c = params_.config;
  const auto& L = params_.layout;
  if (length_ >= c.max_seq_len) throw InvalidArgument("decoder exceeded max_seq_len");
  if (step.size() != c.num_codebooks) throw InvalidArgument("step lane count mismatch");
  for (std::int32_t id : step) {
    if (id < 0 || static_cast<std::uint32_t>(id) >= c.total_vocab()) {
      throw InvalidArgument("token id out of range");
    }
  }
  const std::size_t d = c.d_model;
  const std::size_t dff = c.d_ff;
  const std::size_t heads = c.n_heads;
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const std::size_t t = length_;
  const auto& p = params_;

  embed_row(p, step, position_of(t, context_len_, c.position_mode), x_.data());
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& w = L.layer(l);
    layer_norm_row(x_.data(), p.at(w.ln1_gain), p.at(w.ln1_bias), d, h_.data(),
                   static_cast<T*>(nullptr), static_cast<T*>(nullptr));
    kernels::linear_row(h_.data(), d, p.at(w.w_qkv), p.at(w.b_qkv), 3 * d, qkv_.data());
    std::copy_n(qkv_.data() + d, d, keys_[l].data() + t * d);
    std::copy_n(qkv_.data() + 2 * d, d, values_[l].data() + t * d);
    for (std::size_t h = 0; h < heads; ++h) {
      kernels::attention_row(qkv_.data() + h * hd, keys_[l].data() + h * hd,
                             values_[l].data() + h * hd, d, t + 1, hd, scale, probs_.data(),
                             att_.data() + h * hd);
    }
    kernels::linear_row(att_.data(), d, p.at(w.w_out), p.at(w.b_out), d, tmp_.data());
    for (std::size_t i = 0; i < d; ++i) x_[i] = x_[i] + tmp_[i];
    layer_norm_row(x_.data(), p.at(w.ln2_gain), p.at(w.ln2_bias), d, h_.data(),
                   static_cast<T*>(nullptr), static_cast<T*>(nullptr));
    kernels::linear_row(h_.data(), d, p.at(w.w_in), p.at(w.b_in), dff, ff_.data());
    for (std::size_t i = 0; i < dff; ++i) ff_act_[i] = gelu(ff_[i]);
    kernels::linear_row(ff_act_.data(), dff, p.at(w.w_ff_out), p.at(w.b_ff_out), d, tmp_.data());
    for (std::size_t i = 0; i < d; ++i) x_[i] = x_[i] + tmp_[i];
  }
  layer_norm_row(x_.data(), p.at(L.final_gain()), p.at(L.final_bias()), d, h_.data(),
                 static_cast<T*>(nullptr), static_cast<T*>(nullptr));
  const std::size_t vocab = c.total_vocab();
  for (std::size_t k = 0; k < c.num_codebooks; ++k) {
    kernels::linear_row(h_.data(), d, p.at(L.head_weight(k)), p.at(L.head_bias(k)), vocab,
                        logits_.data() + k * vocab);
  }
  ++length_;
  return logits_;
}

template <typename T>
codec::TokenGrid generate(const ModelParams<T>& params, const tokens::StepSequence& prefix,
                          std::size_t n_frames, const SamplingConfig& sampling) {
  const auto& c = params.config;
  sampling.validate(c.audio_vocab);
  const std::size_t lanes = c.num_codebooks;
  if (n_frames == 0) return codec::TokenGrid(0, lanes);
  if (prefix.empty()) throw InvalidArgument("generate: empty prefix");
  if (prefix.lanes() != lanes) throw InvalidArgument("generate: prefix lane count mismatch");
  const std::size_t region = n_frames + lanes - 1;
  if (prefix.size() + region > c.max_seq_len) {
    throw InvalidArgument("generate: prefix plus generation exceeds max_seq_len");
  }
  const auto vocab = c.vocabulary();
  IncrementalDecoder<T> decoder(params, prefix.size());
  std::span<const T> logits;
  for (std::size_t p = 0; p < prefix.size(); ++p) logits = decoder.push(prefix.step(p));

  Rng rng(sampling.seed);
  tokens::StepSequence generated(lanes);
  std::vector<std::int32_t> step(lanes);
  const std::size_t total_vocab = c.total_vocab();
  for (std::size_t g = 0; g < region; ++g) {
    for (std::size_t i = 0; i < lanes; ++i) {
      const bool inside = g >= i && g - i < n_frames;
      step[i] = inside ? sample_lane(logits.subspan(i * total_vocab, total_vocab),
                                     vocab.audio_vocab, sampling, rng)
                       : vocab.empty();
    }
    generated.push_back(step);
    if (g + 1 < region) logits = decoder.push(step);
  }
  return tokens::invert_delay(generated, lanes, vocab);
}

void save(const ModelParams<float>& params, const std::filesystem::path& path) {
  const auto& c = params.config;
  std::string out = "STGM";
  auto put = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(c.d_model);
  put(c.n_layers);
  put(c.n_heads);
  put(c.d_ff);
  put(c.max_seq_len);
  put(c.num_codebooks);
  put(c.audio_vocab);
  put(c.total_vocab());
  put(static_cast<std::uint32_t>(c.position_mode));
  put(static_cast<std::uint32_t>(params.values.size()));
  for (float v : params.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put(bits);
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw FormatError(path.string() + ": cannot open for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw FormatError(path.string() + ": write failed");
}

ModelParams<float> load(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError(path.string() + ": cannot open model checkpoint");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(file)),
                                         std::istreambuf_iterator<char>());
  constexpr std::size_t kHeader = 44;
  if (bytes.size() < kHeader || std::memcmp(bytes.data(), "STGM", 4) != 0) {
    throw FormatError(path.string() + ": not a model checkpoint");
  }
  auto get = [&](std::size_t off) {
    return std::uint32_t{bytes[off]} | (std::uint32_t{bytes[off + 1]} << 8) |
           (std::uint32_t{bytes[off + 2]} << 16) | (std::uint32_t{bytes[off + 3]} << 24);
  };
  ModelConfig c;
  c.d_model = get(4);
  c.n_layers = get(8);
  c.n_heads = get(12);
  c.d_ff = get(16);
  c.max_seq_len = get(20);
  c.num_codebooks = get(24);
  c.audio_vocab = get(28);
  const std::uint32_t total_vocab = get(32);
  const std::uint32_t mode = get(36);
  const std::uint32_t count = get(40);
  if (total_vocab != c.audio_vocab + 3) throw FormatError(path.string() + ": vocabulary mismatch");
  if (mode > 1) throw FormatError(path.string() + ": unknown position mode");
  c.position_mode = static_cast<PositionMode>(mode);
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  ModelParams<float> params(c);
  if (count != params.values.size() || bytes.size() != kHeader + 4 * std::size_t{count}) {
    throw FormatError(path.string() + ": parameter count mismatch");
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = get(kHeader + 4 * i);
    std::memcpy(&params.values[i], &bits, 4);
  }
  return params;
}

#define STAGE_INSTANTIATE(T)                                                                 \
  template ModelParams<T> init_model<T>(const ModelConfig&, std::uint64_t);                  \
  template Logits<T> forward<T>(const ModelParams<T>&, const tokens::StepSequence&,          \
                                std::size_t);                                                \
  template double loss<T>(const Logits<T>&, const tokens::InterleavedSequence&);             \
  template LossStats accumulate_gradients<T>(const ModelParams<T>&,                          \
                                             const tokens::InterleavedSequence&, double,     \
                                             std::vector<T>&);                               \
  template LossStats accumulate_gradients<T>(const ModelParams<T>&,                          \
                                             const tokens::InterleavedSequence&,             \
                                             const tokens::StepSequence&, double,            \
                                             std::vector<T>&);                               \
  template std::vector<T> grad<T>(const ModelParams<T>&, const tokens::InterleavedSequence&); \
  template class IncrementalDecoder<T>;                                                      \
  template codec::TokenGrid generate<T>(const ModelParams<T>&, const tokens::StepSequence&,  \
                                        std::size_t, const SamplingConfig&);

STAGE_INSTANTIATE(float)
STAGE_INSTANTIATE(double)

#undef STAGE_INSTANTIATE

}  // namespace stage::model
