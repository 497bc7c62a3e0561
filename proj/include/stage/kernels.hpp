#pragma once

// Dense inner loops shared by the transformer and the codec.
//
// Every kernel exists twice: `serial::` is the reference implementation and
// `parallel::` distributes independent rows (or heads, or output neurons)
// across OpenMP threads. Both call the same per-row routine, so results are
// bitwise identical regardless of thread count. The model and codec call the
// parallel versions; tests compare the two.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>

namespace stage::kernels {

// Fixed-order dot product: eight interleaved partial sums, combined pairwise.
// The compiler vectorizes this without needing reassociation flags.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) +
         ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

// y += alpha * x
template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
inline T squared_distance(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) {
      const T d = a[i + j] - b[i + j];
      acc[j] += d * d;
    }
  }
  T tail = 0;
  for (; i < n; ++i) tail += (a[i] - b[i]) * (a[i] - b[i]);
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) +
         ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

// One output row of y = x W^T + b. W is out x in, row-major.
template <typename T>
inline void linear_row(const T* x, std::size_t in, const T* w, const T* b,
                       std::size_t out, T* y) {
  for (std::size_t o = 0; o < out; ++o) {
    y[o] = dot(x, w + o * in, in) + (b ? b[o] : T(0));
  }
}

// Causal attention for one query against keys/values [0, n_keys).
// Keys and values are read with `stride` elements between consecutive rows.
// Writes n_keys softmax weights to `probs` and hd outputs to `out`.
template <typename T>
inline void attention_row(const T* q, const T* keys, const T* values,
                          std::size_t stride, std::size_t n_keys,
                          std::size_t hd, T scale, T* probs, T* out) {
  T max_score = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n_keys; ++j) {
    probs[j] = dot(q, keys + j * stride, hd) * scale;
    max_score = std::max(max_score, probs[j]);
  }
  T sum = 0;
  for (std::size_t j = 0; j < n_keys; ++j) {
    probs[j] = std::exp(probs[j] - max_score);
    sum += probs[j];
  }
  const T inv = T(1) / sum;
  std::fill(out, out + hd, T(0));
  for (std::size_t j = 0; j < n_keys; ++j) {
    probs[j] *= inv;
    axpy(probs[j], values + j * stride, out, hd);
  }
}

// Index of the nearest centroid under squared Euclidean distance; ties go to
// the lowest index.
template <typename T>
inline std::int32_t nearest_centroid(const T* x, const T* centroids,
                                     std::size_t count, std::size_t dim,
                                     T* best_distance) {
  std::int32_t best = 0;
  T best_d = std::numeric_limits<T>::infinity();
  for (std::size_t c = 0; c < count; ++c) {
    const T d = squared_distance(x, centroids + c * dim, dim);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::int32_t>(c);
    }
  }
  if (best_distance) *best_distance = best_d;
  return best;
}

namespace detail {

template <typename T>
inline void linear_dw_row(const T* x, const T* dy, std::size_t rows,
                          std::size_t in, std::size_t out, std::size_t o,
                          T* dw, T* db) {
  T* dw_row = dw + o * in;
  T bias_acc = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T g = dy[r * out + o];
    if (g == T(0)) continue;
    axpy(g, x + r * in, dw_row, in);
    bias_acc += g;
  }
  if (db) db[o] += bias_acc;
}

template <typename T>
inline void linear_dx_row(const T* dy_row, const T* w, std::size_t in,
                          std::size_t out, T* dx_row) {
  std::fill(dx_row, dx_row + in, T(0));
  for (std::size_t o = 0; o < out; ++o) {
    if (dy_row[o] != T(0)) axpy(dy_row[o], w + o * in, dx_row, in);
  }
}

// Backward pass of one head over all query rows. dqkv has the qkv layout.
template <typename T>
inline void attention_backward_head(const T* qkv, const T* probs,
                                    const T* dout, std::size_t rows,
                                    std::size_t d, std::size_t hd,
                                    std::size_t h, T scale, T* dqkv, T* dp) {
  const std::size_t stride = 3 * d;
  const std::size_t q_off = h * hd;
  const std::size_t k_off = d + h * hd;
  const std::size_t v_off = 2 * d + h * hd;
  for (std::size_t t = 0; t < rows; ++t) {
    const T* p = probs + t * rows;
    const T* g = dout + t * d + h * hd;
    T weighted = 0;
    for (std::size_t j = 0; j <= t; ++j) {
      dp[j] = dot(g, qkv + j * stride + v_off, hd);
      weighted += p[j] * dp[j];
      axpy(p[j], g, dqkv + j * stride + v_off, hd);
    }
    const T* q = qkv + t * stride + q_off;
    T* dq = dqkv + t * stride + q_off;
    for (std::size_t j = 0; j <= t; ++j) {
      const T ds = p[j] * (dp[j] - weighted) * scale;
      if (ds == T(0)) continue;
      axpy(ds, qkv + j * stride + k_off, dq, hd);
      axpy(ds, q, dqkv + j * stride + k_off, hd);
    }
  }
}

}  // namespace detail

namespace serial {

// y[rows x out] = x[rows x in] W^T + b
template <typename T>
void linear(const T* x, std::size_t rows, std::size_t in, const T* w,
            const T* b, std::size_t out, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    linear_row(x + r * in, in, w, b, out, y + r * out);
  }
}

// Accumulates dW and db; overwrites dx when non-null.
template <typename T>
void linear_backward(const T* x, const T* dy, const T* w, std::size_t rows,
                     std::size_t in, std::size_t out, T* dx, T* dw, T* db) {
  for (std::size_t o = 0; o < out; ++o) {
    detail::linear_dw_row(x, dy, rows, in, out, o, dw, db);
  }
  if (dx) {
    for (std::size_t r = 0; r < rows; ++r) {
      detail::linear_dx_row(dy + r * out, w, in, out, dx + r * in);
    }
  }
}

// qkv: rows x 3d, [q | k | v]; probs: heads x rows x rows (upper triangle
// untouched); out: rows x d.
template <typename T>
void causal_attention(const T* qkv, std::size_t rows, std::size_t d,
                      std::size_t heads, T* probs, T* out) {
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < rows; ++t) {
      attention_row(qkv + t * 3 * d + h * hd, qkv + d + h * hd,
                    qkv + 2 * d + h * hd, 3 * d, t + 1, hd, scale,
                    probs + (h * rows + t) * rows, out + t * d + h * hd);
    }
  }
}

// dqkv must be zero-initialized by the caller. scratch needs rows elements.
template <typename T>
void causal_attention_backward(const T* qkv, const T* probs, const T* dout,
                               std::size_t rows, std::size_t d,
                               std::size_t heads, T* dqkv, T* scratch) {
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (std::size_t h = 0; h < heads; ++h) {
    detail::attention_backward_head(qkv, probs + h * rows * rows, dout, rows,
                                    d, hd, h, scale, dqkv, scratch);
  }
}

template <typename T>
void assign_nearest(const T* points, std::size_t n, std::size_t dim,
                    const T* centroids, std::size_t count,
                    std::int32_t* labels, T* distances) {
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = nearest_centroid(points + i * dim, centroids, count, dim,
                                 distances ? distances + i : nullptr);
  }
}

}  // namespace serial

namespace parallel {

template <typename T>
void linear(const T* x, std::size_t rows, std::size_t in, const T* w,
            const T* b, std::size_t out, T* y) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (n > 16)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    linear_row(x + r * in, in, w, b, out, y + r * out);
  }
}

template <typename T>
void linear_backward(const T* x, const T* dy, const T* w, std::size_t rows,
                     std::size_t in, std::size_t out, T* dx, T* dw, T* db) {
  const auto n_out = static_cast<std::ptrdiff_t>(out);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t o = 0; o < n_out; ++o) {
    detail::linear_dw_row(x, dy, rows, in, out, static_cast<std::size_t>(o),
                          dw, db);
  }
  if (dx) {
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < n; ++r) {
      detail::linear_dx_row(dy + r * out, w, in, out, dx + r * in);
    }
  }
}

template <typename T>
void causal_attention(const T* qkv, std::size_t rows, std::size_t d,
                      std::size_t heads, T* probs, T* out) {
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto total = static_cast<std::ptrdiff_t>(heads * rows);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
    const std::size_t h = static_cast<std::size_t>(idx) / rows;
    const std::size_t t = static_cast<std::size_t>(idx) % rows;
    attention_row(qkv + t * 3 * d + h * hd, qkv + d + h * hd,
                  qkv + 2 * d + h * hd, 3 * d, t + 1, hd, scale,
                  probs + (h * rows + t) * rows, out + t * d + h * hd);
  }
}

// scratch needs heads * rows elements.
template <typename T>
void causal_attention_backward(const T* qkv, const T* probs, const T* dout,
                               std::size_t rows, std::size_t d,
                               std::size_t heads, T* dqkv, T* scratch) {
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto n_heads = static_cast<std::ptrdiff_t>(heads);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t h = 0; h < n_heads; ++h) {
    detail::attention_backward_head(qkv, probs + h * rows * rows, dout, rows,
                                    d, hd, static_cast<std::size_t>(h), scale,
                                    dqkv, scratch + h * rows);
  }
}

template <typename T>
void assign_nearest(const T* points, std::size_t n, std::size_t dim,
                    const T* centroids, std::size_t count,
                    std::int32_t* labels, T* distances) {
  const auto total = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < total; ++i) {
    labels[i] = nearest_centroid(points + i * dim, centroids, count, dim,
                                 distances ? distances + i : nullptr);
  }
}

}  // namespace parallel
}  // namespace stage::kernels
