#include <cmath>
#include <vector>

#include "doctest.h"
#include "stage/kernels.hpp"
#include "stage/rng.hpp"

using namespace stage;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(normal01(rng));
  return v;
}

}  // namespace

TEST_CASE("linear matches a direct loop and the parallel version bitwise") {
  Rng rng(1);
  const std::size_t rows = 37, in = 19, out = 23;
  auto x = random_vec(rng, rows * in), w = random_vec(rng, out * in), b = random_vec(rng, out);
  std::vector<float> ys(rows * out), yp(rows * out);
  kernels::serial::linear(x.data(), rows, in, w.data(), b.data(), out, ys.data());
  kernels::parallel::linear(x.data(), rows, in, w.data(), b.data(), out, yp.data());
  CHECK(ys == yp);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double ref = b[o];
      for (std::size_t i = 0; i < in; ++i) ref += static_cast<double>(x[r * in + i]) * w[o * in + i];
      CHECK(ys[r * out + o] == doctest::Approx(ref).epsilon(1e-5));
    }
  }
}

TEST_CASE("linear_backward serial and parallel agree bitwise") {
  Rng rng(2);
  const std::size_t rows = 29, in = 17, out = 13;
  auto x = random_vec(rng, rows * in), w = random_vec(rng, out * in), dy = random_vec(rng, rows * out);
  std::vector<float> dxs(rows * in), dxp(rows * in), dws(out * in, 0.5f), dwp(out * in, 0.5f),
      dbs(out, 0.25f), dbp(out, 0.25f);
  kernels::serial::linear_backward(x.data(), dy.data(), w.data(), rows, in, out, dxs.data(), dws.data(),
                                   dbs.data());
  kernels::parallel::linear_backward(x.data(), dy.data(), w.data(), rows, in, out, dxp.data(),
                                     dwp.data(), dbp.data());
  CHECK(dxs == dxp);
  CHECK(dws == dwp);
  CHECK(dbs == dbp);
  // Spot-check accumulation against direct sums.
  double dw00 = 0.5, db0 = 0.25;
  for (std::size_t r = 0; r < rows; ++r) {
    dw00 += static_cast<double>(dy[r * out]) * x[r * in];
    db0 += dy[r * out];
  }
  CHECK(dws[0] == doctest::Approx(dw00).epsilon(1e-5));
  CHECK(dbs[0] == doctest::Approx(db0).epsilon(1e-5));
}

TEST_CASE("causal attention matches a direct softmax and is causal") {
  Rng rng(3);
  const std::size_t rows = 11, d = 12, heads = 3, hd = d / heads;
  auto qkv = random_vec(rng, rows * 3 * d);
  std::vector<float> ps(heads * rows * rows, 0.0f), pp(heads * rows * rows, 0.0f), os(rows * d), op(rows * d);
  kernels::serial::causal_attention(qkv.data(), rows, d, heads, ps.data(), os.data());
  kernels::parallel::causal_attention(qkv.data(), rows, d, heads, pp.data(), op.data());
  CHECK(ps == pp);
  CHECK(os == op);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < rows; ++t) {
      std::vector<double> s(t + 1);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) {
          dot += static_cast<double>(qkv[t * 3 * d + h * hd + c]) * qkv[j * 3 * d + d + h * hd + c];
        }
        s[j] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, s[j]);
      }
      for (auto& v : s) z += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < hd; ++c) {
        double ref = 0.0;
        for (std::size_t j = 0; j <= t; ++j) ref += s[j] / z * qkv[j * 3 * d + 2 * d + h * hd + c];
        CHECK(os[t * d + h * hd + c] == doctest::Approx(ref).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("attention backward serial and parallel agree bitwise") {
  Rng rng(4);
  const std::size_t rows = 9, d = 8, heads = 2;
  auto qkv = random_vec(rng, rows * 3 * d), dout = random_vec(rng, rows * d);
  std::vector<float> probs(heads * rows * rows, 0.0f), out(rows * d);
  kernels::serial::causal_attention(qkv.data(), rows, d, heads, probs.data(), out.data());
  std::vector<float> ds(rows * 3 * d, 0.0f), dp(rows * 3 * d, 0.0f), scratch(heads * rows);
  kernels::serial::causal_attention_backward(qkv.data(), probs.data(), dout.data(), rows, d, heads,
                                             ds.data(), scratch.data());
  kernels::parallel::causal_attention_backward(qkv.data(), probs.data(), dout.data(), rows, d, heads,
                                               dp.data(), scratch.data());
  CHECK(ds == dp);
}

TEST_CASE("nearest centroid picks the lowest index on ties") {
  const std::vector<double> centroids = {0.0, 0.0, 1.0, 1.0, 0.0, 0.0};
  const std::vector<double> point = {0.5, 0.5};
  CHECK(kernels::nearest_centroid(point.data(), centroids.data(), std::size_t{3}, std::size_t{2}, static_cast<double*>(nullptr)) == 0);
  Rng rng(5);
  const std::size_t n = 300, dim = 6, count = 17;
  std::vector<double> pts(n * dim), cs(count * dim);
  for (auto& v : pts) v = normal01(rng);
  for (auto& v : cs) v = normal01(rng);
  std::vector<std::int32_t> ls(n), lp(n);
  std::vector<double> dsr(n), dpr(n);
  kernels::serial::assign_nearest(pts.data(), n, dim, cs.data(), count, ls.data(), dsr.data());
  kernels::parallel::assign_nearest(pts.data(), n, dim, cs.data(), count, lp.data(), dpr.data());
  CHECK(ls == lp);
  CHECK(dsr == dpr);
  for (std::size_t i = 0; i < n; ++i) {
    double best = 1e300;
    std::int32_t arg = -1;
    for (std::size_t c = 0; c < count; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += std::pow(pts[i * dim + j] - cs[c * dim + j], 2);
      if (s < best) {
        best = s;
        arg = static_cast<std::int32_t>(c);
      }
    }
    CHECK(ls[i] == arg);
  }
}
