#include <vector>

#include "doctest.h"
#include "stage/error.hpp"
#include "stage/tokens.hpp"
#include "test_util.hpp"

using namespace stage;
using tokens::Vocabulary;

TEST_CASE("vocabulary partition") {
  Vocabulary v{256};
  CHECK(v.empty() == 256);
  CHECK(v.pad() == 257);
  CHECK(v.context() == 258);
  CHECK(v.total() == 259);
  CHECK(v.is_audio(255));
  CHECK_FALSE(v.is_audio(v.empty()));
  CHECK_FALSE(v.is_audio(-1));
}

TEST_CASE("delay pattern small cases") {
  Vocabulary v{10};
  const std::int32_t E = v.empty();
  codec::TokenGrid g(2, std::vector<std::int32_t>{1, 2, 3, 4});  // [[1,2],[3,4]]
  auto steps = tokens::apply_delay(g, v);
  CHECK(steps == tokens::StepSequence(2, {1, E, 3, 2, E, 4}));
  CHECK(tokens::invert_delay(steps, 2, v) == g);

  codec::TokenGrid single(1, std::vector<std::int32_t>{5, 6, 7});
  CHECK(tokens::apply_delay(single, v).ids() == single.ids());

  codec::TokenGrid diag(4, std::vector<std::int32_t>{1, 2, 3, 4});
  auto d = tokens::apply_delay(diag, v);
  REQUIRE(d.size() == 4);
  for (std::size_t p = 0; p < 4; ++p) {
    for (std::size_t i = 0; i < 4; ++i) CHECK((d.at(p, i) != E) == (p == i));
  }
  CHECK(tokens::apply_delay(codec::TokenGrid(0, 3), v).size() == 0);
}

TEST_CASE("empty grids round trip through zero steps") {
  Vocabulary v{10};
  for (std::size_t lanes : {1, 2, 4}) {
    codec::TokenGrid empty(0, lanes);
    auto steps = tokens::apply_delay(empty, v);
    CHECK(steps.size() == 0);
    CHECK(tokens::invert_delay(steps, lanes, v) == empty);
  }
}

TEST_CASE("invert_delay rejects malformed sequences") {
  Vocabulary v{10};
  const std::int32_t E = v.empty();
  CHECK_THROWS_AS(tokens::invert_delay(tokens::StepSequence(2, {1, 2, 3, 2, E, 4}), 2, v), MalformedSequence);
  CHECK_THROWS_AS(tokens::invert_delay(tokens::StepSequence(2, {1, E, E, 2, E, 4}), 2, v), MalformedSequence);
  CHECK_THROWS_AS(tokens::invert_delay(tokens::StepSequence(4, {1, E, E, E}), 4, v), MalformedSequence);
}

TEST_CASE("round trip and positional law on random grids") {
  Rng rng(17);
  Vocabulary v{64};
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t lanes = std::vector<std::size_t>{1, 2, 4}[uniform_index(rng, 3)];
    const std::size_t frames = 1 + uniform_index(rng, 64);
    auto g = test::random_grid(rng, frames, lanes, 64);
    auto steps = tokens::apply_delay(g, v);
    CHECK(steps.size() == frames + lanes - 1);
    CHECK(tokens::invert_delay(steps, lanes, v) == g);
    for (int probe = 0; probe < 5; ++probe) {
      const std::size_t p = uniform_index(rng, steps.size()), i = uniform_index(rng, lanes);
      const bool inside = p >= i && p - i < frames;
      CHECK(steps.at(p, i) == (inside ? g.at(p - i, i) : v.empty()));
    }
  }
}

TEST_CASE("training sequence layout and mask") {
  Vocabulary v{16};
  Rng rng(3);
  auto ctx = test::random_grid(rng, 2, 2, 16);
  auto tgt = test::random_grid(rng, 3, 2, 16);
  auto seq = tokens::build_training_sequence(ctx, tgt, v);
  CHECK(seq.steps.size() == 8);
  CHECK(seq.context_len == 4);
  CHECK(seq.target_count() == 6);
  CHECK(seq.steps.at(3, 0) == v.context());
  CHECK(seq.steps.at(3, 1) == v.context());
  for (std::size_t p = 0; p < seq.context_len; ++p) {
    for (std::size_t i = 0; i < 2; ++i) CHECK_FALSE(seq.masked_in(p, i));
  }
  for (std::size_t p = seq.context_len; p < seq.steps.size(); ++p) {
    for (std::size_t i = 0; i < 2; ++i) CHECK(seq.masked_in(p, i) == v.is_audio(seq.steps.at(p, i)));
  }

  auto empty_ctx = tokens::build_training_sequence(codec::TokenGrid(0, 2), tgt, v);
  CHECK(empty_ctx.context_len == 1);
  CHECK(empty_ctx.steps.size() == 1 + 4);
  CHECK(empty_ctx.steps.at(0, 1) == v.context());

  CHECK_THROWS_AS(tokens::build_training_sequence(test::random_grid(rng, 2, 3, 16), tgt, v), InvalidArgument);
}

TEST_CASE("mask soundness on random sequences") {
  Vocabulary v{32};
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t lanes = 1 + uniform_index(rng, 4);
    auto ctx = test::random_grid(rng, uniform_index(rng, 10), lanes, 32);
    auto tgt = test::random_grid(rng, 1 + uniform_index(rng, 10), lanes, 32);
    auto seq = tokens::build_training_sequence(ctx, tgt, v);
    CHECK(seq.loss_mask.size() == seq.steps.ids().size());
    std::size_t count = 0;
    for (std::size_t p = 0; p < seq.steps.size(); ++p) {
      for (std::size_t i = 0; i < lanes; ++i) {
        const bool expected = p >= seq.context_len && v.is_audio(seq.steps.at(p, i));
        CHECK(seq.masked_in(p, i) == expected);
        count += expected;
      }
    }
    CHECK(count == tgt.num_frames() * lanes);
  }
}

TEST_CASE("inference prefix length") {
  Vocabulary v{256};
  CHECK(tokens::build_inference_prefix(codec::TokenGrid(0, 4), 4, v).size() == 1);
  Rng rng(1);
  auto ctx = test::random_grid(rng, 312, 4, 256);  // 2.5 s at 125 frames/s, truncated
  auto prefix = tokens::build_inference_prefix(ctx, 4, v);
  CHECK(prefix.size() == 316);
  auto seq = tokens::build_training_sequence(ctx, test::random_grid(rng, 3, 4, 256), v);
  CHECK(seq.steps.slice(0, seq.context_len) == prefix);
}

TEST_CASE("plain sequence masks every audio id after the first step") {
  Vocabulary v{16};
  Rng rng(2);
  auto g = test::random_grid(rng, 5, 3, 16);
  auto seq = tokens::build_plain_sequence(g, v);
  CHECK(seq.context_len == 0);
  CHECK(seq.steps == tokens::apply_delay(g, v));
}
