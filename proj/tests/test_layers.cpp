#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "mime/layers.hpp"
#include "mime/optim.hpp"

using namespace mime;
using Catch::Approx;
using D = double;

namespace {

Tensor<D> probe(Tape<D>& t, const Tensor<D>& y, uint64_t salt = 1) {
  Rng rng(salt);
  std::vector<D> w(static_cast<size_t>(y.shape().numel()));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return reduce_sum(mul(y, t.input(y.shape(), w)));
}

// Some directions have an exactly-zero true gradient (a key-projection bias
// shifts every attention score in a row equally, and softmax ignores row
// shifts), so both sides of the comparison are pure rounding noise around
// 1e-12. The 1e-6 floor keeps those 0-vs-0 directions from dominating the
// relative error; real gradients in these tests are orders larger.
GradCheckResult fd(ParameterStore<D>& params,
                   const std::function<Tensor<D>(Tape<D>&)>& build) {
  return grad_check(params, std::function<D()>([&]() {
                      Tape<D> t;
                      Tensor<D> loss = build(t);
                      const D v = loss.item();
                      t.backward(loss);
                      return v;
                    }),
                    1e-5, 1e-6);
}

std::vector<D> materialize(std::span<const D> s) { return {s.begin(), s.end()}; }

std::vector<D> random_values(Shape sh, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<D> v(static_cast<size_t>(sh.numel()));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("attention masks") {
  AttentionMask all = AttentionMask::all_visible(2, 3);
  CHECK(all.keep == std::vector<uint8_t>{1, 1, 1, 1, 1, 1});
  CHECK_FALSE(all.causal);

  AttentionMask causal = AttentionMask::make_causal(3);
  CHECK(causal.causal);
  CHECK(causal.keep == std::vector<uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});

  AttentionMask pad = AttentionMask::key_padding(2, {1, 0, 1});
  CHECK(pad.keep == std::vector<uint8_t>{1, 0, 1, 1, 0, 1});

  REQUIRE_THROWS_AS(pad.validate(2, 4), std::invalid_argument);  // wrong extents
  AttentionMask dead = AttentionMask::key_padding(1, {0, 0});
  REQUIRE_THROWS_AS(dead.validate(1, 2), std::invalid_argument);  // a query sees nothing
}

TEST_CASE("fully connected layer computes x W + b") {
  ParameterStore<D> params;
  Rng rng(1);
  FullyConnected<D> fc(params, "fc", 3, 2, rng);
  Parameter<D>& w = *params.find("fc.w");
  Parameter<D>& b = *params.find("fc.b");
  b.value = {0.5, -0.5};

  Tape<D> t;
  const std::vector<D> xv{1.0, -2.0, 0.5, 0.0, 1.0, 2.0};
  Tensor<D> x = t.input({2, 3}, xv);
  auto y = fc.forward(t, x).values();
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      D want = b.value[static_cast<size_t>(j)];
      for (int l = 0; l < 3; ++l)
        want += xv[static_cast<size_t>(i * 3 + l)] * w.value[static_cast<size_t>(l * 2 + j)];
      CHECK(y[static_cast<size_t>(i * 2 + j)] == Approx(want).epsilon(1e-12));
    }
  }

  const std::vector<D> xs = random_values({2, 3}, 7);
  auto res = fd(params, [&](Tape<D>& t2) {
    return probe(t2, fc.forward(t2, t2.input({2, 3}, xs)));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("layer norm layer starts as plain standardization") {
  ParameterStore<D> params;
  LayerNorm<D> ln(params, "ln", 4);
  const std::vector<D> xs = random_values({2, 4}, 9, -3, 3);
  Tape<D> t;
  Tensor<D> x = t.input({2, 4}, xs);
  auto with_affine = ln.forward(t, x).values();
  auto plain = layer_norm_rows(x).values();
  for (size_t i = 0; i < plain.size(); ++i) REQUIRE(with_affine[i] == plain[i]);

  auto res = fd(params, [&](Tape<D>& t2) {
    return probe(t2, ln.forward(t2, t2.input({2, 4}, xs)));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("masked keys cannot influence unmasked outputs, bitwise") {
  ParameterStore<D> params;
  Rng rng(11);
  MultiHeadAttention<D> attn(params, "attn", 6, 2, rng);

  std::vector<D> q = random_values({2, 6}, 21);
  std::vector<D> kv = random_values({3, 6}, 22);
  AttentionMask mask = AttentionMask::key_padding(2, {1, 1, 0});

  auto run = [&](const std::vector<D>& kv_vals) {
    Tape<D> t;
    Tensor<D> qt = t.input({2, 6}, q);
    Tensor<D> kt = t.input({3, 6}, kv_vals);
    return materialize(attn.forward(t, qt, kt, kt, mask).values());
  };
  auto base = run(kv);
  std::vector<D> poked = kv;
  for (int j = 0; j < 6; ++j) poked[static_cast<size_t>(2 * 6 + j)] += 1000.0;  // masked row
  auto after = run(poked);
  for (size_t i = 0; i < base.size(); ++i) REQUIRE(base[i] == after[i]);

  std::vector<D> poked_visible = kv;
  poked_visible[0] += 1.0;  // unmasked row must matter
  auto changed = run(poked_visible);
  bool any_diff = false;
  for (size_t i = 0; i < base.size(); ++i) any_diff = any_diff || base[i] != changed[i];
  CHECK(any_diff);
}

TEST_CASE("causal mask blocks information flow from later positions, bitwise") {
  ParameterStore<D> params;
  Rng rng(31);
  MultiHeadAttention<D> attn(params, "attn", 4, 2, rng);
  AttentionMask causal = AttentionMask::make_causal(4);
  std::vector<D> x = random_values({4, 4}, 32);

  auto run = [&](const std::vector<D>& vals) {
    Tape<D> t;
    Tensor<D> xt = t.input({4, 4}, vals);
    return materialize(attn.forward(t, xt, xt, xt, causal).values());
  };
  auto base = run(x);
  std::vector<D> poked = x;
  for (int j = 0; j < 4; ++j) poked[static_cast<size_t>(2 * 4 + j)] += 7.0;  // position 2
  auto after = run(poked);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 4; ++j) {
      REQUIRE(base[static_cast<size_t>(i * 4 + j)] == after[static_cast<size_t>(i * 4 + j)]);
    }
  }
  bool later_changed = false;
  for (int i = 2; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      later_changed = later_changed ||
                      base[static_cast<size_t>(i * 4 + j)] != after[static_cast<size_t>(i * 4 + j)];
  CHECK(later_changed);
}

TEST_CASE("attention gradients, including distinct key and value sources") {
  ParameterStore<D> params;
  Rng rng(41);
  MultiHeadAttention<D> attn(params, "attn", 6, 3, rng);
  Parameter<D>& keys = params.create("keys", {3, 6});
  Parameter<D>& vals = params.create("vals", {3, 6});
  Parameter<D>& queries = params.create("queries", {2, 6});
  keys.value = random_values({3, 6}, 42);
  vals.value = random_values({3, 6}, 43);
  queries.value = random_values({2, 6}, 44);
  AttentionMask mask = AttentionMask::key_padding(2, {1, 0, 1});

  auto res = fd(params, [&](Tape<D>& t) {
    return probe(t, attn.forward(t, t.leaf(queries), t.leaf(keys), t.leaf(vals), mask));
  });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("feed-forward gradients") {
  ParameterStore<D> params;
  Rng rng(51);
  FeedForward<D> ffn(params, "ffn", 4, 7, rng);
  const std::vector<D> xs = random_values({3, 4}, 52);
  auto res = fd(params, [&](Tape<D>& t) {
    return probe(t, ffn.forward(t, t.input({3, 4}, xs)));
  });
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("encoder block is a residual update: zeroed branches pass input through") {
  ParameterStore<D> params;
  Rng rng(61);
  EncoderBlock<D> block(params, "blk", 4, 2, 8, rng);
  // silence both branches by zeroing their output projections
  for (const char* name : {"blk.attn.out.w", "blk.attn.out.b", "blk.ffn.fc2.w", "blk.ffn.fc2.b"}) {
    Parameter<D>* p = params.find(name);
    REQUIRE(p != nullptr);
    std::fill(p->value.begin(), p->value.end(), 0.0);
  }
  const std::vector<D> xs = random_values({3, 4}, 62);
  Tape<D> t;
  Tensor<D> x = t.input({3, 4}, xs);
  auto y = block.forward(t, x, AttentionMask::all_visible(3, 3), 0.0, nullptr).values();
  for (size_t i = 0; i < xs.size(); ++i) REQUIRE(y[i] == xs[i]);
}

TEST_CASE("encoder block gradients") {
  ParameterStore<D> params;
  Rng rng(71);
  EncoderBlock<D> block(params, "blk", 4, 2, 6, rng);
  Parameter<D>& x = params.create("x", {3, 4});
  x.value = random_values({3, 4}, 72);
  auto res = fd(params, [&](Tape<D>& t) {
    return probe(t, block.forward(t, t.leaf(x), AttentionMask::all_visible(3, 3), 0.0, nullptr));
  });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("decoder block gradients with separate memory keys and values") {
  ParameterStore<D> params;
  Rng rng(81);
  DecoderBlock<D> block(params, "blk", 4, 2, 6, rng);
  Parameter<D>& x = params.create("x", {3, 4});
  Parameter<D>& mk = params.create("mk", {2, 4});
  Parameter<D>& mv = params.create("mv", {2, 4});
  x.value = random_values({3, 4}, 82);
  mk.value = random_values({2, 4}, 83);
  mv.value = random_values({2, 4}, 84);
  auto res = fd(params, [&](Tape<D>& t) {
    return probe(t, block.forward(t, t.leaf(x), AttentionMask::make_causal(3), t.leaf(mk),
                                  t.leaf(mv), AttentionMask::all_visible(3, 2), 0.0, nullptr));
  });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("decoder block cross-attention reads values, not keys, for content") {
  // keep keys fixed, perturb one value row: outputs must change; and a
  // memory-masked row's value cannot change anything, bitwise
  ParameterStore<D> params;
  Rng rng(91);
  DecoderBlock<D> block(params, "blk", 4, 2, 6, rng);
  std::vector<D> x = random_values({2, 4}, 92);
  std::vector<D> mk = random_values({3, 4}, 93);
  std::vector<D> mv = random_values({3, 4}, 94);
  AttentionMask mem_mask = AttentionMask::key_padding(2, {1, 1, 0});

  auto run = [&](const std::vector<D>& values_vals) {
    Tape<D> t;
    return materialize(block
                           .forward(t, t.input({2, 4}, x), AttentionMask::make_causal(2),
                                    t.input({3, 4}, mk), t.input({3, 4}, values_vals), mem_mask,
                                    0.0, nullptr)
                           .values());
  };
  auto base = run(mv);
  std::vector<D> poke_masked = mv;
  for (int j = 0; j < 4; ++j) poke_masked[static_cast<size_t>(2 * 4 + j)] = 99.0;
  auto same = run(poke_masked);
  for (size_t i = 0; i < base.size(); ++i) REQUIRE(base[i] == same[i]);

  std::vector<D> poke_visible = mv;
  poke_visible[0] += 0.5;
  auto diff = run(poke_visible);
  bool any = false;
  for (size_t i = 0; i < base.size(); ++i) any = any || base[i] != diff[i];
  CHECK(any);
}

TEST_CASE("transformer encoder stacks blocks and rejects empty input") {
  ParameterStore<D> params;
  Rng rng(101);
  TransformerEncoder<D> enc(params, "enc", 2, 4, 2, 6, rng);
  const std::vector<D> xs = random_values({3, 4}, 102);
  Tape<D> t;
  Tensor<D> y = enc.forward(t, t.input({3, 4}, xs), AttentionMask::all_visible(3, 3));
  REQUIRE(y.shape() == Shape{3, 4});

  Parameter<D>& x = params.create("x", {2, 4});
  x.value = random_values({2, 4}, 103);
  auto res = fd(params, [&](Tape<D>& t2) {
    return probe(t2, enc.forward(t2, t2.leaf(x), AttentionMask::all_visible(2, 2)));
  });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("transformer decoder demands a causal mask") {
  ParameterStore<D> params;
  Rng rng(111);
  TransformerDecoder<D> dec(params, "dec", 1, 4, 2, 6, rng);
  const std::vector<D> xs = random_values({2, 4}, 112);
  const std::vector<D> ms = random_values({3, 4}, 113);
  Tape<D> t;
  Tensor<D> x = t.input({2, 4}, xs);
  Tensor<D> m = t.input({3, 4}, ms);
  AttentionMask mem = AttentionMask::all_visible(2, 3);
  REQUIRE_THROWS_AS(dec.forward(t, x, AttentionMask::all_visible(2, 2), m, m, mem),
                    std::invalid_argument);
  Tensor<D> y = dec.forward(t, x, AttentionMask::make_causal(2), m, m, mem);
  REQUIRE(y.shape() == Shape{2, 4});

  Parameter<D>& px = params.create("x", {2, 4});
  px.value = xs;
  auto res = fd(params, [&](Tape<D>& t2) {
    Tensor<D> mem_t = t2.input({3, 4}, ms);
    return probe(t2, dec.forward(t2, t2.leaf(px), AttentionMask::make_causal(2), mem_t, mem_t,
                                 AttentionMask::all_visible(2, 3)));
  });
  CHECK(res.max_rel_err < 1e-4);
}
