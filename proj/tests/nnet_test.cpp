// Copyright 2026 The lipmem Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "lipmem/nnet.hpp"

namespace lipmem {
namespace {

using testing::grad_check;
using testing::random_leaf;

TransformerConfig small_cfg(std::size_t layers = 1) {
  TransformerConfig c;
  c.layers = layers;
  c.dim = 8;
  c.ffn_dim = 16;
  c.heads = 2;
  c.dropout = 0.0;
  c.max_len = 16;
  return c;
}

Tensor random_input(Rng& rng, std::size_t b, std::size_t t, std::size_t d) {
  std::vector<double> v(b * t * d);
  for (auto& x : v) x = normal(rng);
  return Tensor(Shape{b, t, d}, std::move(v));
}

Tensor probe_loss(const Tensor& out, const Tensor& r) { return reduce_sum(mul(out, r)); }

std::vector<Tensor> leaves_of(const ParamList& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps) out.push_back(p.tensor);
  return out;
}

double row_gap(const Tensor& a, const Tensor& b, std::size_t row, std::size_t width) {
  double m = 0.0;
  for (std::size_t i = 0; i < width; ++i)
    m = std::max(m, std::abs(a.data()[row * width + i] - b.data()[row * width + i]));
  return m;
}

TEST(Attention, SingleKeyReturnsItsProjectedValue) {
  Rng rng(1);
  MultiHeadAttention mha(8, 2, rng);
  Tensor kv = random_input(rng, 1, 1, 8);
  Tensor q = random_input(rng, 1, 5, 8);
  Tensor out = mha(q, kv, AttnMask::none(1, 5, 1));
  Tensor want = mha.o(mha.v(kv));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.data()[i * 8 + c], want.data()[c], 1e-12);
}

TEST(Attention, FullyBlockedRowGivesZeroContext) {
  Rng rng(2);
  MultiHeadAttention mha(8, 2, rng);
  Tensor q = random_input(rng, 1, 3, 8);
  Tensor kv = random_input(rng, 1, 4, 8);
  AttnMask m = AttnMask::none(1, 3, 4);
  for (std::size_t j = 0; j < 4; ++j) m.blocked[1 * 4 + j] = 1;
  Tensor w;
  Tensor out = mha(q, kv, m, &w);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.data()[8 + c], mha.o.b.data()[c]);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(w.data()[(h * 3 + 1) * 4 + j], 0.0);
}

TEST(Attention, SaturatedScoresSelectOneValue) {
  Rng rng(3);
  MultiHeadAttention mha(4, 1, rng);
  for (Linear* l : {&mha.q, &mha.k, &mha.v, &mha.o}) {
    std::fill(l->w.values().begin(), l->w.values().end(), 0.0);
    for (std::size_t i = 0; i < 4; ++i) l->w.data()[i * 4 + i] = 1.0;
  }
  Tensor keys(Shape{1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) keys.data()[i * 4 + i] = 1.0;
  for (std::size_t pick = 0; pick < 4; ++pick) {
    Tensor q(Shape{1, 1, 4});
    q.data()[pick] = 1000.0;
    Tensor out = mha(q, keys, AttnMask::none(1, 1, 4));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.data()[c], c == pick ? 1.0 : 0.0, 1e-6);
  }
}

TEST(Attention, WeightsAreDistributionsOverUnblockedKeys) {
  Rng rng(4);
  MultiHeadAttention mha(8, 4, rng);
  Tensor q = random_input(rng, 2, 5, 8), kv = random_input(rng, 2, 6, 8);
  AttnMask m = AttnMask::key_padding({6, 3}, 5, 6);
  Tensor w;
  mha(q, kv, m, &w);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
          const double p = w.data()[((s * 4 + h) * 5 + i) * 6 + j];
          EXPECT_GE(p, 0.0);
          if (s == 1 && j >= 3) EXPECT_EQ(p, 0.0);
          sum += p;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
}

TEST(Attention, ShapeErrors) {
  Rng rng(5);
  EXPECT_THROW(MultiHeadAttention(6, 4, rng), DimensionError);
  MultiHeadAttention mha(8, 2, rng);
  Tensor q = random_input(rng, 1, 3, 8), kv = random_input(rng, 1, 4, 8);
  EXPECT_THROW(mha(q, kv, AttnMask::none(1, 3, 3)), DimensionError);
  EXPECT_THROW(mha(q, random_input(rng, 2, 4, 8), AttnMask::none(1, 3, 4)), DimensionError);
}

TEST(Blocks, AttentionGradientsMatchFiniteDifferences) {
  Rng rng(6);
  MultiHeadAttention mha(4, 2, rng);
  Tensor q = random_leaf(rng, {2, 3, 4}), kv = random_leaf(rng, {2, 4, 4});
  Tensor r = random_leaf(rng, {2, 3, 4});
  AttnMask m = AttnMask::key_padding({4, 2}, 3, 4);
  ParamList ps;
  mha.collect("mha", ps);
  auto leaves = leaves_of(ps);
  leaves.push_back(q);
  leaves.push_back(kv);
  auto res = grad_check([&] { return probe_loss(mha(q, kv, m), r); }, leaves);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Blocks, EncoderBlockGradientsMatchFiniteDifferences) {
  Rng rng(7);
  EncoderBlock blk(small_cfg(), rng);
  Tensor x = random_leaf(rng, {2, 3, 8}), r = random_leaf(rng, {2, 3, 8});
  AttnMask m = AttnMask::key_padding({3, 2}, 3, 3);
  ParamList ps;
  blk.collect("b", ps);
  auto leaves = leaves_of(ps);
  leaves.push_back(x);
  auto res = grad_check([&] { return probe_loss(blk(x, m, 0.0, {}), r); }, leaves);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Blocks, DecoderBlockGradientsMatchFiniteDifferences) {
  Rng rng(8);
  DecoderBlock blk(small_cfg(), rng);
  Tensor y = random_leaf(rng, {2, 3, 8}), mem = random_leaf(rng, {2, 4, 8});
  Tensor r = random_leaf(rng, {2, 3, 8});
  AttnMask sm = AttnMask::causal(2, 3), cm = AttnMask::key_padding({4, 1}, 3, 4);
  ParamList ps;
  blk.collect("b", ps);
  auto leaves = leaves_of(ps);
  leaves.push_back(y);
  leaves.push_back(mem);
  auto res = grad_check([&] { return probe_loss(blk(y, mem, sm, cm, 0.0, {}), r); }, leaves);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Blocks, DropoutIsIdentityInEvalAndSeededInTraining) {
  Rng rng(9);
  Tensor x = random_input(rng, 1, 50, 8);
  Tensor e = dropout(x, 0.5, ForwardMode::eval());
  EXPECT_EQ(e.values(), x.values());
  Rng a(11), b(11);
  Tensor da = dropout(x, 0.5, {true, &a}), db = dropout(x, 0.5, {true, &b});
  EXPECT_EQ(da.values(), db.values());
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (da.data()[i] == 0.0) ++zeros;
    else EXPECT_DOUBLE_EQ(da.data()[i], 2.0 * x.data()[i]);
  }
  EXPECT_GT(zeros, 100u);
  EXPECT_LT(zeros, 300u);
  EXPECT_THROW(dropout(x, 0.5, {true, nullptr}), ContractError);
}

TEST(Encoder, EmptySequenceGivesEmptyFeatures) {
  Rng rng(10);
  EncoderModel enc(6, small_cfg(2), 5, rng);
  Tensor f = enc.encode({Tensor(Shape{3, 0, 6}), {0, 0, 0}});
  EXPECT_EQ(f.shape(), (Shape{3, 0, 8}));
}

TEST(Encoder, OverlongSequenceIsALengthError) {
  Rng rng(11);
  EncoderModel enc(6, small_cfg(), 5, rng);
  EXPECT_THROW(enc.encode({Tensor(Shape{1, 17, 6}), {17}}), LengthError);
  EXPECT_THROW(enc.encode({Tensor(Shape{1, 4, 5}), {4}}), DimensionError);
}

TEST(Encoder, DuplicateRowsEncodeIdentically) {
  Rng rng(12);
  EncoderModel enc(6, small_cfg(2), 5, rng);
  Tensor one = random_input(rng, 1, 7, 6);
  std::vector<double> two(one.values());
  two.insert(two.end(), one.values().begin(), one.values().end());
  Tensor f = enc.encode({Tensor(Shape{2, 7, 6}, two), {7, 7}});
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(f.data()[t * 8 + c], f.data()[(7 + t) * 8 + c], 1e-10);
}

TEST(Encoder, PaddingNeverReachesValidFrames) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    EncoderModel enc(6, small_cfg(2), 5, rng);
    const std::size_t t = 10, len = 1 + seed % 9;
    Tensor x = random_input(rng, 1, t, 6);
    Tensor base = enc.encode({x, {len}});
    Tensor y = x.detach();
    for (std::size_t i = len * 6; i < t * 6; ++i) y.data()[i] = 1e3 * normal(rng);
    Tensor pert = enc.encode({y, {len}});
    for (std::size_t r = 0; r < len; ++r) EXPECT_LT(row_gap(base, pert, r, 8), 1e-10) << "seed " << seed;
  }
}

struct TinyDecoder {
  Rng rng{13};
  DecoderModel dec;
  Tensor ctx;
  std::vector<std::size_t> lens;

  explicit TinyDecoder(std::size_t layers) {
    auto c = small_cfg(layers);
    dec = DecoderModel(small_cfg(1), c, 7, rng);
    ctx = random_input(rng, 1, 6, 8);
    lens = {6};
  }
};

TEST(Decoder, LogitsAreCausalAtEveryDepth) {
  for (std::size_t layers = 1; layers <= 3; ++layers) {
    TinyDecoder td(layers);
    std::vector<long> y = {1, 4, 2, 6, 3};
    Tensor base = td.dec.decode(td.ctx, td.lens, y, 5);
    for (std::size_t j = 0; j + 1 < 5; ++j) {
      std::vector<long> z = y;
      for (std::size_t k = j + 1; k < 5; ++k) z[k] = (z[k] + 3) % 7;
      Tensor alt = td.dec.decode(td.ctx, td.lens, z, 5);
      for (std::size_t r = 0; r <= j; ++r) EXPECT_LT(row_gap(base, alt, r, 7), 1e-12);
      EXPECT_GT(row_gap(base, alt, j + 1, 7), 0.0);
    }
  }
}

TEST(Decoder, SingleTokenGivesOneRow) {
  TinyDecoder td(2);
  std::vector<long> y = {1};
  EXPECT_EQ(td.dec.decode(td.ctx, td.lens, y, 1).shape(), (Shape{1, 1, 7}));
}

TEST(Decoder, TeacherForcedMatchesIncrementalDecoding) {
  TinyDecoder td(2);
  std::vector<long> y = {1, 5, 3, 3, 0, 2};
  const std::size_t j = y.size();
  Tensor lp = log_softmax_lastdim(td.dec.decode(td.ctx, td.lens, y, j));
  double forced = 0.0, stepwise = 0.0;
  for (std::size_t i = 0; i + 1 < j; ++i) forced += lp.data()[i * 7 + static_cast<std::size_t>(y[i + 1])];
  for (std::size_t i = 1; i < j; ++i) {
    std::vector<long> prefix(y.begin(), y.begin() + static_cast<long>(i));
    Tensor step = log_softmax_lastdim(td.dec.decode(td.ctx, td.lens, prefix, i));
    stepwise += step.data()[(i - 1) * 7 + static_cast<std::size_t>(y[i])];
  }
  EXPECT_NEAR(forced, stepwise, 1e-9);
}

TEST(Decoder, RejectsBadTokensAndLengths) {
  TinyDecoder td(1);
  std::vector<long> bad = {1, 7};
  EXPECT_THROW(td.dec.decode(td.ctx, td.lens, bad, 2), VocabularyError);
  std::vector<long> neg = {-1};
  EXPECT_THROW(td.dec.decode(td.ctx, td.lens, neg, 1), VocabularyError);
  std::vector<long> longy(17, 1);
  EXPECT_THROW(td.dec.decode(td.ctx, td.lens, longy, 17), LengthError);
  EXPECT_THROW(td.dec.decode(td.ctx, td.lens, bad, 3), DimensionError);
  EXPECT_EQ(td.dec.blank(), 7u);
  EXPECT_EQ(td.dec.ctc_logits(td.ctx).dim(2), 8u);
}

TEST(Clone, DeepCopyDoesNotShareStorage) {
  Rng rng(14);
  EncoderModel a(6, small_cfg(), 5, rng);
  EncoderModel b = clone(a);
  Tensor x = random_input(rng, 1, 4, 6);
  EXPECT_EQ(a.encode({x, {4}}).values(), b.encode({x, {4}}).values());
  b.frontend.w.data()[0] += 1.0;
  EXPECT_NE(a.frontend.w.data()[0], b.frontend.w.data()[0]);
}

TEST(Config, InvalidTransformerConfigs) {
  auto c = small_cfg();
  c.heads = 3;
  EXPECT_THROW(c.validate("x"), ConfigError);
  c = small_cfg();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate("x"), ConfigError);
}

}  // namespace
}  // namespace lipmem
