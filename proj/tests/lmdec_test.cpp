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
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "lipmem/lmdec.hpp"
#include "tiny_world.hpp"

namespace lipmem {
namespace {

using testing::TinyWorld;

TransformerConfig micro(std::size_t dim = 4) {
  TransformerConfig c;
  c.layers = 1;
  c.dim = dim;
  c.ffn_dim = 2 * dim;
  c.heads = 2;
  c.dropout = 0.0;
  c.max_len = 32;
  return c;
}

LMDecoderModel micro_model(std::size_t units, std::size_t vocab, double lambda, std::uint64_t seed) {
  Rng rng(seed);
  return LMDecoderModel(DecoderInput::kUnits, units, micro(), micro(), vocab, lambda, rng);
}

TEST(MemoryLookup, RowsAreExactCopies) {
  Rng rng(1);
  Tensor bank = testing::random_leaf(rng, {6, 5});
  std::vector<long> x = {4, 0, 5, 4};
  Tensor f = memory_lookup(x, bank);
  ASSERT_EQ(f.shape(), (Shape{4, 5}));
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(f.data()[t * 5 + c], bank.data()[static_cast<std::size_t>(x[t]) * 5 + c]);
}

TEST(MemoryLookup, GradientCountsOccurrences) {
  Rng rng(2);
  Tensor bank = testing::random_leaf(rng, {5, 3});
  std::vector<long> x = {3, 3, 3};
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(reduce_sum(memory_lookup(x, bank)));
  }
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(bank.grad()[r * 3 + c], r == 3 ? 3.0 : 0.0);
}

TEST(MemoryLookup, EquivariantUnderRelabeling) {
  Rng rng(3);
  Tensor bank = testing::random_leaf(rng, {6, 4});
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_in_place(perm, rng);
  Tensor permuted(Shape{6, 4});
  for (std::size_t r = 0; r < 6; ++r)
    std::copy_n(bank.data().begin() + static_cast<long>(r * 4), 4, permuted.data().begin() + static_cast<long>(perm[r] * 4));
  std::vector<long> x = {0, 5, 2, 2, 1}, relabeled;
  for (long u : x) relabeled.push_back(static_cast<long>(perm[static_cast<std::size_t>(u)]));
  EXPECT_EQ(memory_lookup(x, bank).values(), memory_lookup(relabeled, permuted).values());
}

TEST(MemoryLookup, OutOfRangeUnitIsAnIndexError) {
  Tensor bank(Shape{4, 2});
  std::vector<long> x = {1, 4};
  EXPECT_THROW(memory_lookup(x, bank), IndexError);
}

TEST(LMDecoderLoss, ZeroLambdaIsPureAttention) {
  auto m = micro_model(6, 6, 0.0, 4);
  UnitSequence x = {1, 2, 2, 5, 0};
  std::vector<long> y = {3, 4};
  auto hl = lmdecoder_loss(m, x, y);
  EXPECT_EQ(hl.total.item(), hl.attn.item());
}

TEST(LMDecoderLoss, TotalRecombinesComponents) {
  for (double lambda : {0.1, 0.3, 0.5, 1.0}) {
    auto m = micro_model(6, 6, lambda, 5);
    UnitSequence x = {1, 2, 3, 5, 0, 0};
    std::vector<long> y = {3, 5, 3};
    auto hl = lmdecoder_loss(m, x, y);
    EXPECT_NEAR(hl.total.item(), (1.0 - lambda) * hl.attn.item() + lambda * hl.ctc.item(), 1e-12);
  }
}

TEST(LMDecoderLoss, UniformLogitsCostLogVPerToken) {
  auto m = micro_model(4, 5, 0.0, 6);
  std::fill(m.decoder.out_head.w.values().begin(), m.decoder.out_head.w.values().end(), 0.0);
  UnitSequence x = {0, 1, 2};
  std::vector<long> y = {3};
  EXPECT_NEAR(lmdecoder_loss(m, x, y).attn.item(), 2.0 * std::log(5.0), 1e-12);
}

TEST(LMDecoderLoss, TargetTooLongForCtcIsInfeasible) {
  auto m = micro_model(4, 6, 0.3, 7);
  UnitSequence x = {0, 1};
  std::vector<long> y = {3, 4, 5};
  EXPECT_THROW(lmdecoder_loss(m, x, y), InfeasibleError);
}

TEST(LMDecoderLoss, GradientsMatchFiniteDifferencesThroughTheMemory) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = micro_model(5, 6, 0.3, 100 + seed);
    Rng rng(seed);
    UnitSequence x(4 + uniform_index(rng, 3));
    for (auto& u : x) u = static_cast<long>(uniform_index(rng, 5));
    std::vector<long> y(1 + uniform_index(rng, 3));
    for (auto& t : y) t = 3 + static_cast<long>(uniform_index(rng, 3));
    if (ctc_min_frames(y) > x.size()) continue;
    ParamList ps;
    m.collect("lmdec", ps);
    std::vector<Tensor> leaves;
    for (const auto& p : ps) leaves.push_back(p.tensor);
    auto res = testing::grad_check([&] { return lmdecoder_loss(m, x, y).total; }, leaves);
    EXPECT_LT(res.max_rel_error, 1e-4) << "seed " << seed << ": " << res.worst;
  }
}

struct LMDecoderTraining : ::testing::Test {
  TinyWorld w{24};
  UnitCodebook padded_codebook;
  LMDecoderModel init;
  TrainConfig t;

  void SetUp() override {
    padded_codebook = w.codebook;
    for (int extra = 0; extra < 2; ++extra) {
      padded_codebook.centroids.insert(padded_codebook.centroids.end(), TinyWorld::kAudio, 1e6 * (extra + 1));
      ++padded_codebook.size;
    }
    Rng rng(9);
    init = LMDecoderModel(DecoderInput::kUnits, padded_codebook.size, testing::tiny_transformer(),
                          testing::tiny_transformer(), Tokenizer::decoder_vocab(), 0.3, rng);
    t.steps = 60;
    t.batch_size = 8;
    t.peak_lr = 1e-2;
    t.log_every = 20;
  }

  LMDecoderResult run() { return pretrain_lmdecoder(init, w.corpus, &padded_codebook, t, TinyWorld::kAudio); }
};

TEST_F(LMDecoderTraining, ZeroStepsKeepsInitialization) {
  t.steps = 0;
  auto r = run();
  ParamList a, b;
  init.collect("lmdec", a);
  r.model.collect("lmdec", b);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tensor.values(), b[i].tensor.values()) << a[i].name;
}

TEST_F(LMDecoderTraining, UnseenMemoryRowsNeverMove) {
  auto r = run();
  const std::size_t d = init.dim(), c = padded_codebook.size;
  for (std::size_t row = 0; row < c; ++row) {
    bool same = true;
    for (std::size_t k = 0; k < d; ++k) same &= r.model.memory.data()[row * d + k] == init.memory.data()[row * d + k];
    if (row >= w.codebook.size) EXPECT_TRUE(same) << "row " << row;
  }
  EXPECT_NE(r.model.memory.values(), init.memory.values());
}

TEST_F(LMDecoderTraining, DeterministicAndLossDecreases) {
  auto r1 = run();
  auto r2 = run();
  EXPECT_EQ(r1.metrics, r2.metrics);
  EXPECT_EQ(r1.model.memory.values(), r2.model.memory.values());
  EXPECT_LT(r1.last_loss, r1.first_loss);
}

TEST_F(LMDecoderTraining, CtcHeadNeverChangesDecodedText) {
  auto r = run();
  std::vector<UnitSequence> units;
  for (const auto& u : w.corpus) units.push_back(quantize(u.audio, TinyWorld::kAudio, padded_codebook));
  auto decode_all = [&](const LMDecoderModel& m) {
    auto feats = [&](const std::vector<std::size_t>& idx) {
      UtteranceRefs utts;
      std::vector<const UnitSequence*> us;
      for (std::size_t i : idx) {
        utts.push_back(&w.corpus[i]);
        us.push_back(&units[i]);
      }
      return lmdecoder_features(m, utts, us, TinyWorld::kAudio);
    };
    return evaluate_greedy(m.decoder, w.corpus, feats, max_decode_len(w.corpus)).csv();
  };
  const std::string before = decode_all(r.model);
  LMDecoderModel other = clone(r.model);
  for (auto& v : other.decoder.ctc_head.w.values()) v = -3.0 * v + 1.0;
  EXPECT_EQ(decode_all(other), before);
}

TEST_F(LMDecoderTraining, ConfigurationErrors) {
  EXPECT_THROW(pretrain_lmdecoder(init, w.corpus, nullptr, t, TinyWorld::kAudio), ConfigError);
  EXPECT_THROW(pretrain_lmdecoder(init, w.corpus, &w.codebook, t, TinyWorld::kAudio), ConfigError);
  std::vector<Utterance> none;
  EXPECT_THROW(pretrain_lmdecoder(init, none, &padded_codebook, t, TinyWorld::kAudio), DataError);
  Rng rng(1);
  EXPECT_THROW(LMDecoderModel(DecoderInput::kUnits, 4, micro(), micro(), 6, 1.5, rng), ConfigError);
}

}  // namespace
}  // namespace lipmem
