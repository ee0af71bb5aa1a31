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

#include "bridge_oracle.hpp"
#include "gradcheck.hpp"
#include "lipmem/bridge.hpp"
#include "tiny_world.hpp"

namespace lipmem {
namespace {

using testing::TinyWorld;

TEST(MemoryAttend, SingleRowIsReturnedForEveryQuery) {
  Rng rng(1);
  BridgeParams p(4, rng);
  Tensor bank = testing::random_leaf(rng, {1, 4});
  Tensor fv = testing::random_leaf(rng, {6, 4}, 5.0);
  Tensor fa = memory_attend(fv, bank, p);
  Tensor want = matmul(bank, p.wv);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(fa.data()[t * 4 + c], want.data()[c], 1e-14);
}

TEST(MemoryAttend, SaturatedBridgeIsAHardLookup) {
  Rng rng(2);
  const std::size_t d = 8, c = 6;
  Tensor bank = testing::orthonormal_rows(rng, c, d);
  const BridgeParams p = testing::identity_bridge(d, 1000.0 * std::sqrt(static_cast<double>(d)));
  for (std::size_t i = 0; i < c; ++i) {
    Tensor fv = slice(bank, 0, i, i + 1);
    Tensor fa = memory_attend(fv, bank, p);
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(fa.data()[k], bank.data()[i * d + k], 1e-6);
  }
}

TEST(MemoryAttend, InvariantToPermutingBankRows) {
  Rng rng(3);
  BridgeParams p(5, rng);
  Tensor bank = testing::random_leaf(rng, {7, 5});
  Tensor fv = testing::random_leaf(rng, {2, 4, 5});
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_in_place(perm, rng);
  Tensor permuted(Shape{7, 5});
  for (std::size_t r = 0; r < 7; ++r)
    std::copy_n(bank.data().begin() + static_cast<long>(perm[r] * 5), 5, permuted.data().begin() + static_cast<long>(r * 5));
  Tensor a = memory_attend(fv, bank, p), b = memory_attend(fv, permuted, p);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(MemoryAttend, RowsLieInTheConvexHullOfValues) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(10 + seed);
    const std::size_t d = 6, c = 2 + seed % 5;
    BridgeParams p(d, rng);
    Tensor bank = testing::random_leaf(rng, {c, d}, 2.0);
    Tensor fv = testing::random_leaf(rng, {5, d}, 3.0);
    Tensor w;
    Tensor fa = memory_attend(fv, bank, p, &w);
    Tensor values = matmul(bank, p.wv);
    for (std::size_t t = 0; t < 5; ++t) {
      std::vector<double> row(fa.data().begin() + static_cast<long>(t * d), fa.data().begin() + static_cast<long>((t + 1) * d));
      const auto coef = testing::least_squares_coefficients(values.values(), c, d, row);
      double sum = 0.0;
      for (double x : coef) {
        EXPECT_GE(x, -1e-8);
        sum += x;
      }
      EXPECT_NEAR(sum, 1.0, 1e-8) << "seed " << seed;
    }
  }
}

TEST(MemoryAttend, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    BridgeParams p(4, rng);
    Tensor bank = testing::random_leaf(rng, {5, 4});
    Tensor fv = testing::random_leaf(rng, {3, 4}, 2.0);
    Tensor r = testing::random_leaf(rng, {3, 4});
    auto res = testing::grad_check([&] { return reduce_sum(mul(memory_attend(fv, bank, p), r)); },
                                   {p.wq, p.wk, p.wv, bank, fv});
    EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
  }
}

TEST(MemoryAttend, DimensionMismatch) {
  Rng rng(4);
  BridgeParams p(4, rng);
  EXPECT_THROW(memory_attend(Tensor(Shape{2, 3}), Tensor(Shape{5, 4}), p), DimensionError);
  EXPECT_THROW(memory_attend(Tensor(Shape{2, 4}), Tensor(Shape{5, 3}), p), DimensionError);
}

TEST(MemoryAttend, SaturatedDecoderForwardEqualsHardLookupForward) {
  Rng rng(5);
  const std::size_t d = 16, c = 10;
  DecoderModel dec(testing::tiny_transformer(), testing::tiny_transformer(), Tokenizer::decoder_vocab(), rng);
  Tensor bank = testing::orthonormal_rows(rng, c, d);
  const BridgeParams p = testing::identity_bridge(d, 1000.0 * std::sqrt(static_cast<double>(d)));
  for (int n = 0; n < 50; ++n) {
    const std::size_t t = 3 + uniform_index(rng, 10);
    std::vector<long> units(t);
    for (auto& u : units) u = static_cast<long>(uniform_index(rng, c));
    Tensor hard = memory_lookup(units, bank, {1, t});
    Tensor soft = memory_attend(hard, bank, p);
    double gap = 0.0;
    for (std::size_t i = 0; i < hard.numel(); ++i) gap = std::max(gap, std::abs(hard.data()[i] - soft.data()[i]));
    EXPECT_LT(gap, 1e-6);
    std::vector<long> y = {Tokenizer::kBos, 5, 9, Tokenizer::kSpace};
    Tensor a = dec.decode(dec.encode_context(hard, {t}), {t}, y, 4);
    Tensor b = dec.decode(dec.encode_context(soft, {t}), {t}, y, 4);
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.data()[i], b.data()[i], 1e-5);
  }
}

ModelDims tiny_dims() {
  ModelDims d;
  d.video_dim = TinyWorld::kVideo;
  d.audio_dim = TinyWorld::kAudio;
  d.units = 8;
  d.encoder = testing::tiny_transformer();
  d.context = testing::tiny_transformer();
  d.decoder = testing::tiny_transformer(1, 64);
  return d;
}

struct Assembly : ::testing::Test {
  ModelDims dims = tiny_dims();
  Checkpoint enc_ck, lm_ck, audio_ck, src_ck;

  void SetUp() override {
    Rng rng(21);
    EncoderModel enc(dims.input_dim(), dims.encoder, dims.units, rng);
    enc_ck.mode = "encoder";
    enc_ck.tensors = collect_params(enc, "encoder");
    LMDecoderModel lm(DecoderInput::kUnits, dims.units, dims.context, dims.decoder, dims.vocab(), 0.3, rng);
    lm_ck.mode = "lmdec-units";
    lm.collect("lmdec", lm_ck.tensors);
    LMDecoderModel audio(DecoderInput::kAudio, dims.audio_dim, dims.context, dims.decoder, dims.vocab(), 0.3, rng);
    audio_ck.mode = "lmdec-audio";
    audio.collect("lmdec", audio_ck.tensors);
    CombinedModel src = blank_model(Mode::kScratchDecoder, dims, false, rng);
    src_ck.mode = "source-lipreader";
    src_ck.tensors = params_of(src);
  }

  static void expect_copied(const ParamList& got, const Checkpoint& from, const std::string& prefix) {
    for (const auto& p : got) {
      if (p.name.rfind(prefix, 0) != 0) continue;
      EXPECT_EQ(p.tensor.values(), from.at(p.name).values()) << p.name;
    }
  }

  static bool has(const ParamList& ps, const std::string& name) {
    for (const auto& p : ps)
      if (p.name == name) return true;
    return false;
  }
};

TEST_F(Assembly, ProposedCopiesPretrainedTensorsAndAddsABridge) {
  CombinedModel m = assemble(Mode::kProposed, dims, &enc_ck, &lm_ck, false, 1);
  ParamList ps = params_of(m);
  expect_copied(ps, enc_ck, "encoder/");
  expect_copied(ps, lm_ck, "lmdec/");
  EXPECT_TRUE(has(ps, "lmdec/memory/B"));
  EXPECT_TRUE(has(ps, "bridge/Wq"));
  CombinedModel again = assemble(Mode::kProposed, dims, &enc_ck, &lm_ck, false, 1);
  EXPECT_EQ(m.bridge.wq.values(), again.bridge.wq.values());
  EXPECT_NE(m.bridge.wq.values(), assemble(Mode::kProposed, dims, &enc_ck, &lm_ck, false, 2).bridge.wq.values());
}

TEST_F(Assembly, NoLmHasNoMemoryBank) {
  CombinedModel m = assemble(Mode::kNoLm, dims, &enc_ck, &lm_ck, false, 1);
  ParamList ps = params_of(m);
  EXPECT_FALSE(m.has_memory);
  EXPECT_FALSE(has(ps, "lmdec/memory/B"));
  EXPECT_FALSE(has(ps, "bridge/Wq"));
  expect_copied(ps, lm_ck, "lmdec/decoder/");
}

TEST_F(Assembly, ScratchDecoderIsFresh) {
  CombinedModel m = assemble(Mode::kScratchDecoder, dims, &enc_ck, nullptr, false, 1);
  expect_copied(params_of(m), enc_ck, "encoder/");
  EXPECT_NE(m.decoder.out_head.w.values(), lm_ck.at("lmdec/decoder/out_head/w").values());
}

TEST_F(Assembly, AsrAndSupervisedReuseTheirCheckpoints) {
  CombinedModel asr = assemble(Mode::kAsrPretrain, dims, &enc_ck, &audio_ck, false, 1);
  expect_copied(params_of(asr), audio_ck, "lmdec/decoder/");
  expect_copied(params_of(asr), enc_ck, "encoder/");
  CombinedModel sup = assemble(Mode::kSupervisedPretrain, dims, nullptr, &src_ck, false, 1);
  expect_copied(params_of(sup), src_ck, "");
}

TEST_F(Assembly, TeacherKlStartsFromAFreshDecoder) {
  CombinedModel m = assemble(Mode::kTeacherKl, dims, &enc_ck, &lm_ck, false, 1);
  EXPECT_FALSE(m.has_memory);
  EXPECT_NE(m.decoder.out_head.w.values(), lm_ck.at("lmdec/decoder/out_head/w").values());
}

TEST_F(Assembly, MissingCheckpointsAreConfigErrors) {
  EXPECT_THROW(assemble(Mode::kProposed, dims, &enc_ck, nullptr, false, 1), ConfigError);
  EXPECT_THROW(assemble(Mode::kProposed, dims, nullptr, &lm_ck, false, 1), ConfigError);
  EXPECT_THROW(assemble(Mode::kSupervisedPretrain, dims, &enc_ck, nullptr, false, 1), ConfigError);
  EXPECT_THROW(parse_mode("nope"), ConfigError);
  for (Mode m : kAllModes) EXPECT_EQ(parse_mode(mode_name(m)), m);
}

TEST_F(Assembly, ZeroBridgeWithResidualPassesVisualFeaturesThrough) {
  CombinedModel m = assemble(Mode::kProposed, dims, &enc_ck, &lm_ck, true, 1, true);
  TinyWorld w(4);
  Batch vb = video_batch(refs_of(w.corpus), dims);
  EXPECT_EQ(m.decoder_input(vb).frames.values(), m.encoder.encode(vb).values());
}

TEST_F(Assembly, CheckpointRoundTripKeepsStoredValues) {
  CombinedModel m = assemble(Mode::kProposed, dims, &enc_ck, &lm_ck, true, 1);
  ParamList ps = params_of(m);
  testing::round_all(ps);
  CombinedModel back = from_checkpoint(deserialize(serialize(to_checkpoint(m, 7))), dims);
  EXPECT_TRUE(back.residual);
  EXPECT_EQ(back.mode, Mode::kProposed);
  ParamList qs = params_of(back);
  ASSERT_EQ(ps.size(), qs.size());
  for (std::size_t i = 0; i < ps.size(); ++i) EXPECT_EQ(ps[i].tensor.values(), qs[i].tensor.values()) << ps[i].name;
}

struct Finetuning : Assembly {
  TinyWorld w{16};
  TrainConfig t;

  void SetUp() override {
    Assembly::SetUp();
    t.steps = 10;
    t.batch_size = 4;
    t.peak_lr = 1e-2;
    t.warmup = 0.2;
    t.decay = 0.8;
    t.log_every = 5;
  }
};

TEST_F(Finetuning, FullFreezeLeavesTheEncoderUntouched) {
  t.freeze_steps = t.steps;
  CombinedModel m = assemble(Mode::kProposed, dims, &enc_ck, &lm_ck, false, 1);
  auto r = finetune(m, w.corpus, dims, t);
  EXPECT_EQ(r.encoder_hash_start, r.encoder_hash_at_unfreeze);
  EXPECT_EQ(params_hash(r.model.encoder_params()), params_hash(m.encoder_params()));
  EXPECT_NE(r.model.decoder.out_head.w.values(), m.decoder.out_head.w.values());
}

TEST_F(Finetuning, PartialFreezeHoldsThenReleases) {
  t.freeze_steps = 4;
  CombinedModel m = assemble(Mode::kProposed, dims, &enc_ck, &lm_ck, false, 1);
  auto r = finetune(m, w.corpus, dims, t);
  EXPECT_EQ(r.encoder_hash_start, r.encoder_hash_at_unfreeze);
  EXPECT_NE(params_hash(r.model.encoder_params()), r.encoder_hash_start);
}

TEST_F(Finetuning, DeterministicPerSeed) {
  CombinedModel m = assemble(Mode::kNoLm, dims, &enc_ck, &lm_ck, false, 1);
  auto a = finetune(m, w.corpus, dims, t);
  auto b = finetune(m, w.corpus, dims, t);
  EXPECT_EQ(a.metrics, b.metrics);
  EXPECT_EQ(evaluate(a.model, w.corpus, dims).csv(), evaluate(b.model, w.corpus, dims).csv());
}

TEST_F(Finetuning, ScheduleHitsPeakAndFloor) {
  const TriStageSchedule s = t.schedule();
  EXPECT_EQ(s.warmup_steps(), 2);
  EXPECT_DOUBLE_EQ(s.at(2), t.peak_lr);
  EXPECT_DOUBLE_EQ(s.at(t.steps), t.peak_lr * 0.05);
  EXPECT_DOUBLE_EQ(s.at(1), t.peak_lr / 2);
  EXPECT_NEAR(s.at(6), t.peak_lr * (1.0 - 0.95 * 0.5), 1e-15);
}

TEST_F(Finetuning, TeacherKlNeedsTeachers) {
  CombinedModel m = assemble(Mode::kTeacherKl, dims, &enc_ck, &lm_ck, false, 1);
  EXPECT_THROW(finetune(m, w.corpus, dims, t), ConfigError);
  std::vector<Utterance> none;
  EXPECT_THROW(finetune(m, none, dims, t), DataError);
}

TEST(TokenKl, ZeroForIdenticalDistributionsAndSkipsIgnoredRows) {
  Rng rng(8);
  Tensor s = testing::random_leaf(rng, {2, 3, 5}, 2.0);
  std::vector<long> y = {1, 2, kIgnoreIndex, 0, kIgnoreIndex, kIgnoreIndex};
  EXPECT_NEAR(token_kl(s, s, y, 2).item(), 0.0, 1e-12);
  Tensor t = testing::random_leaf(rng, {2, 3, 5}, 2.0);
  EXPECT_GT(token_kl(s, t, y, 2).item(), 0.0);
  Tensor t2 = t.detach();
  for (std::size_t c = 0; c < 5; ++c) t2.data()[2 * 5 + c] += 10.0 * c;
  EXPECT_DOUBLE_EQ(token_kl(s, t, y, 2).item(), token_kl(s, t2, y, 2).item());
  auto res = testing::grad_check([&] { return token_kl(s, t, y, 2); }, {s});
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

}  // namespace
}  // namespace lipmem
