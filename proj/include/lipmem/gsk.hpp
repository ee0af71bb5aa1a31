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

// General speech knowledge: masked speech-unit prediction on the encoder.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lipmem/batching.hpp"
#include "lipmem/errors.hpp"
#include "lipmem/nnet.hpp"
#include "lipmem/train.hpp"
#include "lipmem/units.hpp"

namespace lipmem {

struct MaskSpec {
  std::size_t alpha = 5;
  double mask_fraction = 0.3;

  void validate() const {
    if (alpha < 1) throw ConfigError("mask: alpha must be >= 1");
    if (mask_fraction < 0.0 || mask_fraction > 1.0) throw ConfigError("mask: fraction outside [0,1]");
  }
};

struct MaskSpan {
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t source = 0;  // offset the replacement is copied from (cyclic)
};

/// round(fraction * T / alpha) non-overlapping spans of length alpha, placed
/// uniformly (stars and bars), each with a uniform source offset.
inline std::vector<MaskSpan> sample_spans(std::size_t t, const MaskSpec& spec, Rng& rng) {
  spec.validate();
  if (t < spec.alpha) {
    throw LengthError("mask: T=" + std::to_string(t) + " shorter than alpha=" + std::to_string(spec.alpha));
  }
  const auto k = std::min<std::size_t>(
      static_cast<std::size_t>(std::lround(spec.mask_fraction * static_cast<double>(t) / static_cast<double>(spec.alpha))),
      t / spec.alpha);
  const std::size_t slots = t - k * spec.alpha + k;
  // k distinct sorted draws from [0, slots): partial Fisher-Yates.
  std::vector<std::size_t> pool(slots);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, slots - i)]);
  std::vector<std::size_t> picks(pool.begin(), pool.begin() + static_cast<long>(k));
  std::sort(picks.begin(), picks.end());
  std::vector<MaskSpan> spans;
  for (std::size_t i = 0; i < k; ++i) {
    spans.push_back({picks[i] + i * (spec.alpha - 1), spec.alpha, uniform_index(rng, t)});
  }
  return spans;
}

struct MaskedSequence {
  std::vector<double> frames;        // T x d, x~
  std::vector<std::uint8_t> mask;    // M
  std::vector<MaskSpan> spans;
};

/// Replaces each sampled span with a contiguous (cyclic) copy of the same
/// sequence. `frames` is T x d row-major.
inline MaskedSequence mask_sequence(std::span<const double> frames, std::size_t d, const MaskSpec& spec, Rng& rng) {
  if (d == 0 || frames.size() % d != 0) throw DimensionError("mask: frame buffer is not a multiple of d");
  const std::size_t t = frames.size() / d;
  MaskedSequence out{std::vector<double>(frames.begin(), frames.end()), std::vector<std::uint8_t>(t, 0), {}};
  out.spans = sample_spans(t, spec, rng);
  for (const auto& s : out.spans) {
    for (std::size_t i = 0; i < s.length && s.start + i < t; ++i) {
      const std::size_t src = (s.source + i) % t;
      std::copy_n(frames.data() + src * d, d, out.frames.data() + (s.start + i) * d);
      out.mask[s.start + i] = 1;
    }
  }
  return out;
}

inline MaskedSequence mask_sequence(std::span<const double> frames, std::size_t d, const MaskSpec& spec,
                                    std::uint64_t seed) {
  Rng rng(derive_seed(seed, "mask"));
  return mask_sequence(frames, d, spec, rng);
}

struct GskLoss {
  Tensor loss;
  std::size_t masked = 0;
  bool nothing_masked = false;  // warning flag: loss is defined as 0
};

/// -sum over masked t of log softmax(logits_t)[z_t]. `logits` is [..., C];
/// `targets` and `mask` cover its rows.
inline GskLoss gsk_loss(const Tensor& unit_logits, std::span<const long> targets, std::span<const std::uint8_t> mask) {
  if (targets.size() != mask.size()) throw DimensionError("gsk_loss: targets and mask lengths differ");
  std::vector<long> tg(targets.size(), kIgnoreIndex);
  GskLoss out;
  for (std::size_t i = 0; i < tg.size(); ++i) {
    if (mask[i]) {
      tg[i] = targets[i];
      ++out.masked;
    }
  }
  out.nothing_masked = out.masked == 0;
  out.loss = cross_entropy(unit_logits, tg);
  return out;
}

struct GskConfig {
  MaskSpec mask;
  double modality_dropout = 0.5;
  std::size_t refine_iters = 2;
  std::size_t kmeans_iters = 30;
};

/// Masked training batch: encoder input [B,T,d_v+d_a] with spans substituted
/// in the video columns, flattened unit targets and mask over the padded grid.
struct GskBatch {
  Batch input;
  std::vector<long> targets;
  std::vector<std::uint8_t> mask;
};

inline GskBatch make_gsk_batch(const UtteranceRefs& utts, const std::vector<UnitSequence>& units,
                               std::size_t video_dim, std::size_t audio_dim, const MaskSpec& spec,
                               double modality_dropout, Rng& rng) {
  std::vector<bool> audio_on(utts.size());
  for (std::size_t i = 0; i < utts.size(); ++i) audio_on[i] = uniform01(rng) >= modality_dropout;
  GskBatch gb{make_encoder_batch(utts, video_dim, audio_dim, audio_on), {}, {}};
  const std::size_t t = gb.input.frames.dim(1), d = video_dim + audio_dim;
  gb.targets.assign(utts.size() * t, kIgnoreIndex);
  gb.mask.assign(utts.size() * t, 0);
  auto data = gb.input.frames.data();
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const std::size_t len = utts[i]->frames;
    std::span<double> rows(data.data() + i * t * d, len * d);
    const MaskedSequence m = mask_sequence(rows, d, spec, rng);
    for (std::size_t f = 0; f < len; ++f)  // video stream only; audio stays as given
      std::copy_n(m.frames.begin() + static_cast<long>(f * d), video_dim, rows.begin() + static_cast<long>(f * d));
    for (std::size_t f = 0; f < len; ++f) {
      gb.targets[i * t + f] = units[i][f];
      gb.mask[i * t + f] = m.mask[f];
    }
  }
  return gb;
}

inline double masked_accuracy(const Tensor& logits, std::span<const long> targets, std::span<const std::uint8_t> mask) {
  const std::size_t c = logits.dim(-1);
  std::size_t hit = 0, n = 0;
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (!mask[r]) continue;
    const double* x = logits.data().data() + r * c;
    hit += static_cast<long>(std::max_element(x, x + c) - x) == targets[r];
    ++n;
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

/// Unit targets for each utterance. Iteration 0 quantizes audio; refined
/// codebooks quantize encoder features.
inline std::vector<UnitSequence> unit_targets(std::span<const Utterance> corpus, const UnitCodebook& cb,
                                              const EncoderModel* model, std::size_t video_dim,
                                              std::size_t audio_dim) {
  std::vector<UnitSequence> out;
  if (model == nullptr) {
    for (const auto& u : corpus) out.push_back(quantize(u.audio, audio_dim, cb));
    return out;
  }
  const auto feats = encoder_features(*model, corpus, video_dim, audio_dim, true);
  const auto all = quantize(feats, model->dim(), cb);
  std::size_t pos = 0;
  for (const auto& u : corpus) {
    out.emplace_back(all.begin() + static_cast<long>(pos), all.begin() + static_cast<long>(pos + u.frames));
    pos += u.frames;
  }
  return out;
}

struct PretrainResult {
  EncoderModel model;
  UnitCodebook codebook;        // codebook of the final round's targets
  EncoderModel target_encoder;  // encoder that produced them (refined rounds)
  bool refined = false;
  std::string metrics;          // step,loss,masked_acc
  double first_loss = 0.0;
  double last_loss = 0.0;

  /// The final round's unit targets for `corpus`.
  std::vector<UnitSequence> targets_for(std::span<const Utterance> corpus, std::size_t video_dim,
                                        std::size_t audio_dim) const {
    return unit_targets(corpus, codebook, refined ? &target_encoder : nullptr, video_dim, audio_dim);
  }
};

/// Masked prediction training. Steps are split evenly over 1 + refine_iters
/// rounds; after each non-final round the targets are re-clustered from the
/// encoder's features and the unit head is re-initialized.
inline PretrainResult pretrain_encoder(const EncoderModel& init, std::span<const Utterance> corpus,
                                       const UnitCodebook& audio_codebook, const GskConfig& gcfg,
                                       const TrainConfig& tcfg, std::size_t video_dim, std::size_t audio_dim) {
  tcfg.validate("pretrain-gsk");
  gcfg.mask.validate();
  if (corpus.empty()) throw DataError("pretrain-gsk: empty corpus");
  if (init.units() != audio_codebook.size) {
    throw ConfigError("pretrain-gsk: unit head has " + std::to_string(init.units()) + " classes, codebook " +
                      std::to_string(audio_codebook.size));
  }
  EncoderModel model = clone(init);
  PretrainResult res;
  res.codebook = audio_codebook;
  MetricsLog log("step,loss,masked_acc");
  const TriStageSchedule sched = tcfg.schedule();
  Rng rng(derive_seed(tcfg.seed, "gsk"));
  Rng drop_rng(derive_seed(tcfg.seed, "gsk/dropout"));
  BatchSampler sampler(corpus.size(), tcfg.batch_size, tcfg.seed);
  std::vector<UnitSequence> targets = unit_targets(corpus, res.codebook, nullptr, video_dim, audio_dim);

  const std::size_t rounds = tcfg.steps > 0 ? 1 + gcfg.refine_iters : 1;
  ParamList params = collect_params(model, "encoder");
  AdamState adam;
  Tape tape;
  long step = 0;
  for (std::size_t round = 0; round < rounds; ++round) {
    const long round_end = tcfg.steps * static_cast<long>(round + 1) / static_cast<long>(rounds);
    if (round > 0) {
      res.codebook = refine_codebook(model, corpus, audio_codebook.size, derive_seed(tcfg.seed, round), video_dim,
                                     audio_dim, static_cast<int>(round), gcfg.kmeans_iters);
      targets = unit_targets(corpus, res.codebook, &model, video_dim, audio_dim);
      res.target_encoder = clone(model);
      res.refined = true;
      Rng head_rng(derive_seed(tcfg.seed, "gsk/head" + std::to_string(round)));
      Linear fresh(model.dim(), model.units(), head_rng);
      std::copy(fresh.w.data().begin(), fresh.w.data().end(), model.unit_head.w.data().begin());
      std::copy(fresh.b.data().begin(), fresh.b.data().end(), model.unit_head.b.data().begin());
      adam = AdamState{};
    }
    for (; step < round_end; ++step) {
      TapeScope scope(tape);
      UtteranceRefs utts;
      std::vector<UnitSequence> tg;
      for (std::size_t i : sampler.next()) {
        utts.push_back(&corpus[i]);
        tg.push_back(targets[i]);
      }
      const GskBatch gb = make_gsk_batch(utts, tg, video_dim, audio_dim, gcfg.mask, gcfg.modality_dropout, rng);
      const Tensor logits = model.unit_logits(model.encode(gb.input, {true, &drop_rng}));
      GskLoss gl = gsk_loss(logits, gb.targets, gb.mask);
      const double denom = static_cast<double>(std::max<std::size_t>(gl.masked, 1));
      const Tensor loss = scale(gl.loss, 1.0 / denom);
      const double value = loss.item();
      if (step == 0) res.first_loss = value;
      res.last_loss = value;
      if ((step + 1) % tcfg.log_every == 0 || step + 1 == tcfg.steps) {
        log.row(step + 1, {value, masked_accuracy(logits, gb.targets, gb.mask)});
      }
      if (gl.nothing_masked) {
        tape.reset();
        continue;
      }
      optimizer_step(tape, loss, params, adam, sched.at(step + 1), "pretrain-gsk", step + 1);
    }
  }
  res.model = std::move(model);
  res.metrics = log.str();
  return res;
}

/// Masked-unit accuracy on held-out utterances with audio dropped (video
/// only), as at lip-reading time.
inline double heldout_masked_accuracy(const EncoderModel& model, std::span<const Utterance> corpus,
                                      const std::vector<UnitSequence>& targets, const MaskSpec& spec,
                                      std::size_t video_dim, std::size_t audio_dim, std::uint64_t seed,
                                      bool with_audio = false) {
  NoGradScope no_grad;
  Rng rng(derive_seed(seed, "heldout-mask"));
  std::size_t hit = 0, n = 0;
  for (std::size_t s = 0; s < corpus.size(); s += 16) {
    UtteranceRefs utts;
    std::vector<UnitSequence> tg;
    for (std::size_t i = s; i < std::min(corpus.size(), s + 16); ++i) {
      utts.push_back(&corpus[i]);
      tg.push_back(targets[i]);
    }
    const GskBatch gb = make_gsk_batch(utts, tg, video_dim, audio_dim, spec, with_audio ? 0.0 : 1.0, rng);
    const Tensor logits = model.unit_logits(model.encode(gb.input));
    std::size_t m = 0;
    for (auto x : gb.mask) m += x;
    hit += static_cast<std::size_t>(std::lround(masked_accuracy(logits, gb.targets, gb.mask) * static_cast<double>(m)));
    n += m;
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

}  // namespace lipmem
