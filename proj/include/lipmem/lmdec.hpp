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

// Language-specific memory-augmented decoder.

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "lipmem/batching.hpp"
#include "lipmem/ctc.hpp"
#include "lipmem/errors.hpp"
#include "lipmem/evalkit.hpp"
#include "lipmem/nnet.hpp"
#include "lipmem/train.hpp"
#include "lipmem/units.hpp"

namespace lipmem {

/// f_a^t = B[x_a^t]. `shape` is the shape of `units`; the result appends d.
inline Tensor memory_lookup(std::span<const long> units, const Tensor& bank, Shape shape) {
  for (long u : units) {
    if (u < 0 || static_cast<std::size_t>(u) >= bank.dim(0)) {
      throw IndexError("memory_lookup: unit " + std::to_string(u) + " outside [0," + std::to_string(bank.dim(0)) + ")");
    }
  }
  return embed_gather(bank, units, std::move(shape));
}

inline Tensor memory_lookup(std::span<const long> units, const Tensor& bank) {
  return memory_lookup(units, bank, Shape{units.size()});
}

/// What the LMDecoder reads: unit ids through the memory bank, or continuous
/// audio features through a linear projection (the ASR baseline).
enum class DecoderInput { kUnits, kAudio };

struct LMDecoderModel {
  DecoderInput input = DecoderInput::kUnits;
  Tensor memory;     // B [C, d], kUnits
  Linear audio_proj;  // kAudio
  DecoderModel decoder;
  double ctc_weight = 0.3;

  LMDecoderModel() = default;
  LMDecoderModel(DecoderInput in, std::size_t units_or_audio_dim, const TransformerConfig& ctx_cfg,
                 const TransformerConfig& dec_cfg, std::size_t vocab, double lambda, Rng& rng)
      : input(in), ctc_weight(lambda) {
    const std::size_t d = dec_cfg.dim;
    if (in == DecoderInput::kUnits) {
      memory = init_normal(rng, {units_or_audio_dim, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    } else {
      audio_proj = Linear(units_or_audio_dim, d, rng);
    }
    decoder = DecoderModel(ctx_cfg, dec_cfg, vocab, rng);
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lmdec: ctc_weight outside [0,1]");
  }

  std::size_t dim() const { return decoder.dim(); }
  std::size_t units() const { return input == DecoderInput::kUnits ? memory.dim(0) : 0; }

  void collect(const std::string& prefix, ParamList& out) const {
    if (input == DecoderInput::kUnits) {
      out.push_back({prefix + "/memory/B", memory});
    } else {
      audio_proj.collect(prefix + "/audio_proj", out);
    }
    decoder.collect(prefix + "/decoder", out);
  }
};

inline LMDecoderModel clone(const LMDecoderModel& m) {
  LMDecoderModel c = m;
  c.decoder = clone(m.decoder);
  if (m.input == DecoderInput::kUnits) {
    c.memory = Tensor::parameter(m.memory.shape(), m.memory.values());
  } else {
    c.audio_proj.w = Tensor::parameter(m.audio_proj.w.shape(), m.audio_proj.w.values());
    c.audio_proj.b = Tensor::parameter(m.audio_proj.b.shape(), m.audio_proj.b.values());
  }
  return c;
}

struct HybridLoss {
  Tensor total, attn, ctc;
};

/// Hybrid CTC/attention loss on features [B,T,d] feeding the decoder's
/// context stack. Each component is summed over tokens and averaged over the
/// batch; total = (1-lambda) attn + lambda ctc.
inline HybridLoss hybrid_loss(const DecoderModel& dec, const Tensor& features, const std::vector<std::size_t>& lengths,
                              const TextBatch& tb, double lambda, const ForwardMode& mode = {}) {
  const Tensor ctx = dec.encode_context(features, lengths, mode);
  const Tensor logits = dec.decode(ctx, lengths, tb.y_in, tb.j_len, mode);
  const double inv_b = 1.0 / static_cast<double>(tb.batch);
  HybridLoss out;
  out.attn = scale(cross_entropy(logits, tb.y_out), inv_b);
  out.ctc = scale(ctc_loss(log_softmax_lastdim(dec.ctc_logits(ctx)), lengths, tb.tokens), inv_b);
  out.total = add(scale(out.attn, 1.0 - lambda), scale(out.ctc, lambda));
  return out;
}

/// Padded unit ids [B,T] (pad id 0; padded rows are masked downstream).
struct UnitBatch {
  std::vector<long> ids;
  std::size_t t = 0;
  std::vector<std::size_t> lengths;
};

inline UnitBatch make_unit_batch(const std::vector<const UnitSequence*>& seqs) {
  UnitBatch ub;
  for (const auto* s : seqs) ub.t = std::max(ub.t, s->size());
  ub.ids.assign(seqs.size() * ub.t, 0);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::copy(seqs[i]->begin(), seqs[i]->end(), ub.ids.begin() + static_cast<long>(i * ub.t));
    ub.lengths.push_back(seqs[i]->size());
  }
  return ub;
}

/// Decoder input features for a batch of utterances: memory rows of the
/// quantized audio, or projected continuous audio.
inline Batch lmdecoder_features(const LMDecoderModel& m, const UtteranceRefs& utts, const std::vector<const UnitSequence*>& units,
                                std::size_t audio_dim) {
  if (m.input == DecoderInput::kUnits) {
    const UnitBatch ub = make_unit_batch(units);
    return {memory_lookup(ub.ids, m.memory, {utts.size(), ub.t}), ub.lengths};
  }
  Batch a = make_audio_batch(utts, audio_dim);
  return {m.audio_proj(a.frames), a.lengths};
}

/// Loss of Eq. (3) plus CTC for a batch of (units, text) pairs.
inline HybridLoss lmdecoder_loss(const LMDecoderModel& m, const UnitBatch& ub, const TextBatch& tb,
                                 const ForwardMode& mode = {}) {
  const Tensor fa = memory_lookup(ub.ids, m.memory, {ub.lengths.size(), ub.t});
  return hybrid_loss(m.decoder, fa, ub.lengths, tb, m.ctc_weight, mode);
}

inline HybridLoss lmdecoder_loss(const LMDecoderModel& m, const UnitSequence& x_a, const std::vector<long>& y) {
  return lmdecoder_loss(m, make_unit_batch({&x_a}), make_text_batch(std::vector<std::vector<long>>{y}));
}

inline std::size_t max_decode_len(std::span<const Utterance> corpus) {
  std::size_t n = 1;
  for (const auto& u : corpus) n = std::max(n, u.text.size() + 2);
  return n;
}

/// Greedy transcripts of `corpus` from decoder input features.
template <typename FeatureFn>
EvalReport evaluate_greedy(const DecoderModel& dec, std::span<const Utterance> corpus, FeatureFn&& features,
                           std::size_t max_len, std::size_t batch_size = 32) {
  NoGradScope no_grad;
  EvalReport report;
  for (std::size_t s = 0; s < corpus.size(); s += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(corpus.size(), s + batch_size); ++i) idx.push_back(i);
    const Batch f = features(idx);
    const Tensor ctx = dec.encode_context(f.frames, f.lengths);
    const auto hyps = greedy_decode_batch(dec, ctx, f.lengths, max_len);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Utterance& u = corpus[idx[k]];
      report.add(u.id, u.text, Tokenizer::detokenize(hyps[k].tokens, false));
    }
  }
  return report;
}

struct LMDecoderResult {
  LMDecoderModel model;
  std::string metrics;  // step,loss,attn,ctc
  double heldout_wer = -1.0;
  double heldout_ppl = -1.0;
  double first_loss = 0.0, last_loss = 0.0;
};

/// Per-token perplexity of teacher-forced decoding and greedy WER.
inline std::pair<double, double> evaluate_lmdecoder(const LMDecoderModel& m, std::span<const Utterance> corpus,
                                                    const std::vector<UnitSequence>& units, std::size_t audio_dim) {
  NoGradScope no_grad;
  double nll = 0.0;
  std::size_t tokens = 0;
  auto feats = [&](const std::vector<std::size_t>& idx) {
    UtteranceRefs utts;
    std::vector<const UnitSequence*> us;
    for (std::size_t i : idx) {
      utts.push_back(&corpus[i]);
      if (!units.empty()) us.push_back(&units[i]);
    }
    return lmdecoder_features(m, utts, us, audio_dim);
  };
  for (std::size_t s = 0; s < corpus.size(); s += 32) {
    std::vector<std::size_t> idx;
    UtteranceRefs utts;
    for (std::size_t i = s; i < std::min(corpus.size(), s + 32); ++i) {
      idx.push_back(i);
      utts.push_back(&corpus[i]);
    }
    const Batch f = feats(idx);
    const TextBatch tb = make_text_batch(utts);
    const Tensor ctx = m.decoder.encode_context(f.frames, f.lengths);
    nll += cross_entropy(m.decoder.decode(ctx, f.lengths, tb.y_in, tb.j_len), tb.y_out).item();
    for (long y : tb.y_out) tokens += y != kIgnoreIndex;
  }
  const EvalReport rep = evaluate_greedy(m.decoder, corpus, feats, max_decode_len(corpus));
  return {std::exp(nll / static_cast<double>(std::max<std::size_t>(tokens, 1))), rep.corpus_wer()};
}

/// Trains memory + decoder (or audio projection + decoder) on audio-text
/// pairs. Video is never read.
inline LMDecoderResult pretrain_lmdecoder(const LMDecoderModel& init, std::span<const Utterance> corpus,
                                          const UnitCodebook* codebook, const TrainConfig& tcfg, std::size_t audio_dim,
                                          std::span<const Utterance> heldout = {}) {
  tcfg.validate("pretrain-lmdec");
  if (corpus.empty()) throw DataError("pretrain-lmdec: empty audio-text corpus");
  LMDecoderResult res{clone(init), "", -1.0, -1.0, 0.0, 0.0};
  LMDecoderModel& m = res.model;
  std::vector<UnitSequence> units, held_units;
  if (m.input == DecoderInput::kUnits) {
    if (!codebook) throw ConfigError("pretrain-lmdec: unit input needs a codebook");
    if (codebook->size != m.units()) throw ConfigError("pretrain-lmdec: codebook size differs from memory rows");
    for (const auto& u : corpus) units.push_back(quantize(u.audio, audio_dim, *codebook));
    for (const auto& u : heldout) held_units.push_back(quantize(u.audio, audio_dim, *codebook));
  }
  MetricsLog log("step,loss,attn,ctc");
  const TriStageSchedule sched = tcfg.schedule();
  Rng drop_rng(derive_seed(tcfg.seed, "lmdec/dropout"));
  BatchSampler sampler(corpus.size(), tcfg.batch_size, derive_seed(tcfg.seed, "lmdec"));
  ParamList params = collect_params(m, "lmdec");
  AdamState adam;
  Tape tape;
  for (long step = 0; step < tcfg.steps; ++step) {
    TapeScope scope(tape);
    UtteranceRefs utts;
    std::vector<const UnitSequence*> us;
    for (std::size_t i : sampler.next()) {
      utts.push_back(&corpus[i]);
      if (!units.empty()) us.push_back(&units[i]);
    }
    const ForwardMode mode{true, &drop_rng};
    const Batch f = lmdecoder_features(m, utts, us, audio_dim);
    const HybridLoss hl = hybrid_loss(m.decoder, f.frames, f.lengths, make_text_batch(utts), m.ctc_weight, mode);
    const double value = hl.total.item();
    if (step == 0) res.first_loss = value;
    res.last_loss = value;
    if ((step + 1) % tcfg.log_every == 0 || step + 1 == tcfg.steps) log.row(step + 1, {value, hl.attn.item(), hl.ctc.item()});
    optimizer_step(tape, hl.total, params, adam, sched.at(step + 1), "pretrain-lmdec", step + 1);
  }
  if (!heldout.empty()) std::tie(res.heldout_ppl, res.heldout_wer) = evaluate_lmdecoder(m, heldout, held_units, audio_dim);
  res.metrics = log.str();
  return res;
}

}  // namespace lipmem
