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

// Attention bridge from visual features into the language-specific memory,
// model assembly for every compared mode, and finetuning.

#pragma once

#include <array>
#include <cstring>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lipmem/batching.hpp"
#include "lipmem/container.hpp"
#include "lipmem/errors.hpp"
#include "lipmem/evalkit.hpp"
#include "lipmem/lmdec.hpp"
#include "lipmem/nnet.hpp"
#include "lipmem/train.hpp"

namespace lipmem {

enum class Mode { kProposed, kScratchDecoder, kAsrPretrain, kNoLm, kSupervisedPretrain, kTeacherKl };

inline constexpr std::array<Mode, 6> kAllModes = {Mode::kProposed,   Mode::kScratchDecoder,    Mode::kAsrPretrain,
                                                  Mode::kNoLm,       Mode::kSupervisedPretrain, Mode::kTeacherKl};

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kProposed: return "proposed";
    case Mode::kScratchDecoder: return "scratch-decoder";
    case Mode::kAsrPretrain: return "asr-pretrain";
    case Mode::kNoLm: return "no-lm";
    case Mode::kSupervisedPretrain: return "supervised-pretrain";
    case Mode::kTeacherKl: return "teacher-kl";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : kAllModes)
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown mode '" + s + "'");
}

struct BridgeParams {
  Tensor wq, wk, wv;  // [d, d]

  BridgeParams() = default;
  BridgeParams(std::size_t d, Rng& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    wq = init_normal(rng, {d, d}, sd);
    wk = init_normal(rng, {d, d}, sd);
    wv = init_normal(rng, {d, d}, sd);
  }

  static BridgeParams zeros(std::size_t d) {
    BridgeParams p;
    p.wq = init_constant({d, d}, 0.0);
    p.wk = init_constant({d, d}, 0.0);
    p.wv = init_constant({d, d}, 0.0);
    return p;
  }

  std::size_t dim() const { return wq.dim(0); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "/Wq", wq});
    out.push_back({prefix + "/Wk", wk});
    out.push_back({prefix + "/Wv", wv});
  }
};

/// Eq. (4): f_a^t = softmax(f_v^t Wq (B Wk)^T / sqrt(d)) B Wv. `f_v` is
/// [..., T, d]; `weights`, when given, receives the attention matrix.
inline Tensor memory_attend(const Tensor& f_v, const Tensor& bank, const BridgeParams& p, Tensor* weights = nullptr) {
  const std::size_t d = p.dim();
  if (f_v.dim(-1) != d || bank.rank() != 2 || bank.dim(1) != d) {
    throw DimensionError("memory_attend: f_v " + shape_str(f_v.shape()) + ", bank " + shape_str(bank.shape()) +
                         ", bridge dim " + std::to_string(d));
  }
  const Tensor q = matmul(f_v, p.wq);
  const Tensor k = matmul(bank, p.wk);
  const Tensor v = matmul(bank, p.wv);
  const Tensor w = softmax_lastdim(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d))));
  if (weights) *weights = w;
  return matmul(w, v);
}

struct ModelDims {
  std::size_t video_dim = 16;
  std::size_t audio_dim = 16;
  std::size_t units = 64;  // C
  TransformerConfig encoder{2, 32, 64, 4, 0.1, 128};
  TransformerConfig context{1, 32, 64, 4, 0.1, 128};
  TransformerConfig decoder{1, 32, 64, 4, 0.1, 64};
  double ctc_weight = 0.3;

  std::size_t input_dim() const { return video_dim + audio_dim; }
  std::size_t vocab() const { return Tokenizer::decoder_vocab(); }

  void validate() const {
    encoder.validate("encoder");
    context.validate("context");
    decoder.validate("decoder");
    if (encoder.dim != decoder.dim || context.dim != decoder.dim) throw ConfigError("model: encoder, context and decoder dims must agree");
    if (units < 2) throw ConfigError("model: need at least 2 units");
    if (ctc_weight < 0.0 || ctc_weight > 1.0) throw ConfigError("model: ctc_weight outside [0,1]");
  }
};

struct CombinedModel {
  Mode mode = Mode::kProposed;
  bool residual = false;
  EncoderModel encoder;
  bool has_memory = false;
  Tensor memory;  // [C, d], proposed only
  BridgeParams bridge;
  DecoderModel decoder;
  double ctc_weight = 0.3;

  std::size_t dim() const { return encoder.dim(); }

  /// Decoder-side input features for a video batch.
  Batch decoder_input(const Batch& video, const ForwardMode& fm = {}) const {
    const Tensor f_v = encoder.encode(video, fm);
    if (!has_memory) return {f_v, video.lengths};
    Tensor f_a = memory_attend(f_v, memory, bridge);
    if (residual) f_a = add(f_a, f_v);
    return {f_a, video.lengths};
  }

  void collect(const std::string& prefix, ParamList& out) const {
    encoder.collect(prefix.empty() ? "encoder" : prefix + "/encoder", out);
    if (has_memory) {
      bridge.collect(prefix.empty() ? "bridge" : prefix + "/bridge", out);
      out.push_back({prefix.empty() ? "lmdec/memory/B" : prefix + "/lmdec/memory/B", memory});
    }
    decoder.collect(prefix.empty() ? "lmdec/decoder" : prefix + "/lmdec/decoder", out);
  }

  ParamList encoder_params() const { return collect_params(encoder, "encoder"); }
};

inline ParamList params_of(const CombinedModel& m) {
  ParamList p;
  m.collect("", p);
  return p;
}

inline bool mode_needs_encoder(Mode m) { return m != Mode::kSupervisedPretrain; }
inline bool mode_needs_lmdec(Mode m) {
  return m == Mode::kProposed || m == Mode::kAsrPretrain || m == Mode::kNoLm || m == Mode::kSupervisedPretrain ||
         m == Mode::kTeacherKl;
}

/// Freshly initialized model of the right structure for `mode`.
inline CombinedModel blank_model(Mode mode, const ModelDims& dims, bool residual, Rng& rng, bool zero_bridge = false) {
  dims.validate();
  CombinedModel m;
  m.mode = mode;
  m.residual = residual;
  m.ctc_weight = dims.ctc_weight;
  m.encoder = EncoderModel(dims.input_dim(), dims.encoder, dims.units, rng);
  m.decoder = DecoderModel(dims.context, dims.decoder, dims.vocab(), rng);
  if (mode == Mode::kProposed) {
    m.has_memory = true;
    m.memory = init_constant({dims.units, dims.decoder.dim}, 0.0);
    m.bridge = zero_bridge ? BridgeParams::zeros(dims.decoder.dim) : BridgeParams(dims.decoder.dim, rng);
  }
  return m;
}

/// Builds the model for `mode`. Checkpoint roles per mode:
///   proposed, no-lm: encoder = masked-prediction encoder, lmdec = unit LMDecoder
///   asr-pretrain: encoder, lmdec = continuous-audio decoder
///   scratch-decoder: encoder only
///   supervised-pretrain: lmdec = end-to-end lip-reading model of the source language
///   teacher-kl: encoder, lmdec = unit LMDecoder (kept as the audio teacher, not reused)
inline CombinedModel assemble(Mode mode, const ModelDims& dims, const Checkpoint* encoder_ckpt,
                              const Checkpoint* lmdec_ckpt, bool residual, std::uint64_t seed,
                              bool zero_bridge = false) {
  if (mode_needs_encoder(mode) && !encoder_ckpt) throw ConfigError(mode_name(mode) + ": missing encoder checkpoint");
  if (mode_needs_lmdec(mode) && !lmdec_ckpt) throw ConfigError(mode_name(mode) + ": missing LMDecoder checkpoint");
  Rng rng(derive_seed(seed, "assemble/" + mode_name(mode)));
  CombinedModel m = blank_model(mode, dims, residual, rng, zero_bridge);
  ParamList enc = m.encoder_params();
  copy_values(mode == Mode::kSupervisedPretrain ? lmdec_ckpt->tensors : encoder_ckpt->tensors, enc);
  ParamList dec = collect_params(m.decoder, "lmdec/decoder");
  const bool reuse_decoder = mode == Mode::kProposed || mode == Mode::kAsrPretrain || mode == Mode::kNoLm ||
                             mode == Mode::kSupervisedPretrain;
  if (reuse_decoder) copy_values(lmdec_ckpt->tensors, dec);
  if (m.has_memory) {
    ParamList mem{{"lmdec/memory/B", m.memory}};
    copy_values(lmdec_ckpt->tensors, mem);
  }
  return m;
}

inline CombinedModel clone(const CombinedModel& m) {
  CombinedModel c = m;
  c.encoder = clone(m.encoder);
  c.decoder = clone(m.decoder);
  if (m.has_memory) {
    c.memory = Tensor::parameter(m.memory.shape(), m.memory.values());
    c.bridge.wq = Tensor::parameter(m.bridge.wq.shape(), m.bridge.wq.values());
    c.bridge.wk = Tensor::parameter(m.bridge.wk.shape(), m.bridge.wk.values());
    c.bridge.wv = Tensor::parameter(m.bridge.wv.shape(), m.bridge.wv.values());
  }
  return c;
}

inline Checkpoint to_checkpoint(const CombinedModel& m, std::uint64_t config_hash) {
  Checkpoint ck;
  ck.config_hash = config_hash;
  ck.mode = mode_name(m.mode);
  ck.meta = std::string("{\"residual\":") + (m.residual ? "true" : "false") + "}";
  ck.tensors = params_of(m);
  return ck;
}

/// Reloads a model written by to_checkpoint.
inline CombinedModel from_checkpoint(const Checkpoint& ck, const ModelDims& dims) {
  Rng rng(0);
  CombinedModel m = blank_model(parse_mode(ck.mode), dims, ck.meta.find("\"residual\":true") != std::string::npos, rng);
  ParamList all = params_of(m);
  copy_values(ck.tensors, all);
  return m;
}

/// Frozen teachers for the teacher-kl baseline.
struct Teachers {
  const LMDecoderModel* audio = nullptr;  // reads quantized audio of the same utterance
  const CombinedModel* lip = nullptr;     // lip-reading model from the high-resource language
  const UnitCodebook* codebook = nullptr;
  double weight = 0.5;
};

/// Token-level KL(teacher || student) summed over valid target positions,
/// averaged over the batch. Teacher log-probs are constants.
inline Tensor token_kl(const Tensor& student_logits, const Tensor& teacher_logits, std::span<const long> y_out,
                       std::size_t batch) {
  const std::size_t v = student_logits.dim(-1);
  const std::size_t rows = student_logits.numel() / v;
  const Tensor ls = log_softmax_lastdim(student_logits);
  Tensor coeff(ls.shape());
  double constant = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (y_out[r] == kIgnoreIndex) continue;
    const auto lt = detail::log_softmax_row(teacher_logits.data().data() + r * v, v);
    for (std::size_t j = 0; j < v; ++j) {
      const double pt = std::exp(lt[j]);
      coeff.data()[r * v + j] = -pt;
      constant += pt * lt[j];
    }
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  return add(scale(reduce_sum(mul(ls, coeff)), inv_b), Tensor::scalar(constant * inv_b));
}

struct FinetuneResult {
  CombinedModel model;
  std::string metrics;  // step,loss,attn,ctc
  std::uint64_t encoder_hash_start = 0;
  std::uint64_t encoder_hash_at_unfreeze = 0;
  double first_loss = 0.0, last_loss = 0.0;
};

inline std::uint64_t params_hash(const ParamList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    h = fnv1a(p.name, h);
    for (double v : p.tensor.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = mix64(h ^ bits);
    }
  }
  return h;
}

inline Batch video_batch(const UtteranceRefs& utts, const ModelDims& dims) {
  return make_encoder_batch(utts, dims.video_dim, dims.audio_dim, false);
}

/// Hybrid CTC/attention finetuning on video-text pairs (audio zero-filled).
/// The encoder receives no updates during the first freeze_steps steps.
inline FinetuneResult finetune(const CombinedModel& init, std::span<const Utterance> corpus, const ModelDims& dims,
                               const TrainConfig& tcfg, const Teachers* teachers = nullptr) {
  tcfg.validate("finetune");
  if (corpus.empty()) throw DataError("finetune: empty video-text corpus");
  if (init.mode == Mode::kTeacherKl && (!teachers || !teachers->audio || !teachers->lip || !teachers->codebook)) {
    throw ConfigError("teacher-kl: finetuning needs both teachers and the codebook");
  }
  FinetuneResult res{clone(init), "", 0, 0, 0.0, 0.0};
  CombinedModel& m = res.model;
  ParamList enc_params = m.encoder_params();
  ParamList rest;
  for (auto& p : params_of(m))
    if (p.name.rfind("encoder/", 0) != 0) rest.push_back(p);
  res.encoder_hash_start = params_hash(enc_params);
  res.encoder_hash_at_unfreeze = res.encoder_hash_start;

  MetricsLog log("step,loss,attn,ctc");
  const TriStageSchedule sched = tcfg.schedule();
  Rng drop_rng(derive_seed(tcfg.seed, "finetune/dropout"));
  BatchSampler sampler(corpus.size(), tcfg.batch_size, derive_seed(tcfg.seed, "finetune"));
  AdamState adam_enc, adam_rest;
  Tape tape;
  auto set_encoder_trainable = [&](bool on) {
    for (auto& p : enc_params) p.tensor.set_requires_grad(on);
  };
  set_encoder_trainable(tcfg.freeze_steps == 0);
  for (long step = 0; step < tcfg.steps; ++step) {
    const bool frozen = step < tcfg.freeze_steps;
    if (step == tcfg.freeze_steps && step > 0) {
      res.encoder_hash_at_unfreeze = params_hash(enc_params);
      set_encoder_trainable(true);
    }
    TapeScope scope(tape);
    UtteranceRefs utts;
    for (std::size_t i : sampler.next()) utts.push_back(&corpus[i]);
    const ForwardMode fm{true, &drop_rng};
    const Batch in = m.decoder_input(video_batch(utts, dims), fm);
    const TextBatch tb = make_text_batch(utts);
    HybridLoss hl = hybrid_loss(m.decoder, in.frames, in.lengths, tb, m.ctc_weight, fm);
    Tensor loss = hl.total;
    if (m.mode == Mode::kTeacherKl) {
      Tensor student, lip_logits, audio_logits;
      {
        const Tensor ctx = m.decoder.encode_context(in.frames, in.lengths, fm);
        student = m.decoder.decode(ctx, in.lengths, tb.y_in, tb.j_len, fm);
      }
      {
        NoGradScope ng;
        const Batch lin = teachers->lip->decoder_input(video_batch(utts, dims));
        lip_logits = teachers->lip->decoder.decode(teachers->lip->decoder.encode_context(lin.frames, lin.lengths),
                                                   lin.lengths, tb.y_in, tb.j_len);
        std::vector<UnitSequence> us;
        for (const auto* u : utts) us.push_back(quantize(u->audio, dims.audio_dim, *teachers->codebook));
        std::vector<const UnitSequence*> up;
        for (const auto& u : us) up.push_back(&u);
        const Batch ain = lmdecoder_features(*teachers->audio, utts, up, dims.audio_dim);
        audio_logits = teachers->audio->decoder.decode(
            teachers->audio->decoder.encode_context(ain.frames, ain.lengths), ain.lengths, tb.y_in, tb.j_len);
      }
      const Tensor kl = add(token_kl(student, lip_logits, tb.y_out, tb.batch), token_kl(student, audio_logits, tb.y_out, tb.batch));
      loss = add(loss, scale(kl, teachers->weight * 0.5));
    }
    const double value = loss.item();
    if (step == 0) res.first_loss = value;
    res.last_loss = value;
    if ((step + 1) % tcfg.log_every == 0 || step + 1 == tcfg.steps) log.row(step + 1, {value, hl.attn.item(), hl.ctc.item()});
    if (!std::isfinite(value)) throw TrainingError("finetune", step + 1, "non-finite loss");
    zero_grads(rest);
    zero_grads(enc_params);
    tape.backward(loss);
    const double lr = sched.at(step + 1);
    try {
      sgd_adam_step(rest, adam_rest, lr);
      if (!frozen) sgd_adam_step(enc_params, adam_enc, lr);
    } catch (const NumericError& e) {
      throw TrainingError("finetune", step + 1, e.what());
    }
    tape.reset();
  }
  if (tcfg.freeze_steps >= tcfg.steps) res.encoder_hash_at_unfreeze = params_hash(enc_params);
  set_encoder_trainable(true);
  res.metrics = log.str();
  return res;
}

/// Greedy lip-reading transcripts of `corpus` (video only).
inline EvalReport evaluate(const CombinedModel& m, std::span<const Utterance> corpus, const ModelDims& dims) {
  auto feats = [&](const std::vector<std::size_t>& idx) {
    UtteranceRefs utts;
    for (std::size_t i : idx) utts.push_back(&corpus[i]);
    return m.decoder_input(video_batch(utts, dims));
  };
  return evaluate_greedy(m.decoder, corpus, feats, max_decode_len(corpus));
}

}  // namespace lipmem
