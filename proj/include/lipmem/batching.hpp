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

#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "lipmem/nnet.hpp"
#include "lipmem/synthlang.hpp"

namespace lipmem {

using UtteranceRefs = std::vector<const Utterance*>;

inline UtteranceRefs refs_of(std::span<const Utterance> corpus) {
  UtteranceRefs r;
  r.reserve(corpus.size());
  for (const auto& u : corpus) r.push_back(&u);
  return r;
}

inline std::size_t max_frames(const UtteranceRefs& utts) {
  std::size_t t = 0;
  for (const auto* u : utts) t = std::max(t, u->frames);
  return t;
}

/// Per-frame encoder input: video features followed by audio features. The
/// audio half is zero-filled when `audio_on[b]` is false (video-only input).
inline Batch make_encoder_batch(const UtteranceRefs& utts, std::size_t video_dim,
                                std::size_t audio_dim, const std::vector<bool>& audio_on) {
  const std::size_t b = utts.size(), t = max_frames(utts), d = video_dim + audio_dim;
  Batch batch{Tensor(Shape{b, t, d}), {}};
  auto out = batch.frames.data();
  for (std::size_t i = 0; i < b; ++i) {
    const Utterance& u = *utts[i];
    if (u.video.size() != u.frames * video_dim || u.audio.size() != u.frames * audio_dim) {
      throw DimensionError("batch: utterance " + u.id + " feature size does not match dims");
    }
    batch.lengths.push_back(u.frames);
    for (std::size_t f = 0; f < u.frames; ++f) {
      double* row = out.data() + (i * t + f) * d;
      std::copy_n(u.video.data() + f * video_dim, video_dim, row);
      if (audio_on[i]) std::copy_n(u.audio.data() + f * audio_dim, audio_dim, row + video_dim);
    }
  }
  return batch;
}

inline Batch make_encoder_batch(const UtteranceRefs& utts, std::size_t video_dim,
                                std::size_t audio_dim, bool with_audio) {
  return make_encoder_batch(utts, video_dim, audio_dim, std::vector<bool>(utts.size(), with_audio));
}

/// Continuous audio features [B, T, audio_dim].
inline Batch make_audio_batch(const UtteranceRefs& utts, std::size_t audio_dim) {
  const std::size_t b = utts.size(), t = max_frames(utts);
  Batch batch{Tensor(Shape{b, t, audio_dim}), {}};
  for (std::size_t i = 0; i < b; ++i) {
    const Utterance& u = *utts[i];
    batch.lengths.push_back(u.frames);
    std::copy(u.audio.begin(), u.audio.end(), batch.frames.data().begin() + static_cast<long>(i * t * audio_dim));
  }
  return batch;
}

/// Teacher-forcing layout: y_in = BOS y, y_out = y EOS, padded to J.
struct TextBatch {
  std::size_t batch = 0;
  std::size_t j_len = 0;
  std::vector<long> y_in;                 // B x J, padded with PAD
  std::vector<long> y_out;                // B x J, padded with kIgnoreIndex
  std::vector<std::vector<long>> tokens;  // unpadded targets (CTC)
};

inline TextBatch make_text_batch(const std::vector<std::vector<long>>& token_seqs) {
  TextBatch tb;
  tb.batch = token_seqs.size();
  for (const auto& s : token_seqs) tb.j_len = std::max(tb.j_len, s.size() + 1);
  tb.y_in.assign(tb.batch * tb.j_len, Tokenizer::kPad);
  tb.y_out.assign(tb.batch * tb.j_len, kIgnoreIndex);
  for (std::size_t i = 0; i < tb.batch; ++i) {
    const auto& s = token_seqs[i];
    tb.y_in[i * tb.j_len] = Tokenizer::kBos;
    for (std::size_t j = 0; j < s.size(); ++j) {
      tb.y_in[i * tb.j_len + j + 1] = s[j];
      tb.y_out[i * tb.j_len + j] = s[j];
    }
    tb.y_out[i * tb.j_len + s.size()] = Tokenizer::kEos;
  }
  tb.tokens = token_seqs;
  return tb;
}

inline TextBatch make_text_batch(const UtteranceRefs& utts) {
  std::vector<std::vector<long>> seqs;
  for (const auto* u : utts) seqs.push_back(Tokenizer::tokenize(u->text));
  return make_text_batch(seqs);
}

}  // namespace lipmem
