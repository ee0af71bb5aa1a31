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

// Toy languages over a shared phoneme inventory and paired audio/video/text
// utterances.
//
// A global inventory (fixed by a seed) assigns every phoneme an audio emission
// center and a viseme; visemes have their own video centers, so phonemes that
// share a viseme look identical. Languages draw their inventories from a
// common core plus a private pool indexed by the language's slot, which makes
// the overlap between two languages exact.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lipmem/errors.hpp"
#include "lipmem/random.hpp"

namespace lipmem {

struct PhonemeInventory {
  std::size_t phonemes = 40;
  std::size_t visemes = 12;
  std::size_t audio_dim = 16;
  std::size_t video_dim = 16;
  std::vector<double> audio_centers;   // phonemes x audio_dim
  std::vector<double> viseme_centers;  // visemes x video_dim
  std::vector<int> viseme_of;          // phoneme -> viseme
  std::vector<int> order;              // seeded permutation: core first, then private pools

  std::span<const double> audio_center(int p) const {
    return {audio_centers.data() + static_cast<std::size_t>(p) * audio_dim, audio_dim};
  }
  std::span<const double> video_center(int p) const {
    return {viseme_centers.data() + static_cast<std::size_t>(viseme_of[static_cast<std::size_t>(p)]) * video_dim,
            video_dim};
  }
};

namespace detail {

// Uniform draws in [-1,1]^d, scaled up until the closest pair is >= 1 apart.
inline std::vector<double> separated_centers(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> c(n * d);
  for (auto& v : c) v = uniform(rng, -1.0, 1.0);
  double min_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += (c[i * d + k] - c[j * d + k]) * (c[i * d + k] - c[j * d + k]);
      min_dist = std::min(min_dist, std::sqrt(s));
    }
  if (n > 1 && min_dist < 1.0) {
    if (min_dist <= 0.0) throw GenerationError("synth: coincident emission centers");
    for (auto& v : c) v /= min_dist;
  }
  return c;
}

}  // namespace detail

inline PhonemeInventory make_inventory(std::uint64_t global_seed, std::size_t phonemes,
                                       std::size_t visemes, std::size_t audio_dim,
                                       std::size_t video_dim) {
  if (visemes == 0 || visemes >= phonemes) {
    throw GenerationError("synth: need 0 < visemes < phonemes (got V=" + std::to_string(visemes) +
                          ", P=" + std::to_string(phonemes) + ")");
  }
  PhonemeInventory inv;
  inv.phonemes = phonemes;
  inv.visemes = visemes;
  inv.audio_dim = audio_dim;
  inv.video_dim = video_dim;
  Rng rng(derive_seed(global_seed, "inventory"));
  inv.audio_centers = detail::separated_centers(rng, phonemes, audio_dim);
  inv.viseme_centers = detail::separated_centers(rng, visemes, video_dim);
  std::vector<int> perm(phonemes);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_in_place(perm, rng);
  inv.viseme_of.assign(phonemes, 0);
  for (std::size_t i = 0; i < phonemes; ++i) inv.viseme_of[static_cast<std::size_t>(perm[i])] = static_cast<int>(i % visemes);
  inv.order.resize(phonemes);
  std::iota(inv.order.begin(), inv.order.end(), 0);
  shuffle_in_place(inv.order, rng);
  return inv;
}

struct Word {
  std::string text;
  std::vector<int> phonemes;
};

struct LanguageParams {
  std::uint64_t global_seed = 1;
  std::string name = "A";
  std::size_t slot = 0;  // index of the private phoneme pool
  double share_fraction = 0.5;
  std::size_t inventory_size = 40;  // global P
  std::size_t language_size = 20;   // phonemes per language
  std::size_t visemes = 12;
  std::size_t words = 60;
  std::size_t min_word_len = 2;
  std::size_t max_word_len = 6;
  std::size_t audio_dim = 16;
  std::size_t video_dim = 16;
};

struct LanguageSpec {
  std::string name;
  PhonemeInventory inventory;
  std::vector<int> phonemes;           // sorted
  std::map<int, char> grapheme;        // phoneme -> letter
  std::vector<Word> lexicon;
  std::map<int, int> viseme_map;       // phoneme -> viseme, restricted to this language
};

/// Builds one language. Two languages with the same global seed and sizes
/// share exactly ceil(share_fraction * language_size) phonemes when their
/// slots differ.
inline LanguageSpec gen_language(const LanguageParams& p) {
  if (p.share_fraction < 0.0 || p.share_fraction > 1.0) {
    throw GenerationError("synth: share_fraction outside [0,1]");
  }
  if (p.language_size > p.inventory_size || p.language_size < 2) {
    throw GenerationError("synth: language size must be in [2, inventory size]");
  }
  if (p.language_size > 26) throw GenerationError("synth: at most 26 phonemes fit the alphabet");
  if (p.min_word_len < 1 || p.min_word_len > p.max_word_len) {
    throw GenerationError("synth: bad word length range");
  }
  LanguageSpec lang;
  lang.name = p.name;
  lang.inventory = make_inventory(p.global_seed, p.inventory_size, p.visemes, p.audio_dim, p.video_dim);
  const auto& order = lang.inventory.order;

  const auto shared = static_cast<std::size_t>(
      std::ceil(p.share_fraction * static_cast<double>(p.language_size) - 1e-12));
  const std::size_t priv = p.language_size - shared;
  const std::size_t pool_begin = shared + p.slot * priv;
  if (pool_begin + priv > p.inventory_size) {
    throw GenerationError("synth: inventory of " + std::to_string(p.inventory_size) +
                          " phonemes has no private pool for slot " + std::to_string(p.slot));
  }
  for (std::size_t i = 0; i < shared; ++i) lang.phonemes.push_back(order[i]);
  for (std::size_t i = 0; i < priv; ++i) lang.phonemes.push_back(order[pool_begin + i]);
  std::sort(lang.phonemes.begin(), lang.phonemes.end());

  Rng rng(derive_seed(p.global_seed, "language/" + p.name));
  std::vector<char> letters;
  for (char c = 'a'; c <= 'z'; ++c) letters.push_back(c);
  shuffle_in_place(letters, rng);
  for (std::size_t i = 0; i < lang.phonemes.size(); ++i) lang.grapheme[lang.phonemes[i]] = letters[i];

  std::set<int> seen_visemes;
  bool ambiguous = false;
  for (int ph : lang.phonemes) {
    const int v = lang.inventory.viseme_of[static_cast<std::size_t>(ph)];
    lang.viseme_map[ph] = v;
    if (!seen_visemes.insert(v).second) ambiguous = true;
  }
  if (!ambiguous) throw GenerationError("synth: language " + p.name + " has no shared viseme");

  double available = 0.0;
  for (std::size_t len = p.min_word_len; len <= p.max_word_len; ++len) {
    available += std::pow(static_cast<double>(p.language_size), static_cast<double>(len));
  }
  if (static_cast<double>(p.words) > available) {
    throw GenerationError("synth: " + std::to_string(p.words) + " words requested but only " +
                          std::to_string(static_cast<long long>(available)) +
                          " distinct phoneme strings exist");
  }
  std::set<std::vector<int>> used;
  while (lang.lexicon.size() < p.words) {
    const std::size_t len = p.min_word_len + uniform_index(rng, p.max_word_len - p.min_word_len + 1);
    Word w;
    for (std::size_t i = 0; i < len; ++i) w.phonemes.push_back(lang.phonemes[uniform_index(rng, lang.phonemes.size())]);
    if (!used.insert(w.phonemes).second) continue;
    for (int ph : w.phonemes) w.text.push_back(lang.grapheme.at(ph));
    lang.lexicon.push_back(std::move(w));
  }
  return lang;
}

struct Utterance {
  std::string id;
  std::string lang;
  std::string text;
  std::size_t frames = 0;          // T (video) == T_a (audio) at desk scale
  std::vector<double> audio;       // frames x audio_dim
  std::vector<double> video;       // frames x video_dim
  std::vector<int> phoneme_labels; // frames

  std::size_t audio_frames() const { return frames; }
};

struct CorpusParams {
  std::size_t n_utts = 100;
  std::size_t min_words = 1;
  std::size_t max_words = 3;
  double audio_noise = 0.1;
  double video_noise = 0.3;
  std::size_t frames_per_phoneme = 3;
  std::uint64_t seed = 1;
  std::string id_prefix;  // defaults to the language name
  std::size_t first_index = 0;
};

inline Utterance gen_utterance(const LanguageSpec& lang, const CorpusParams& p, std::size_t index) {
  Rng rng(derive_seed(derive_seed(p.seed, "corpus/" + lang.name), index));
  const auto& inv = lang.inventory;
  Utterance u;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "-%06zu", index);
  u.id = (p.id_prefix.empty() ? lang.name : p.id_prefix) + buf;
  u.lang = lang.name;
  const std::size_t n_words = p.min_words + uniform_index(rng, p.max_words - p.min_words + 1);
  std::vector<int> phones;
  for (std::size_t w = 0; w < n_words; ++w) {
    const Word& word = lang.lexicon[uniform_index(rng, lang.lexicon.size())];
    if (w) u.text.push_back(' ');
    u.text += word.text;
    phones.insert(phones.end(), word.phonemes.begin(), word.phonemes.end());
  }
  u.frames = phones.size() * p.frames_per_phoneme;
  u.audio.reserve(u.frames * inv.audio_dim);
  u.video.reserve(u.frames * inv.video_dim);
  for (int ph : phones) {
    for (std::size_t f = 0; f < p.frames_per_phoneme; ++f) {
      for (double c : inv.audio_center(ph)) u.audio.push_back(c + p.audio_noise * normal(rng));
      for (double c : inv.video_center(ph)) u.video.push_back(c + p.video_noise * normal(rng));
      u.phoneme_labels.push_back(ph);
    }
  }
  return u;
}

inline std::vector<Utterance> gen_corpus(const LanguageSpec& lang, const CorpusParams& p) {
  if (p.n_utts < 1) throw GenerationError("synth: n_utts must be >= 1");
  if (p.min_words < 1 || p.min_words > p.max_words) throw GenerationError("synth: bad length range");
  if (p.frames_per_phoneme < 1) throw GenerationError("synth: frames_per_phoneme must be >= 1");
  std::vector<Utterance> out;
  out.reserve(p.n_utts);
  for (std::size_t i = 0; i < p.n_utts; ++i) out.push_back(gen_utterance(lang, p, p.first_index + i));
  return out;
}

/// Character tokenizer shared by all languages: PAD, BOS, EOS, SPACE, a-z,
/// then BLANK as the last id.
class Tokenizer {
 public:
  static constexpr long kPad = 0;
  static constexpr long kBos = 1;
  static constexpr long kEos = 2;
  static constexpr long kSpace = 3;
  static constexpr long kFirstLetter = 4;
  static constexpr long kBlank = kFirstLetter + 26;

  /// Tokens the decoder can emit (everything except BLANK).
  static constexpr std::size_t decoder_vocab() { return static_cast<std::size_t>(kBlank); }
  static constexpr std::size_t size() { return static_cast<std::size_t>(kBlank) + 1; }

  static std::vector<long> tokenize(const std::string& text) {
    std::vector<long> ids;
    ids.reserve(text.size());
    for (char c : text) {
      if (c == ' ') {
        ids.push_back(kSpace);
      } else if (c >= 'a' && c <= 'z') {
        ids.push_back(kFirstLetter + (c - 'a'));
      } else {
        throw VocabularyError(std::string("tokenize: unknown symbol '") + c + "'");
      }
    }
    return ids;
  }

  /// Inverse of tokenize. Special ids are an error when `strict`, skipped
  /// otherwise (model output).
  static std::string detokenize(std::span<const long> ids, bool strict = true) {
    std::string s;
    for (long id : ids) {
      if (id == kSpace) {
        s.push_back(' ');
      } else if (id >= kFirstLetter && id < kBlank) {
        s.push_back(static_cast<char>('a' + (id - kFirstLetter)));
      } else if (strict) {
        throw VocabularyError("detokenize: id " + std::to_string(id) + " has no surface form");
      }
    }
    return s;
  }
};

}  // namespace lipmem
