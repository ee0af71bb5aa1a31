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

// Run configuration: JSON files, named presets, model hash.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lipmem/bridge.hpp"
#include "lipmem/errors.hpp"
#include "lipmem/gsk.hpp"
#include "lipmem/synthlang.hpp"
#include "lipmem/train.hpp"

namespace lipmem {

using Json = nlohmann::ordered_json;

/// Synthetic data for a run: both languages and the split sizes.
struct SynthConfig {
  double share_fraction = 0.5;
  std::size_t inventory_size = 40;
  std::size_t language_size = 20;
  std::size_t visemes = 12;
  std::size_t words = 60;
  std::size_t min_word_len = 2;
  std::size_t max_word_len = 6;
  std::size_t min_words = 1;
  std::size_t max_words = 3;
  double audio_noise = 0.1;
  double video_noise = 0.3;
  std::size_t frames_per_phoneme = 3;
  std::size_t a_utts = 2000;              // A: audio + video + text
  std::size_t b_audio_text = 2000;        // B: large audio-text split
  std::size_t b_audio_text_small = 500;   // B: small audio-text split
  std::size_t b_video_text = 200;
  std::size_t b_test = 200;
};

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::string> modes{"proposed", "scratch-decoder", "asr-pretrain",
                                 "no-lm", "supervised-pretrain", "teacher-kl"};
  std::vector<std::string> lm_variants{"large", "small", "both"};
  std::vector<double> video_text_fractions{1.0 / 3.0, 2.0 / 3.0, 1.0};
  std::vector<std::size_t> audio_text_amounts{0, 40, 500, 2000};
};

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 1;
  std::string mode = "proposed";
  bool residual = false;
  std::string data_dir;  // empty: corpora are generated from the seed
  SynthConfig synth;
  ModelDims model;
  GskConfig gsk;
  TrainConfig pretrain_gsk, pretrain_lmdec, finetune;
  double teacher_weight = 0.5;
  ExperimentConfig experiment;

  void validate() const;
};

namespace detail {

class JsonReader {
 public:
  JsonReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline Json to_json(const TransformerConfig& c) {
  return Json{{"layers", c.layers}, {"dim", c.dim}, {"ffn_dim", c.ffn_dim},
              {"heads", c.heads},   {"dropout", c.dropout}, {"max_len", c.max_len}};
}

inline void from_json(const Json& j, const std::string& where, TransformerConfig& c) {
  JsonReader r(j, where);
  r.get("layers", c.layers);
  r.get("dim", c.dim);
  r.get("ffn_dim", c.ffn_dim);
  r.get("heads", c.heads);
  r.get("dropout", c.dropout);
  r.get("max_len", c.max_len);
  r.finish();
}

inline Json to_json(const ModelDims& m) {
  return Json{{"video_dim", m.video_dim}, {"audio_dim", m.audio_dim}, {"units", m.units},
              {"ctc_weight", m.ctc_weight}, {"encoder", to_json(m.encoder)},
              {"context", to_json(m.context)}, {"decoder", to_json(m.decoder)}};
}

inline void from_json(const Json& j, const std::string& where, ModelDims& m) {
  JsonReader r(j, where);
  r.get("video_dim", m.video_dim);
  r.get("audio_dim", m.audio_dim);
  r.get("units", m.units);
  r.get("ctc_weight", m.ctc_weight);
  if (const Json* c = r.child("encoder")) from_json(*c, r.path("encoder"), m.encoder);
  if (const Json* c = r.child("context")) from_json(*c, r.path("context"), m.context);
  if (const Json* c = r.child("decoder")) from_json(*c, r.path("decoder"), m.decoder);
  r.finish();
}

inline Json to_json(const TrainConfig& t) {
  return Json{{"steps", t.steps},   {"batch_size", t.batch_size}, {"peak_lr", t.peak_lr},
              {"warmup", t.warmup}, {"hold", t.hold},             {"decay", t.decay},
              {"decay_floor", t.decay_floor}, {"freeze_steps", t.freeze_steps},
              {"log_every", t.log_every}};
}

inline void from_json(const Json& j, const std::string& where, TrainConfig& t) {
  JsonReader r(j, where);
  r.get("steps", t.steps);
  r.get("batch_size", t.batch_size);
  r.get("peak_lr", t.peak_lr);
  r.get("warmup", t.warmup);
  r.get("hold", t.hold);
  r.get("decay", t.decay);
  r.get("decay_floor", t.decay_floor);
  r.get("freeze_steps", t.freeze_steps);
  r.get("log_every", t.log_every);
  r.finish();
}

inline Json to_json(const GskConfig& g) {
  return Json{{"alpha", g.mask.alpha}, {"mask_fraction", g.mask.mask_fraction},
              {"modality_dropout", g.modality_dropout}, {"refine_iters", g.refine_iters},
              {"kmeans_iters", g.kmeans_iters}};
}

inline void from_json(const Json& j, const std::string& where, GskConfig& g) {
  JsonReader r(j, where);
  r.get("alpha", g.mask.alpha);
  r.get("mask_fraction", g.mask.mask_fraction);
  r.get("modality_dropout", g.modality_dropout);
  r.get("refine_iters", g.refine_iters);
  r.get("kmeans_iters", g.kmeans_iters);
  r.finish();
}

inline Json to_json(const SynthConfig& s) {
  return Json{{"share_fraction", s.share_fraction}, {"inventory_size", s.inventory_size},
              {"language_size", s.language_size},   {"visemes", s.visemes},
              {"words", s.words},                   {"min_word_len", s.min_word_len},
              {"max_word_len", s.max_word_len},     {"min_words", s.min_words},
              {"max_words", s.max_words},           {"audio_noise", s.audio_noise},
              {"video_noise", s.video_noise},       {"frames_per_phoneme", s.frames_per_phoneme},
              {"a_utts", s.a_utts},                 {"b_audio_text", s.b_audio_text},
              {"b_audio_text_small", s.b_audio_text_small}, {"b_video_text", s.b_video_text},
              {"b_test", s.b_test}};
}

inline void from_json(const Json& j, const std::string& where, SynthConfig& s) {
  JsonReader r(j, where);
  r.get("share_fraction", s.share_fraction);
  r.get("inventory_size", s.inventory_size);
  r.get("language_size", s.language_size);
  r.get("visemes", s.visemes);
  r.get("words", s.words);
  r.get("min_word_len", s.min_word_len);
  r.get("max_word_len", s.max_word_len);
  r.get("min_words", s.min_words);
  r.get("max_words", s.max_words);
  r.get("audio_noise", s.audio_noise);
  r.get("video_noise", s.video_noise);
  r.get("frames_per_phoneme", s.frames_per_phoneme);
  r.get("a_utts", s.a_utts);
  r.get("b_audio_text", s.b_audio_text);
  r.get("b_audio_text_small", s.b_audio_text_small);
  r.get("b_video_text", s.b_video_text);
  r.get("b_test", s.b_test);
  r.finish();
}

inline Json to_json(const ExperimentConfig& e) {
  return Json{{"seeds", e.seeds}, {"modes", e.modes}, {"lm_variants", e.lm_variants},
              {"video_text_fractions", e.video_text_fractions},
              {"audio_text_amounts", e.audio_text_amounts}};
}

inline void from_json(const Json& j, const std::string& where, ExperimentConfig& e) {
  JsonReader r(j, where);
  r.get("seeds", e.seeds);
  r.get("modes", e.modes);
  r.get("lm_variants", e.lm_variants);
  r.get("video_text_fractions", e.video_text_fractions);
  r.get("audio_text_amounts", e.audio_text_amounts);
  r.finish();
}

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  return Json{{"preset", c.preset},
              {"seed", c.seed},
              {"mode", c.mode},
              {"residual", c.residual},
              {"data_dir", c.data_dir},
              {"synth", detail::to_json(c.synth)},
              {"model", detail::to_json(c.model)},
              {"gsk", detail::to_json(c.gsk)},
              {"pretrain_gsk", detail::to_json(c.pretrain_gsk)},
              {"pretrain_lmdec", detail::to_json(c.pretrain_lmdec)},
              {"finetune", detail::to_json(c.finetune)},
              {"teacher_weight", c.teacher_weight},
              {"experiment", detail::to_json(c.experiment)}};
}

/// Default small-model preset sized for a single laptop core.
inline RunConfig desk_preset() {
  RunConfig c;
  c.pretrain_gsk.steps = 2000;
  c.pretrain_gsk.peak_lr = 1e-2;
  c.pretrain_gsk.log_every = 100;
  c.pretrain_lmdec.steps = 2000;
  c.pretrain_lmdec.peak_lr = 1e-2;
  c.pretrain_lmdec.log_every = 100;
  c.finetune.steps = 1000;
  c.finetune.peak_lr = 1e-2;
  c.finetune.warmup = 0.2;
  c.finetune.decay = 0.8;
  c.finetune.log_every = 50;
  return c;
}

/// Desk preset with the English-style encoder freeze (40% of finetune steps).
inline RunConfig desk_freeze_preset() {
  RunConfig c = desk_preset();
  c.preset = "desk-freeze";
  c.finetune.freeze_steps = c.finetune.steps * 2 / 5;
  return c;
}

/// Full-size model shapes and schedule. Documentation only: far too slow here.
inline RunConfig full_preset() {
  RunConfig c = desk_preset();
  c.preset = "full";
  c.model.units = 1000;
  c.model.encoder = {12, 768, 3072, 12, 0.1, 1024};
  c.model.context = {6, 768, 3072, 4, 0.1, 1024};
  c.model.decoder = {6, 768, 3072, 4, 0.1, 256};
  c.gsk.refine_iters = 5;
  for (TrainConfig* t : {&c.pretrain_gsk, &c.pretrain_lmdec, &c.finetune}) t->peak_lr = 1e-3;
  c.finetune.steps = 30000;
  c.finetune.freeze_steps = 20000;
  return c;
}

/// Tiny everything; used by tests and quick checks.
inline RunConfig smoke_preset() {
  RunConfig c = desk_preset();
  c.preset = "smoke";
  c.synth.a_utts = 60;
  c.synth.b_audio_text = 60;
  c.synth.b_audio_text_small = 20;
  c.synth.b_video_text = 24;
  c.synth.b_test = 12;
  c.model.units = 16;
  c.model.encoder = {1, 16, 32, 2, 0.1, 128};
  c.model.context = {1, 16, 32, 2, 0.1, 128};
  c.model.decoder = {1, 16, 32, 2, 0.1, 64};
  c.gsk.refine_iters = 1;
  c.gsk.kmeans_iters = 10;
  for (TrainConfig* t : {&c.pretrain_gsk, &c.pretrain_lmdec, &c.finetune}) {
    t->steps = 20;
    t->batch_size = 4;
    t->log_every = 5;
  }
  c.experiment.seeds = {1};
  c.experiment.audio_text_amounts = {0, 20, 60};
  return c;
}

inline std::vector<std::string> preset_names() { return {"desk", "desk-freeze", "full", "smoke"}; }

inline RunConfig preset(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "desk-freeze") return desk_freeze_preset();
  if (name == "full") return full_preset();
  if (name == "smoke") return smoke_preset();
  throw ConfigError("unknown preset '" + name + "'");
}

/// Parses a config document. Keys not given keep the named preset's values
/// ("preset" key, default "desk").
inline RunConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  RunConfig c = preset(j.contains("preset") ? j.at("preset").get<std::string>() : "desk");
  detail::JsonReader r(j, "config");
  r.get("preset", c.preset);
  r.get("seed", c.seed);
  r.get("mode", c.mode);
  r.get("residual", c.residual);
  r.get("data_dir", c.data_dir);
  if (const Json* s = r.child("synth")) detail::from_json(*s, "config.synth", c.synth);
  if (const Json* s = r.child("model")) detail::from_json(*s, "config.model", c.model);
  if (const Json* s = r.child("gsk")) detail::from_json(*s, "config.gsk", c.gsk);
  if (const Json* s = r.child("pretrain_gsk")) detail::from_json(*s, "config.pretrain_gsk", c.pretrain_gsk);
  if (const Json* s = r.child("pretrain_lmdec")) detail::from_json(*s, "config.pretrain_lmdec", c.pretrain_lmdec);
  if (const Json* s = r.child("finetune")) detail::from_json(*s, "config.finetune", c.finetune);
  r.get("teacher_weight", c.teacher_weight);
  if (const Json* s = r.child("experiment")) detail::from_json(*s, "config.experiment", c.experiment);
  r.finish();
  c.validate();
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

/// `arg` is a preset name or a path to a JSON file.
inline RunConfig load_config(const std::string& arg) {
  for (const auto& n : preset_names()) {
    if (n == arg) {
      RunConfig c = preset(arg);
      c.validate();
      return c;
    }
  }
  std::ifstream in(arg, std::ios::binary);
  if (!in) throw ConfigError("config: no preset or readable file named '" + arg + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string dump_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

/// Hash of the model structure. Checkpoints carry it; loading into a model of
/// another shape is refused.
inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a(detail::to_json(c.model).dump()); }

inline void RunConfig::validate() const {
  model.validate();
  parse_mode(mode);
  gsk.mask.validate();
  if (gsk.modality_dropout < 0.0 || gsk.modality_dropout > 1.0) throw ConfigError("gsk.modality_dropout outside [0,1]");
  pretrain_gsk.validate("pretrain_gsk");
  pretrain_lmdec.validate("pretrain_lmdec");
  finetune.validate("finetune");
  if (teacher_weight < 0.0) throw ConfigError("teacher_weight must be >= 0");
  if (synth.b_video_text == 0 || synth.b_test == 0) throw ConfigError("synth: empty video-text or test split");
  if (experiment.seeds.empty()) throw ConfigError("experiment: empty seed list");
  for (const auto& m : experiment.modes) parse_mode(m);
  for (const auto& v : experiment.lm_variants) {
    if (v != "large" && v != "small" && v != "both") throw ConfigError("experiment: unknown lm variant '" + v + "'");
  }
  for (double f : experiment.video_text_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("experiment: video_text_fractions must lie in (0,1]");
  }
  if (model.audio_dim == 0 || model.video_dim == 0) throw ConfigError("model: feature dims must be positive");
}

}  // namespace lipmem
