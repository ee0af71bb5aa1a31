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

// Pipeline stages and the multi-seed comparison runner.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lipmem/bridge.hpp"
#include "lipmem/config.hpp"
#include "lipmem/container.hpp"
#include "lipmem/gsk.hpp"
#include "lipmem/lmdec.hpp"
#include "lipmem/units.hpp"

namespace lipmem {

using LogFn = std::function<void(const std::string&)>;

/// All corpora of one seed. A is the high-resource source language, B the
/// low-resource target.
struct Datasets {
  std::vector<Utterance> a_train;     // audio + video + text
  std::vector<Utterance> b_at_large;  // audio-text
  std::vector<Utterance> b_at_small;  // audio-text, disjoint from large
  std::vector<Utterance> b_vt;        // video-text
  std::vector<Utterance> b_test;
};

inline const std::vector<std::pair<std::string, std::vector<Utterance> Datasets::*>>& dataset_splits() {
  static const std::vector<std::pair<std::string, std::vector<Utterance> Datasets::*>> s = {
      {"a_train", &Datasets::a_train},   {"b_audio_text", &Datasets::b_at_large},
      {"b_audio_text_small", &Datasets::b_at_small}, {"b_video_text", &Datasets::b_vt},
      {"b_test", &Datasets::b_test}};
  return s;
}

inline LanguageParams language_params(const RunConfig& cfg, std::uint64_t seed, const std::string& name,
                                      std::size_t slot) {
  const SynthConfig& s = cfg.synth;
  LanguageParams p;
  p.global_seed = seed;
  p.name = name;
  p.slot = slot;
  p.share_fraction = s.share_fraction;
  p.inventory_size = s.inventory_size;
  p.language_size = s.language_size;
  p.visemes = s.visemes;
  p.words = s.words;
  p.min_word_len = s.min_word_len;
  p.max_word_len = s.max_word_len;
  p.audio_dim = cfg.model.audio_dim;
  p.video_dim = cfg.model.video_dim;
  return p;
}

inline Datasets make_datasets(const RunConfig& cfg, std::uint64_t seed) {
  const LanguageSpec a = gen_language(language_params(cfg, seed, "A", 0));
  const LanguageSpec b = gen_language(language_params(cfg, seed, "B", 1));
  auto corpus = [&](const LanguageSpec& lang, std::size_t n, std::size_t first) {
    CorpusParams p;
    p.n_utts = n;
    p.min_words = cfg.synth.min_words;
    p.max_words = cfg.synth.max_words;
    p.audio_noise = cfg.synth.audio_noise;
    p.video_noise = cfg.synth.video_noise;
    p.frames_per_phoneme = cfg.synth.frames_per_phoneme;
    p.seed = seed;
    p.first_index = first;
    return gen_corpus(lang, p);
  };
  Datasets d;
  d.a_train = corpus(a, cfg.synth.a_utts, 0);
  d.b_at_large = corpus(b, cfg.synth.b_audio_text, 0);
  d.b_vt = corpus(b, cfg.synth.b_video_text, 100000);
  d.b_test = corpus(b, cfg.synth.b_test, 200000);
  d.b_at_small = corpus(b, cfg.synth.b_audio_text_small, 300000);
  return d;
}

inline void save_datasets(const std::filesystem::path& dir, const Datasets& d, const ModelDims& dims) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, member] : dataset_splits()) save_corpus(dir / name, d.*member, dims.audio_dim, dims.video_dim);
}

inline Datasets load_datasets(const std::filesystem::path& dir) {
  Datasets d;
  for (const auto& [name, member] : dataset_splits()) d.*member = load_corpus(dir / name);
  return d;
}

/// Corpora for `seed`: read from cfg.data_dir when set, else generated.
inline Datasets datasets_for(const RunConfig& cfg, std::uint64_t seed) {
  return cfg.data_dir.empty() ? make_datasets(cfg, seed) : load_datasets(cfg.data_dir);
}

/// Frames expressed as hours at 25 frames per second.
inline double hours_equiv(std::span<const Utterance> corpus) {
  std::size_t frames = 0;
  for (const auto& u : corpus) frames += u.frames;
  return static_cast<double>(frames) / (25.0 * 3600.0);
}

/// Runs `fn`, prefixing any library error with the stage name.
template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.category(), "stage " + name + ": " + e.what());
  }
}

inline TrainConfig seeded(TrainConfig t, std::uint64_t seed) {
  t.seed = seed;
  return t;
}

// ---- single stages ---------------------------------------------------------

/// Codebook over pooled audio of the source corpus and the target audio-text.
inline UnitCodebook fit_units(const RunConfig& cfg, const Datasets& d, std::uint64_t seed) {
  auto pts = pooled_audio(d.a_train);
  const auto pb = pooled_audio(d.b_at_large);
  pts.insert(pts.end(), pb.begin(), pb.end());
  return kmeans_fit(pts, cfg.model.audio_dim, cfg.model.units, cfg.gsk.kmeans_iters, derive_seed(seed, "units"))
      .codebook;
}

inline Checkpoint units_checkpoint(const UnitCodebook& cb, std::uint64_t hash) {
  Checkpoint ck;
  ck.config_hash = hash;
  ck.mode = "units";
  ck.tensors.push_back(codebook_tensor(cb));
  return ck;
}

inline PretrainResult run_pretrain_gsk(const RunConfig& cfg, const Datasets& d, const UnitCodebook& cb,
                                       std::uint64_t seed) {
  Rng rng(derive_seed(seed, "init/encoder"));
  const EncoderModel init(cfg.model.input_dim(), cfg.model.encoder, cfg.model.units, rng);
  return pretrain_encoder(init, d.a_train, cb, cfg.gsk, seeded(cfg.pretrain_gsk, seed), cfg.model.video_dim,
                          cfg.model.audio_dim);
}

inline Checkpoint encoder_checkpoint(const EncoderModel& m, std::uint64_t hash) {
  Checkpoint ck;
  ck.config_hash = hash;
  ck.mode = "encoder";
  ck.tensors = collect_params(m, "encoder");
  return ck;
}

inline LMDecoderModel blank_lmdecoder(const RunConfig& cfg, DecoderInput in, std::uint64_t seed) {
  Rng rng(derive_seed(seed, in == DecoderInput::kUnits ? "init/lmdec" : "init/lmdec-audio"));
  const ModelDims& m = cfg.model;
  return LMDecoderModel(in, in == DecoderInput::kUnits ? m.units : m.audio_dim, m.context, m.decoder, m.vocab(),
                        m.ctc_weight, rng);
}

inline LMDecoderResult run_pretrain_lmdec(const RunConfig& cfg, std::span<const Utterance> corpus,
                                          const UnitCodebook* cb, DecoderInput in, std::uint64_t seed,
                                          std::span<const Utterance> heldout = {}) {
  return pretrain_lmdecoder(blank_lmdecoder(cfg, in, seed), corpus, cb, seeded(cfg.pretrain_lmdec, seed),
                            cfg.model.audio_dim, heldout);
}

inline Checkpoint lmdec_checkpoint(const LMDecoderModel& m, std::uint64_t hash) {
  Checkpoint ck;
  ck.config_hash = hash;
  ck.mode = m.input == DecoderInput::kUnits ? "lmdec-units" : "lmdec-audio";
  ck.tensors = collect_params(m, "lmdec");
  return ck;
}

inline LMDecoderModel lmdecoder_from(const Checkpoint& ck, const RunConfig& cfg) {
  const DecoderInput in = ck.find("lmdec/memory/B") ? DecoderInput::kUnits : DecoderInput::kAudio;
  LMDecoderModel m = blank_lmdecoder(cfg, in, 0);
  ParamList p = collect_params(m, "lmdec");
  copy_values(ck.tensors, p);
  return m;
}

/// End-to-end lip reader of the source language (video only, no memory).
inline FinetuneResult run_source_lipreader(const RunConfig& cfg, const Datasets& d, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "init/source"));
  const CombinedModel init = blank_model(Mode::kScratchDecoder, cfg.model, false, rng);
  TrainConfig t = seeded(cfg.finetune, derive_seed(seed, "source"));
  t.freeze_steps = 0;
  return finetune(init, d.a_train, cfg.model, t);
}

inline Checkpoint source_checkpoint(const CombinedModel& m, std::uint64_t hash) {
  Checkpoint ck = to_checkpoint(m, hash);
  ck.mode = "source-lipreader";
  return ck;
}

inline CombinedModel source_from(const Checkpoint& ck, const RunConfig& cfg) {
  Rng rng(0);
  CombinedModel m = blank_model(Mode::kScratchDecoder, cfg.model, false, rng);
  ParamList p = params_of(m);
  copy_values(ck.tensors, p);
  return m;
}

inline FinetuneResult run_finetune(const RunConfig& cfg, Mode mode, const Checkpoint* enc, const Checkpoint* lm,
                                   std::span<const Utterance> vt, std::uint64_t seed,
                                   const Teachers* teachers = nullptr) {
  const CombinedModel init = assemble(mode, cfg.model, enc, lm, cfg.residual, seed);
  return finetune(init, vt, cfg.model, seeded(cfg.finetune, seed), teachers);
}

// ---- experiment ------------------------------------------------------------

struct ExperimentRow {
  std::string mode;
  std::uint64_t seed = 0;
  double wer = 0.0;
  long steps = 0;
  double at_hours = 0.0;
  double vt_hours = 0.0;
  std::string note;     // non-empty for rows reported under a substitute mode
  std::string setting;  // sweep point, e.g. "lm-small", "vt-0.3333", "at-40"; "main" otherwise

  std::string csv() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%llu,%.6f,%ld,%.6f,%.6f", mode.c_str(),
                  static_cast<unsigned long long>(seed), wer, steps, at_hours, vt_hours);
    return buf;
  }
};

inline const char* kReportHeader = "mode,seed,wer,steps,at_hours_equiv,vt_hours_equiv";

struct ExperimentTable {
  std::string name;
  std::vector<ExperimentRow> rows;

  void sort_rows() {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const ExperimentRow& a, const ExperimentRow& b) { return a.csv() < b.csv(); });
  }

  std::string csv() const {
    std::string out = std::string(kReportHeader) + '\n';
    for (const auto& r : rows) out += r.csv() + '\n';
    return out;
  }

  /// Rows grouped by (mode, setting). Hours differ between seeds, so they
  /// are not part of the key.
  std::map<std::string, std::vector<const ExperimentRow*>> groups() const {
    std::map<std::string, std::vector<const ExperimentRow*>> g;
    for (const auto& r : rows) g[group_key(r)].push_back(&r);
    return g;
  }

  static std::string group_key(const ExperimentRow& r) {
    return r.mode + ',' + r.setting;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw DataError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ExperimentReport {
  ExperimentTable main{"modes", {}};
  ExperimentTable lm_source{"audio_text_source", {}};
  ExperimentTable vt_sweep{"video_text_amount", {}};
  ExperimentTable at_sweep{"audio_text_amount", {}};
  std::vector<std::string> notes;

  std::vector<ExperimentTable*> tables() { return {&main, &lm_source, &vt_sweep, &at_sweep}; }
  std::vector<const ExperimentTable*> tables() const { return {&main, &lm_source, &vt_sweep, &at_sweep}; }

  /// One line per (table, mode, amounts): median WER over seeds.
  std::string medians_csv() const {
    std::string out = "table,mode,setting,median_wer,seeds\n";
    for (const auto* t : tables()) {
      for (const auto& [key, rows] : t->groups()) {
        std::vector<double> w;
        for (const auto* r : rows) w.push_back(r->wer);
        char buf[64];
        std::snprintf(buf, sizeof(buf), ",%.6f,%zu\n", median(w), w.size());
        out += t->name + ',' + key + buf;
      }
    }
    return out;
  }

  /// Median WER of `mode` in the main table.
  double median_wer(const std::string& mode) const {
    std::vector<double> w;
    for (const auto& r : main.rows)
      if (r.mode == mode) w.push_back(r.wer);
    return median(w);
  }
};

struct SeedArtifacts {
  std::filesystem::path dir;  // empty: nothing written
  void write(const std::string& name, const std::string& text) const {
    if (!dir.empty()) write_file(dir / name, text);
  }
};

/// Full comparison for every configured seed. Artifacts go under `out`
/// (empty path: in-memory only).
inline ExperimentReport run_experiment(const RunConfig& cfg, const std::filesystem::path& out = {},
                                       const LogFn& log = {}) {
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const std::uint64_t hash = config_hash(cfg);
  std::vector<Mode> modes;
  for (const auto& m : cfg.experiment.modes) modes.push_back(parse_mode(m));
  auto wants = [&](Mode m) { return std::find(modes.begin(), modes.end(), m) != modes.end(); };
  const bool need_unit_lm = wants(Mode::kProposed) || wants(Mode::kNoLm) || wants(Mode::kTeacherKl) ||
                            !cfg.experiment.lm_variants.empty() || !cfg.experiment.video_text_fractions.empty() ||
                            !cfg.experiment.audio_text_amounts.empty();
  const bool need_source = wants(Mode::kSupervisedPretrain) || wants(Mode::kTeacherKl);

  ExperimentReport rep;
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    write_file(out / "config.json", dump_config(cfg));
  }

  for (std::uint64_t seed : cfg.experiment.seeds) {
    SeedArtifacts art;
    if (!out.empty()) {
      art.dir = out / ("seed-" + std::to_string(seed));
      std::filesystem::create_directories(art.dir);
    }
    const std::string tag = "seed " + std::to_string(seed) + " ";
    const Datasets d = stage(tag + "gen", [&] { return datasets_for(cfg, seed); });
    const double at_large = hours_equiv(d.b_at_large), vt_full = hours_equiv(d.b_vt);
    const UnitCodebook cb = stage(tag + "units", [&] { return fit_units(cfg, d, seed); });
    say(tag + "units done");
    const PretrainResult gsk = stage(tag + "pretrain-gsk", [&] { return run_pretrain_gsk(cfg, d, cb, seed); });
    art.write("pretrain_gsk_metrics.csv", gsk.metrics);
    const Checkpoint enc = encoder_checkpoint(gsk.model, hash);
    say(tag + "pretrain-gsk done");

    auto train_lm = [&](const std::string& name, std::span<const Utterance> corpus, DecoderInput in) {
      LMDecoderResult r = stage(tag + "pretrain-lmdec/" + name, [&] {
        return run_pretrain_lmdec(cfg, corpus, in == DecoderInput::kUnits ? &cb : nullptr, in, seed);
      });
      art.write("pretrain_lmdec_" + name + "_metrics.csv", r.metrics);
      say(tag + "pretrain-lmdec/" + name + " done");
      return r;
    };
    std::optional<LMDecoderResult> lm_large;
    if (need_unit_lm) lm_large = train_lm("large", d.b_at_large, DecoderInput::kUnits);
    const Checkpoint lm_large_ck = lm_large ? lmdec_checkpoint(lm_large->model, hash) : Checkpoint{};

    std::optional<FinetuneResult> source;
    Checkpoint source_ck;
    if (need_source) {
      source = stage(tag + "source-lipreader", [&] { return run_source_lipreader(cfg, d, seed); });
      art.write("source_lipreader_metrics.csv", source->metrics);
      source_ck = source_checkpoint(source->model, hash);
      say(tag + "source-lipreader done");
    }

    auto run = [&](const std::string& name, Mode mode, const Checkpoint* lm, std::span<const Utterance> vt,
                   const Teachers* teachers = nullptr) {
      const FinetuneResult fr =
          stage(tag + "finetune/" + name, [&] { return run_finetune(cfg, mode, &enc, lm, vt, seed, teachers); });
      art.write("finetune_" + name + "_metrics.csv", fr.metrics);
      const EvalReport er = stage(tag + "eval/" + name, [&] { return evaluate(fr.model, d.b_test, cfg.model); });
      art.write("eval_" + name + ".csv", er.csv());
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%sfinetune/%s done: wer %.4f", tag.c_str(), name.c_str(), er.corpus_wer());
      say(buf);
      return er.corpus_wer();
    };
    auto row = [&](const std::string& mode, double wer, double at, double vt, const std::string& setting) {
      return ExperimentRow{mode, seed, wer, cfg.finetune.steps, at, vt, "", setting};
    };

    std::map<Mode, double> wer_of;
    for (Mode m : modes) {
      const std::string name = mode_name(m);
      double w = 0.0, at = 0.0;
      switch (m) {
        case Mode::kProposed:
        case Mode::kNoLm:
          w = run(name, m, &lm_large_ck, d.b_vt);
          at = at_large;
          break;
        case Mode::kScratchDecoder:
          w = run(name, m, nullptr, d.b_vt);
          break;
        case Mode::kAsrPretrain: {
          const LMDecoderResult audio_lm = train_lm("audio", d.b_at_large, DecoderInput::kAudio);
          const Checkpoint ck = lmdec_checkpoint(audio_lm.model, hash);
          w = run(name, m, &ck, d.b_vt);
          at = at_large;
          break;
        }
        case Mode::kSupervisedPretrain:
          w = run(name, m, &source_ck, d.b_vt);
          break;
        case Mode::kTeacherKl: {
          const Teachers t{&lm_large->model, &source->model, &cb, cfg.teacher_weight};
          w = run(name, m, &lm_large_ck, d.b_vt, &t);
          at = at_large;
          break;
        }
      }
      wer_of[m] = w;
      rep.main.rows.push_back(row(name, w, at, vt_full, "main"));
    }

    // Proposed-mode runs are shared by the sweeps when they coincide.
    std::optional<double> proposed_full;
    if (wer_of.count(Mode::kProposed)) proposed_full = wer_of[Mode::kProposed];
    auto proposed_with = [&](const std::string& name, const Checkpoint& lm, std::span<const Utterance> vt) {
      return run(name, Mode::kProposed, &lm, vt);
    };
    auto full_proposed = [&] {
      if (!proposed_full) proposed_full = proposed_with("proposed", lm_large_ck, d.b_vt);
      return *proposed_full;
    };

    const std::string proposed = mode_name(Mode::kProposed);
    for (const auto& v : cfg.experiment.lm_variants) {
      if (v == "large") {
        rep.lm_source.rows.push_back(row(proposed, full_proposed(), at_large, vt_full, "lm-" + v));
        continue;
      }
      std::vector<Utterance> corpus = d.b_at_small;
      if (v == "both") corpus.insert(corpus.end(), d.b_at_large.begin(), d.b_at_large.end());
      const LMDecoderResult lm = train_lm(v, corpus, DecoderInput::kUnits);
      const double w = proposed_with("proposed_lm-" + v, lmdec_checkpoint(lm.model, hash), d.b_vt);
      rep.lm_source.rows.push_back(row(proposed, w, hours_equiv(corpus), vt_full, "lm-" + v));
    }

    for (double f : cfg.experiment.video_text_fractions) {
      const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(f * static_cast<double>(d.b_vt.size()))));
      const std::span<const Utterance> vt(d.b_vt.data(), std::min(n, d.b_vt.size()));
      const double w = vt.size() == d.b_vt.size() ? full_proposed()
                                                  : proposed_with("proposed_vt-" + std::to_string(vt.size()), lm_large_ck, vt);
      char label[32];
      std::snprintf(label, sizeof(label), "vt-%.4f", f);
      rep.vt_sweep.rows.push_back(row(proposed, w, at_large, hours_equiv(vt), label));
    }

    for (std::size_t amount : cfg.experiment.audio_text_amounts) {
      if (amount == 0) {
        double w;
        if (wer_of.count(Mode::kScratchDecoder)) {
          w = wer_of[Mode::kScratchDecoder];
        } else {
          w = run(mode_name(Mode::kScratchDecoder), Mode::kScratchDecoder, nullptr, d.b_vt);
          wer_of[Mode::kScratchDecoder] = w;
        }
        ExperimentRow r = row(mode_name(Mode::kScratchDecoder), w, 0.0, vt_full, "at-0");
        r.note = "proposed with no audio-text data: LMDecoder untrained, reported as scratch-decoder";
        rep.notes.push_back(tag + "audio-text amount 0: " + r.note);
        rep.at_sweep.rows.push_back(r);
        continue;
      }
      const std::size_t n = std::min(amount, d.b_at_large.size());
      if (n == d.b_at_large.size()) {
        rep.at_sweep.rows.push_back(row(proposed, full_proposed(), at_large, vt_full, "at-" + std::to_string(amount)));
        continue;
      }
      const std::span<const Utterance> at(d.b_at_large.data(), n);
      const LMDecoderResult lm = train_lm("at-" + std::to_string(n), at, DecoderInput::kUnits);
      const double w = proposed_with("proposed_at-" + std::to_string(n), lmdec_checkpoint(lm.model, hash), d.b_vt);
      rep.at_sweep.rows.push_back(row(proposed, w, hours_equiv(at), vt_full, "at-" + std::to_string(amount)));
    }
  }

  for (auto* t : rep.tables()) t->sort_rows();
  if (!out.empty()) {
    write_file(out / "report.csv", rep.main.csv());
    write_file(out / "table_audio_text_source.csv", rep.lm_source.csv());
    write_file(out / "table_video_text_amount.csv", rep.vt_sweep.csv());
    write_file(out / "table_audio_text_amount.csv", rep.at_sweep.csv());
    write_file(out / "medians.csv", rep.medians_csv());
    std::string notes;
    for (const auto& n : rep.notes) notes += n + '\n';
    write_file(out / "notes.txt", notes);
  }
  return rep;
}

}  // namespace lipmem
