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

// lipmem command-line driver.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lipmem/experiment.hpp"

namespace fs = std::filesystem;
using namespace lipmem;

namespace {

const std::vector<std::string> kCommands = {"gen",      "units", "pretrain-gsk", "pretrain-lmdec",
                                            "finetune", "eval",  "experiment"};

constexpr const char* kUsage = R"(usage: lipmem <command> [flags]

commands:
  gen             generate the synthetic corpora
  units           fit the audio unit codebook
  pretrain-gsk    masked unit prediction pretraining of the visual encoder
  pretrain-lmdec  train the memory-augmented decoder on audio-text pairs
                  (--mode asr-pretrain: continuous audio decoder;
                   --mode supervised-pretrain: source-language lip reader)
  finetune        assemble --mode and finetune on video-text pairs
  eval            lip-read the held-out split with a finetuned model
  experiment      full multi-seed comparison

flags:
  --config NAME|PATH   preset (desk, desk-freeze, full, smoke) or JSON file [desk]
  --seed INT           overrides the config seed
  --out DIR            output directory [.]
  --ckpt PATH          input checkpoint, repeatable
  --mode NAME          proposed, scratch-decoder, asr-pretrain, no-lm,
                       supervised-pretrain, teacher-kl

exit status: 0 ok, 2 configuration error, 3 data error, 4 training divergence
)";

struct Args {
  std::string command;
  std::string config = "desk";
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::vector<std::string> ckpts;
  std::optional<std::string> mode;
};

int usage_error(const std::string& msg) {
  std::cerr << "lipmem: " << msg << "\n\n" << kUsage;
  return 2;
}

struct Inputs {
  std::vector<Checkpoint> all;

  const Checkpoint* find(const std::string& role) const {
    for (const auto& c : all)
      if (c.mode == role) return &c;
    return nullptr;
  }
  const Checkpoint& need(const std::string& role, const std::string& why) const {
    const Checkpoint* c = find(role);
    if (!c) throw ConfigError(why + " needs a --ckpt of kind '" + role + "'");
    return *c;
  }
};

Inputs load_inputs(const Args& a, std::uint64_t hash) {
  Inputs in;
  for (const auto& p : a.ckpts) {
    Checkpoint ck = load_checkpoint(p);
    if (ck.config_hash != hash) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "%016llx, model preset has %016llx", static_cast<unsigned long long>(ck.config_hash),
                    static_cast<unsigned long long>(hash));
      throw ConfigError("config hash mismatch: " + p + " has " + buf);
    }
    in.all.push_back(std::move(ck));
  }
  return in;
}

UnitCodebook codebook_for(const Inputs& in, const RunConfig& cfg, const Datasets& d, std::uint64_t seed) {
  if (const Checkpoint* c = in.find("units")) return codebook_from(*c);
  return fit_units(cfg, d, seed);
}

void say(const std::string& s) { std::cout << s << std::endl; }

int run(const Args& a) {
  RunConfig cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.mode) cfg.mode = *a.mode;
  cfg.validate();
  const std::uint64_t seed = cfg.seed;
  const std::uint64_t hash = config_hash(cfg);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_file(out / "config.json", dump_config(cfg));
  const Inputs in = load_inputs(a, hash);
  const Mode mode = parse_mode(cfg.mode);

  if (a.command == "gen") {
    const Datasets d = make_datasets(cfg, seed);
    save_datasets(out, d, cfg.model);
    say("wrote corpora to " + out.string());
    return 0;
  }
  if (a.command == "experiment") {
    const ExperimentReport rep = run_experiment(cfg, out, [](const std::string& s) { std::cerr << s << '\n'; });
    std::cout << rep.main.csv() << '\n' << rep.medians_csv();
    return 0;
  }

  const Datasets d = datasets_for(cfg, seed);
  if (a.command == "units") {
    const UnitCodebook cb = fit_units(cfg, d, seed);
    save_checkpoint(out / "units.lrlc", units_checkpoint(cb, hash));
    say("wrote " + (out / "units.lrlc").string());
    return 0;
  }
  if (a.command == "pretrain-gsk") {
    const UnitCodebook cb = codebook_for(in, cfg, d, seed);
    const PretrainResult r = run_pretrain_gsk(cfg, d, cb, seed);
    write_file(out / "pretrain_gsk_metrics.csv", r.metrics);
    save_checkpoint(out / "encoder.lrlc", encoder_checkpoint(r.model, hash));
    char buf[128];
    std::snprintf(buf, sizeof(buf), "loss %.4f -> %.4f", r.first_loss, r.last_loss);
    say(buf);
    return 0;
  }
  if (a.command == "pretrain-lmdec") {
    if (mode == Mode::kSupervisedPretrain) {
      const FinetuneResult r = run_source_lipreader(cfg, d, seed);
      write_file(out / "source_lipreader_metrics.csv", r.metrics);
      save_checkpoint(out / "lmdec.lrlc", source_checkpoint(r.model, hash));
      say("wrote source-language lip reader " + (out / "lmdec.lrlc").string());
      return 0;
    }
    const DecoderInput kind = mode == Mode::kAsrPretrain ? DecoderInput::kAudio : DecoderInput::kUnits;
    std::optional<UnitCodebook> cb;
    if (kind == DecoderInput::kUnits) cb = codebook_for(in, cfg, d, seed);
    const LMDecoderResult r = run_pretrain_lmdec(cfg, d.b_at_large, cb ? &*cb : nullptr, kind, seed, d.b_test);
    write_file(out / "pretrain_lmdec_metrics.csv", r.metrics);
    save_checkpoint(out / "lmdec.lrlc", lmdec_checkpoint(r.model, hash));
    char buf[128];
    std::snprintf(buf, sizeof(buf), "held-out perplexity %.4f, wer %.4f", r.heldout_ppl, r.heldout_wer);
    say(buf);
    return 0;
  }
  if (a.command == "finetune") {
    const Checkpoint* enc = in.find("encoder");
    const Checkpoint* lm = nullptr;
    std::optional<LMDecoderModel> audio_teacher;
    std::optional<CombinedModel> lip_teacher;
    std::optional<UnitCodebook> cb;
    std::optional<Teachers> teachers;
    switch (mode) {
      case Mode::kProposed:
      case Mode::kNoLm:
        lm = &in.need("lmdec-units", cfg.mode);
        break;
      case Mode::kAsrPretrain:
        lm = &in.need("lmdec-audio", cfg.mode);
        break;
      case Mode::kSupervisedPretrain:
        lm = &in.need("source-lipreader", cfg.mode);
        break;
      case Mode::kTeacherKl:
        lm = &in.need("lmdec-units", cfg.mode);
        audio_teacher = lmdecoder_from(*lm, cfg);
        lip_teacher = source_from(in.need("source-lipreader", cfg.mode), cfg);
        cb = codebook_from(in.need("units", cfg.mode));
        teachers = Teachers{&*audio_teacher, &*lip_teacher, &*cb, cfg.teacher_weight};
        break;
      case Mode::kScratchDecoder:
        break;
    }
    const FinetuneResult r = run_finetune(cfg, mode, enc, lm, d.b_vt, seed, teachers ? &*teachers : nullptr);
    write_file(out / "finetune_metrics.csv", r.metrics);
    save_checkpoint(out / "model.lrlc", to_checkpoint(r.model, hash));
    say("wrote " + (out / "model.lrlc").string());
    return 0;
  }
  if (a.command == "eval") {
    if (in.all.size() != 1) throw ConfigError("eval needs exactly one --ckpt (a finetuned model)");
    const CombinedModel m = from_checkpoint(in.all.front(), cfg.model);
    const EvalReport rep = evaluate(m, d.b_test, cfg.model);
    write_file(out / "eval.csv", rep.csv());
    char buf[64];
    std::snprintf(buf, sizeof(buf), "wer %.6f", rep.corpus_wer());
    say(buf);
    return 0;
  }
  return usage_error("unknown command '" + a.command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  Args a;
  CLI::App app{"lipmem"};
  app.set_help_flag();
  bool help = false;
  app.add_flag("-h,--help", help);
  app.add_option("command", a.command);
  app.add_option("--config", a.config);
  app.add_option("--seed", a.seed);
  app.add_option("--out", a.out);
  app.add_option("--ckpt", a.ckpts)->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("--mode", a.mode);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return usage_error(e.what());
  }
  if (help) {
    std::cout << kUsage;
    return 0;
  }
  if (a.command.empty()) return usage_error("no command given");
  if (std::find(kCommands.begin(), kCommands.end(), a.command) == kCommands.end()) {
    return usage_error("unknown command '" + a.command + "'");
  }
  try {
    return run(a);
  } catch (const Error& e) {
    std::cerr << "lipmem: " << e.what() << '\n';
    switch (e.category()) {
      case Error::Category::kConfig: return 2;
      case Error::Category::kData: return 3;
      case Error::Category::kDivergence: return 4;
      case Error::Category::kInternal: return 1;
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "lipmem: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "lipmem: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
