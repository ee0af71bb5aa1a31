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

// Autoregressive decoding and word error rate.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "lipmem/errors.hpp"
#include "lipmem/nnet.hpp"
#include "lipmem/synthlang.hpp"

namespace lipmem {

struct Hypothesis {
  std::vector<long> tokens;  // BOS stripped, EOS not included
  double score = 0.0;        // sum of chosen log-probabilities, EOS step included
  bool finished = false;     // ended with EOS
};

/// Next-token log-probabilities for a set of equal-length prefixes (each
/// starting with BOS). Returns one row of V values per prefix.
using StepFn = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<long>>&)>;

namespace detail {

inline std::vector<double> log_softmax_row(const double* x, std::size_t v) {
  const double mx = *std::max_element(x, x + v);
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(x, x + v);
  for (auto& e : out) e -= lz;
  return out;
}

inline std::size_t argmax_lowest(const std::vector<double>& row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace detail

/// Step function over a DecoderModel whose context `ctx` is [1, T, d].
inline StepFn decoder_step_fn(const DecoderModel& dec, const Tensor& ctx, std::size_t ctx_len) {
  return [&dec, ctx, ctx_len](const std::vector<std::vector<long>>& prefixes) {
    NoGradScope no_grad;
    const std::size_t n = prefixes.size(), j = prefixes.front().size();
    std::vector<Tensor> reps(n, ctx);
    const Tensor c = n == 1 ? ctx : concat(reps, 0);
    std::vector<long> flat;
    for (const auto& p : prefixes) flat.insert(flat.end(), p.begin(), p.end());
    const Tensor logits = dec.decode(c, std::vector<std::size_t>(n, ctx_len), flat, j);
    const std::size_t v = logits.dim(-1);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < n; ++i)
      rows.push_back(detail::log_softmax_row(logits.data().data() + (i * j + j - 1) * v, v));
    return rows;
  };
}

/// Argmax decoding; ties go to the lowest id. Stops at EOS or max_len tokens.
inline Hypothesis greedy_decode(const StepFn& step, std::size_t max_len, long eos = Tokenizer::kEos,
                                long bos = Tokenizer::kBos) {
  Hypothesis h;
  std::vector<long> prefix{bos};
  for (std::size_t j = 0; j < max_len; ++j) {
    const auto row = step({prefix})[0];
    const auto tok = static_cast<long>(detail::argmax_lowest(row));
    h.score += row[static_cast<std::size_t>(tok)];
    if (tok == eos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(tok);
    prefix.push_back(tok);
  }
  return h;
}

/// Greedy decoding of a whole batch at once. `ctx` is [B, T, d].
inline std::vector<Hypothesis> greedy_decode_batch(const DecoderModel& dec, const Tensor& ctx,
                                                   const std::vector<std::size_t>& lengths, std::size_t max_len) {
  NoGradScope no_grad;
  const std::size_t b = ctx.dim(0);
  std::vector<Hypothesis> hyps(b);
  std::vector<long> prefix(b, Tokenizer::kBos);  // B x j, row-major
  for (std::size_t j = 1; j <= max_len; ++j) {
    bool all_done = true;
    for (const auto& h : hyps) all_done &= h.finished;
    if (all_done) break;
    const Tensor logits = dec.decode(ctx, lengths, prefix, j);
    const std::size_t v = logits.dim(-1);
    std::vector<long> next(b * (j + 1));
    for (std::size_t i = 0; i < b; ++i) {
      std::copy_n(prefix.begin() + static_cast<long>(i * j), j, next.begin() + static_cast<long>(i * (j + 1)));
      const auto row = detail::log_softmax_row(logits.data().data() + (i * j + j - 1) * v, v);
      const auto tok = static_cast<long>(detail::argmax_lowest(row));
      next[i * (j + 1) + j] = tok;
      Hypothesis& h = hyps[i];
      if (h.finished) continue;
      h.score += row[static_cast<std::size_t>(tok)];
      if (tok == Tokenizer::kEos) {
        h.finished = true;
      } else {
        h.tokens.push_back(tok);
      }
    }
    prefix = std::move(next);
  }
  return hyps;
}

/// Beam search. Candidates are ranked by score / (length+1)^length_penalty
/// where length counts emitted tokens; the greedy hypothesis seeds the
/// finished set so the result never scores below it.
inline Hypothesis beam_decode(const StepFn& step, std::size_t width, std::size_t max_len, double length_penalty = 0.0,
                              long eos = Tokenizer::kEos, long bos = Tokenizer::kBos) {
  if (width < 1) throw ConfigError("beam: width must be >= 1");
  auto norm = [&](const Hypothesis& h) {
    if (length_penalty == 0.0) return h.score;
    return h.score / std::pow(static_cast<double>(h.tokens.size() + 1), length_penalty);
  };
  std::vector<Hypothesis> finished{greedy_decode(step, max_len, eos, bos)};
  std::vector<Hypothesis> alive{Hypothesis{}};
  for (std::size_t j = 0; j < max_len && !alive.empty(); ++j) {
    std::vector<std::vector<long>> prefixes;
    for (const auto& h : alive) {
      std::vector<long> p{bos};
      p.insert(p.end(), h.tokens.begin(), h.tokens.end());
      prefixes.push_back(std::move(p));
    }
    const auto rows = step(prefixes);
    struct Cand {
      double score;
      std::size_t parent;
      long tok;
    };
    std::vector<Cand> cands;
    for (std::size_t a = 0; a < alive.size(); ++a)
      for (std::size_t t = 0; t < rows[a].size(); ++t) cands.push_back({alive[a].score + rows[a][t], a, static_cast<long>(t)});
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) { return x.score > y.score; });
    std::vector<Hypothesis> next;
    for (const auto& c : cands) {
      if (next.size() >= width) break;
      Hypothesis h = alive[c.parent];
      h.score = c.score;
      if (c.tok == eos) {
        h.finished = true;
        finished.push_back(std::move(h));
        if (width == 1) break;
        continue;
      }
      h.tokens.push_back(c.tok);
      next.push_back(std::move(h));
    }
    alive = std::move(next);
    if (length_penalty == 0.0 && !alive.empty()) {
      // Scores only decrease along a path; stop once nothing alive can win.
      double best_fin = -std::numeric_limits<double>::infinity(), best_alive = best_fin;
      for (const auto& h : finished) best_fin = std::max(best_fin, h.score);
      for (const auto& h : alive) best_alive = std::max(best_alive, h.score);
      if (best_fin >= best_alive) break;
    }
  }
  for (auto& h : alive) finished.push_back(std::move(h));
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (norm(finished[i]) > norm(finished[best])) best = i;
  return finished[best];
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

/// Word-level Levenshtein distance.
inline std::size_t word_edits(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  std::vector<std::size_t> prev(ref.size() + 1), cur(ref.size() + 1);
  for (std::size_t j = 0; j <= ref.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[ref.size()];
}

/// (S + I + D) / |ref|. An empty reference scores |hyp| (denominator 1).
inline double wer(const std::string& hyp_text, const std::string& ref_text) {
  const auto hyp = split_words(hyp_text), ref = split_words(ref_text);
  const double e = static_cast<double>(word_edits(hyp, ref));
  return ref.empty() ? e : e / static_cast<double>(ref.size());
}

struct EvalRow {
  std::string id, ref, hyp;
  std::size_t errors = 0, ref_len = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  void add(std::string id, std::string ref, std::string hyp) {
    EvalRow r{std::move(id), std::move(ref), std::move(hyp), 0, 0};
    const auto rw = split_words(r.ref);
    r.errors = word_edits(split_words(r.hyp), rw);
    r.ref_len = rw.size();
    rows.push_back(std::move(r));
  }

  double corpus_wer() const {
    std::size_t e = 0, n = 0;
    for (const auto& r : rows) {
      e += r.errors;
      n += r.ref_len;
    }
    return n ? static_cast<double>(e) / static_cast<double>(n) : static_cast<double>(e);
  }

  std::string csv() const {
    std::string out = "id,ref,hyp,errors,ref_len\n";
    for (const auto& r : rows)
      out += r.id + ',' + r.ref + ',' + r.hyp + ',' + std::to_string(r.errors) + ',' + std::to_string(r.ref_len) + '\n';
    char buf[64];
    std::snprintf(buf, sizeof(buf), "corpus_wer,%.6f\n", corpus_wer());
    return out + buf;
  }
};

}  // namespace lipmem
