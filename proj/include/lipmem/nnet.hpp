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

// Transformer building blocks: pre-norm encoder/decoder blocks, the visual
// encoder with its unit classifier, and the text decoder with a context
// encoder and a CTC head.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lipmem/errors.hpp"
#include "lipmem/numcore.hpp"
#include "lipmem/optim.hpp"
#include "lipmem/random.hpp"

namespace lipmem {

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t dim = 64;
  std::size_t ffn_dim = 256;
  std::size_t heads = 4;
  double dropout = 0.1;
  std::size_t max_len = 256;

  void validate(const std::string& what) const {
    if (dim == 0 || heads == 0 || ffn_dim == 0 || max_len == 0) {
      throw ConfigError(what + ": dimensions must be positive");
    }
    if (dim % heads != 0) {
      throw ConfigError(what + ": dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError(what + ": dropout outside [0,1)");
  }
};

/// Training-time switches threaded through forward passes.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;  // dropout stream; required when training with dropout

  static ForwardMode eval() { return {}; }
};

inline Tensor dropout(const Tensor& x, double p, const ForwardMode& mode) {
  if (!mode.training || p <= 0.0) return x;
  if (mode.rng == nullptr) throw ContractError("dropout: training mode without an rng");
  Tensor keep(x.shape());
  const double s = 1.0 / (1.0 - p);
  for (auto& v : keep.values()) v = uniform01(*mode.rng) < p ? 0.0 : s;
  return mul(x, keep);
}

/// Attention mask, 1 = blocked, laid out [B, Tq, Tk].
struct AttnMask {
  std::size_t batch = 0, tq = 0, tk = 0;
  std::vector<std::uint8_t> blocked;

  static AttnMask none(std::size_t b, std::size_t tq, std::size_t tk) {
    return {b, tq, tk, std::vector<std::uint8_t>(b * tq * tk, 0)};
  }

  /// Blocks keys at positions >= key_lengths[b].
  static AttnMask key_padding(const std::vector<std::size_t>& key_lengths, std::size_t tq,
                              std::size_t tk) {
    AttnMask m = none(key_lengths.size(), tq, tk);
    for (std::size_t b = 0; b < m.batch; ++b)
      for (std::size_t i = 0; i < tq; ++i)
        for (std::size_t j = key_lengths[b]; j < tk; ++j) m.blocked[(b * tq + i) * tk + j] = 1;
    return m;
  }

  static AttnMask causal(std::size_t b, std::size_t t) {
    AttnMask m = none(b, t, t);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = i + 1; j < t; ++j) m.blocked[(s * t + i) * t + j] = 1;
    return m;
  }
};

inline Tensor init_normal(Rng& rng, Shape shape, double stddev) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), normal_vector(rng, n, stddev));
}

inline Tensor init_constant(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : w(init_normal(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)))),
        b(init_constant({out}, 0.0)) {}

  std::size_t in_dim() const { return w.dim(0); }
  std::size_t out_dim() const { return w.dim(1); }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, w), b); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "/w", w});
    out.push_back({prefix + "/b", b});
  }
};

struct LayerNorm {
  Tensor gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gain(init_constant({d}, 1.0)), bias(init_constant({d}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "/gain", gain});
    out.push_back({prefix + "/bias", bias});
  }
};

/// Scaled dot-product multi-head attention. A query row whose keys are all
/// blocked yields the zero vector before the output projection.
struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t n_heads, Rng& rng)
      : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(n_heads) {
    if (n_heads == 0 || dim % n_heads != 0) {
      throw DimensionError("mha: dim " + std::to_string(dim) + " not divisible by heads " +
                           std::to_string(n_heads));
    }
  }

  /// q_seq [B,Tq,d], kv_seq [B,Tk,d]. If `weights` is given it receives the
  /// attention probabilities [B,h,Tq,Tk].
  Tensor operator()(const Tensor& q_seq, const Tensor& kv_seq, const AttnMask& mask,
                    Tensor* weights = nullptr) const {
    const std::size_t b = q_seq.dim(0), tq = q_seq.dim(1), tk = kv_seq.dim(1);
    const std::size_t d = q_seq.dim(2), dh = d / heads;
    if (kv_seq.dim(0) != b || kv_seq.dim(2) != d) {
      throw DimensionError("mha: query " + shape_str(q_seq.shape()) + " and key/value " +
                           shape_str(kv_seq.shape()) + " disagree");
    }
    if (mask.batch != b || mask.tq != tq || mask.tk != tk) {
      throw DimensionError("mha: mask [" + std::to_string(mask.batch) + "," +
                           std::to_string(mask.tq) + "," + std::to_string(mask.tk) +
                           "] does not match scores [" + std::to_string(b) + "," +
                           std::to_string(tq) + "," + std::to_string(tk) + "]");
    }
    auto split = [&](const Tensor& x, std::size_t t) {
      return transpose(reshape(x, {b, t, heads, dh}), {0, 2, 1, 3});
    };
    Tensor qh = split(q(q_seq), tq);
    Tensor kh = split(k(kv_seq), tk);
    Tensor vh = split(v(kv_seq), tk);
    Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<std::uint8_t> expanded(b * heads * tq * tk);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(mask.blocked.begin() + static_cast<long>(s * tq * tk), tq * tk,
                    expanded.begin() + static_cast<long>((s * heads + h) * tq * tk));
    Tensor probs = masked_fill(softmax_lastdim(masked_fill(scores, expanded, -1e30)), expanded, 0.0);
    if (weights) *weights = probs;
    Tensor ctx = reshape(transpose(matmul(probs, vh), {0, 2, 1, 3}), {b, tq, d});
    return o(ctx);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    q.collect(prefix + "/q", out);
    k.collect(prefix + "/k", out);
    v.collect(prefix + "/v", out);
    o.collect(prefix + "/o", out);
  }
};

struct FeedForward {
  Linear up, down;

  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, Rng& rng) : up(dim, hidden, rng), down(hidden, dim, rng) {}

  Tensor operator()(const Tensor& x, double p, const ForwardMode& mode) const {
    return down(dropout(gelu(up(x)), p, mode));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    up.collect(prefix + "/up", out);
    down.collect(prefix + "/down", out);
  }
};

struct EncoderBlock {
  LayerNorm ln_attn, ln_ffn;
  MultiHeadAttention attn;
  FeedForward ffn;

  EncoderBlock() = default;
  EncoderBlock(const TransformerConfig& cfg, Rng& rng)
      : ln_attn(cfg.dim), ln_ffn(cfg.dim), attn(cfg.dim, cfg.heads, rng),
        ffn(cfg.dim, cfg.ffn_dim, rng) {}

  Tensor operator()(const Tensor& x, const AttnMask& mask, double p, const ForwardMode& mode) const {
    Tensor n1 = ln_attn(x);
    Tensor h = add(x, dropout(attn(n1, n1, mask), p, mode));
    return add(h, dropout(ffn(ln_ffn(h), p, mode), p, mode));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    ln_attn.collect(prefix + "/ln_attn", out);
    attn.collect(prefix + "/attn", out);
    ln_ffn.collect(prefix + "/ln_ffn", out);
    ffn.collect(prefix + "/ffn", out);
  }
};

struct DecoderBlock {
  LayerNorm ln_self, ln_cross, ln_ffn;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;

  DecoderBlock() = default;
  DecoderBlock(const TransformerConfig& cfg, Rng& rng)
      : ln_self(cfg.dim), ln_cross(cfg.dim), ln_ffn(cfg.dim), self_attn(cfg.dim, cfg.heads, rng),
        cross_attn(cfg.dim, cfg.heads, rng), ffn(cfg.dim, cfg.ffn_dim, rng) {}

  Tensor operator()(const Tensor& y, const Tensor& memory, const AttnMask& self_mask,
                    const AttnMask& cross_mask, double p, const ForwardMode& mode) const {
    Tensor n1 = ln_self(y);
    Tensor h = add(y, dropout(self_attn(n1, n1, self_mask), p, mode));
    h = add(h, dropout(cross_attn(ln_cross(h), memory, cross_mask), p, mode));
    return add(h, dropout(ffn(ln_ffn(h), p, mode), p, mode));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    ln_self.collect(prefix + "/ln_self", out);
    self_attn.collect(prefix + "/self_attn", out);
    ln_cross.collect(prefix + "/ln_cross", out);
    cross_attn.collect(prefix + "/cross_attn", out);
    ln_ffn.collect(prefix + "/ln_ffn", out);
    ffn.collect(prefix + "/ffn", out);
  }
};

/// A stack of encoder blocks with learned absolute positions and a final norm.
struct EncoderStack {
  TransformerConfig cfg;
  Tensor pos;  // [max_len, dim]
  std::vector<EncoderBlock> blocks;
  LayerNorm ln_out;

  EncoderStack() = default;
  EncoderStack(const TransformerConfig& c, Rng& rng)
      : cfg(c), pos(init_normal(rng, {c.max_len, c.dim}, 0.02)), ln_out(c.dim) {
    for (std::size_t i = 0; i < c.layers; ++i) blocks.emplace_back(c, rng);
  }

  /// x [B,T,dim]; lengths give the valid prefix of each row.
  Tensor operator()(const Tensor& x, const std::vector<std::size_t>& lengths,
                    const ForwardMode& mode) const {
    const std::size_t t = x.dim(1);
    if (t > cfg.max_len) {
      throw LengthError("encoder: sequence length " + std::to_string(t) + " exceeds max_len " +
                        std::to_string(cfg.max_len));
    }
    Tensor h = dropout(add(x, slice(pos, 0, 0, t)), cfg.dropout, mode);
    const AttnMask mask = AttnMask::key_padding(lengths, t, t);
    for (const auto& blk : blocks) h = blk(h, mask, cfg.dropout, mode);
    return ln_out(h);
  }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "/pos", pos});
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + "/block" + std::to_string(i), out);
    ln_out.collect(prefix + "/ln_out", out);
  }
};

/// Padded batch of feature sequences [B, T, d] with per-row valid lengths.
struct Batch {
  Tensor frames;
  std::vector<std::size_t> lengths;
};

/// Visual encoder: linear front-end, transformer, unit classifier.
struct EncoderModel {
  Linear frontend;
  EncoderStack stack;
  Linear unit_head;

  EncoderModel() = default;
  EncoderModel(std::size_t input_dim, const TransformerConfig& cfg, std::size_t units, Rng& rng)
      : frontend(input_dim, cfg.dim, rng), stack(cfg, rng), unit_head(cfg.dim, units, rng) {
    cfg.validate("encoder");
  }

  std::size_t dim() const { return stack.cfg.dim; }
  std::size_t input_dim() const { return frontend.in_dim(); }
  std::size_t units() const { return unit_head.out_dim(); }

  /// f_v for a padded batch. Rows past each length are padding; they receive
  /// no attention from valid rows.
  Tensor encode(const Batch& batch, const ForwardMode& mode = {}) const {
    const Tensor& x = batch.frames;
    if (x.rank() != 3 || x.dim(2) != input_dim()) {
      throw DimensionError("encode: frames " + shape_str(x.shape()) + " do not match input dim " +
                           std::to_string(input_dim()));
    }
    if (x.dim(1) > stack.cfg.max_len) {
      throw LengthError("encode: T=" + std::to_string(x.dim(1)) + " exceeds max_len " +
                        std::to_string(stack.cfg.max_len));
    }
    if (x.dim(1) == 0) return Tensor(Shape{x.dim(0), 0, dim()});
    return stack(frontend(x), batch.lengths, mode);
  }

  Tensor unit_logits(const Tensor& features) const { return unit_head(features); }

  void collect(const std::string& prefix, ParamList& out) const {
    frontend.collect(prefix + "/frontend", out);
    stack.collect(prefix + "/stack", out);
    unit_head.collect(prefix + "/unit_head", out);
  }
};

/// Text decoder over a sequence of d-dimensional features: context encoder,
/// CTC head (blank = last index), causal decoder with cross-attention.
struct DecoderModel {
  EncoderStack context;
  Linear ctc_head;  // [dim, V+1]
  Tensor token_embed;  // [V, dim]
  Tensor dec_pos;      // [max_len, dim]
  std::vector<DecoderBlock> blocks;
  LayerNorm ln_out;
  Linear out_head;  // [dim, V]
  TransformerConfig dec_cfg;

  DecoderModel() = default;
  DecoderModel(const TransformerConfig& ctx_cfg, const TransformerConfig& dcfg, std::size_t vocab,
               Rng& rng)
      : context(ctx_cfg, rng), ctc_head(ctx_cfg.dim, vocab + 1, rng),
        token_embed(init_normal(rng, {vocab, dcfg.dim}, 1.0 / std::sqrt(static_cast<double>(dcfg.dim)))),
        dec_pos(init_normal(rng, {dcfg.max_len, dcfg.dim}, 0.02)), ln_out(dcfg.dim),
        out_head(dcfg.dim, vocab, rng), dec_cfg(dcfg) {
    ctx_cfg.validate("decoder context");
    dcfg.validate("decoder");
    if (ctx_cfg.dim != dcfg.dim) throw ConfigError("decoder: context and decoder dims differ");
    for (std::size_t i = 0; i < dcfg.layers; ++i) blocks.emplace_back(dcfg, rng);
  }

  std::size_t dim() const { return dec_cfg.dim; }
  std::size_t vocab() const { return out_head.out_dim(); }
  std::size_t blank() const { return vocab(); }

  Tensor encode_context(const Tensor& features, const std::vector<std::size_t>& lengths,
                        const ForwardMode& mode = {}) const {
    return context(features, lengths, mode);
  }

  Tensor ctc_logits(const Tensor& ctx) const { return ctc_head(ctx); }

  /// Teacher-forced logits [B,J,V] for prefix tokens y_in [B,J] (row-major).
  Tensor decode(const Tensor& ctx, const std::vector<std::size_t>& ctx_lengths,
                std::span<const long> y_in, std::size_t j_len, const ForwardMode& mode = {}) const {
    const std::size_t b = ctx.dim(0);
    if (y_in.size() != b * j_len) {
      throw DimensionError("decode: " + std::to_string(y_in.size()) + " tokens for batch " +
                           std::to_string(b) + " x " + std::to_string(j_len));
    }
    if (j_len > dec_cfg.max_len) {
      throw LengthError("decode: J=" + std::to_string(j_len) + " exceeds max_len " +
                        std::to_string(dec_cfg.max_len));
    }
    for (long id : y_in) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab()) {
        throw VocabularyError("decode: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab()));
      }
    }
    Tensor h = add(embed_gather(token_embed, y_in, {b, j_len}), slice(dec_pos, 0, 0, j_len));
    h = dropout(h, dec_cfg.dropout, mode);
    const AttnMask self_mask = AttnMask::causal(b, j_len);
    const AttnMask cross_mask = AttnMask::key_padding(ctx_lengths, j_len, ctx.dim(1));
    for (const auto& blk : blocks) h = blk(h, ctx, self_mask, cross_mask, dec_cfg.dropout, mode);
    return out_head(ln_out(h));
  }

  void collect(const std::string& prefix, ParamList& out) const {
    context.collect(prefix + "/context", out);
    ctc_head.collect(prefix + "/ctc_head", out);
    out.push_back({prefix + "/token_embed", token_embed});
    out.push_back({prefix + "/dec_pos", dec_pos});
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + "/block" + std::to_string(i), out);
    ln_out.collect(prefix + "/ln_out", out);
    out_head.collect(prefix + "/out_head", out);
  }
};

/// Copies values by name from `src` into `dst`. Every name in `dst` must be
/// present with a matching shape unless `allow_missing`.
inline void copy_values(const ParamList& src, ParamList& dst, bool allow_missing = false) {
  for (auto& d : dst) {
    const NamedTensor* match = nullptr;
    for (const auto& s : src) {
      if (s.name == d.name) {
        match = &s;
        break;
      }
    }
    if (!match) {
      if (allow_missing) continue;
      throw DataError("missing tensor '" + d.name + "'");
    }
    if (match->tensor.shape() != d.tensor.shape()) {
      throw DimensionError("tensor '" + d.name + "' has shape " + shape_str(match->tensor.shape()) +
                           ", expected " + shape_str(d.tensor.shape()));
    }
    std::copy(match->tensor.data().begin(), match->tensor.data().end(), d.tensor.data().begin());
  }
}

/// Deep copies: model structs share tensor storage when copied.
inline EncoderModel clone(const EncoderModel& m) {
  Rng rng(0);
  EncoderModel c(m.input_dim(), m.stack.cfg, m.units(), rng);
  ParamList src, dst;
  m.collect("m", src);
  c.collect("m", dst);
  copy_values(src, dst);
  return c;
}

inline DecoderModel clone(const DecoderModel& m) {
  Rng rng(0);
  DecoderModel c(m.context.cfg, m.dec_cfg, m.vocab(), rng);
  ParamList src, dst;
  m.collect("m", src);
  c.collect("m", dst);
  copy_values(src, dst);
  return c;
}

}  // namespace lipmem
