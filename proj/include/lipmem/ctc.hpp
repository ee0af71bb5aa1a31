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

// Connectionist temporal classification: forward-backward in log space.

#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "lipmem/errors.hpp"
#include "lipmem/numcore.hpp"

namespace lipmem {

namespace detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace detail

/// Smallest T that can emit `target`: one frame per label plus a blank
/// between repeated labels.
inline std::size_t ctc_min_frames(std::span<const long> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) n += target[i] == target[i - 1];
  return n;
}

/// Sum over the batch of -log P(target_b | log_probs_b). `log_probs` is
/// [B, T, K] (already log-normalized), blank = K-1, rows past lengths[b]
/// are ignored.
inline Tensor ctc_loss(const Tensor& log_probs, const std::vector<std::size_t>& lengths,
                       const std::vector<std::vector<long>>& targets) {
  if (log_probs.rank() != 3) throw DimensionError("ctc: log_probs must be [B,T,K], got " + shape_str(log_probs.shape()));
  const std::size_t b = log_probs.dim(0), tmax = log_probs.dim(1), k = log_probs.dim(2);
  if (lengths.size() != b || targets.size() != b) throw DimensionError("ctc: batch size mismatch");
  if (k < 2) throw DimensionError("ctc: need at least one label plus blank");
  const long blank = static_cast<long>(k - 1);
  const auto lp = log_probs.data();

  Tensor out = detail::make_result(Shape{}, detail::tracking({&log_probs}));
  // Per-item occupancy exp(alpha+beta-logP) summed per (t, label), for the backward.
  std::vector<double> occupancy(b * tmax * k, 0.0);
  double total = 0.0;

  for (std::size_t n = 0; n < b; ++n) {
    const auto& y = targets[n];
    const std::size_t t_len = lengths[n];
    if (t_len > tmax) throw DimensionError("ctc: length exceeds padded T");
    for (long id : y) {
      if (id < 0 || id >= blank) throw IndexError("ctc: target id " + std::to_string(id) + " outside [0," + std::to_string(blank) + ")");
    }
    if (ctc_min_frames(y) > t_len) {
      throw InfeasibleError("ctc: target of " + std::to_string(y.size()) + " labels needs at least " +
                            std::to_string(ctc_min_frames(y)) + " frames, got " + std::to_string(t_len));
    }
    if (t_len == 0) continue;  // empty target on empty input: P = 1
    const std::size_t s_len = 2 * y.size() + 1;
    auto label = [&](std::size_t s) { return s % 2 == 0 ? blank : y[s / 2]; };
    auto at = [&](std::size_t t, long c) { return lp[(n * tmax + t) * k + static_cast<std::size_t>(c)]; };

    std::vector<double> alpha(t_len * s_len, detail::kNegInf), beta(t_len * s_len, detail::kNegInf);
    alpha[0] = at(0, blank);
    if (s_len > 1) alpha[1] = at(0, label(1));
    for (std::size_t t = 1; t < t_len; ++t) {
      for (std::size_t s = 0; s < s_len; ++s) {
        double a = alpha[(t - 1) * s_len + s];
        if (s >= 1) a = detail::log_add(a, alpha[(t - 1) * s_len + s - 1]);
        if (s >= 2 && label(s) != blank && label(s) != label(s - 2)) a = detail::log_add(a, alpha[(t - 1) * s_len + s - 2]);
        alpha[t * s_len + s] = a == detail::kNegInf ? a : a + at(t, label(s));
      }
    }
    const std::size_t last = t_len - 1;
    beta[last * s_len + s_len - 1] = at(last, blank);
    if (s_len > 1) beta[last * s_len + s_len - 2] = at(last, label(s_len - 2));
    for (std::size_t t = last; t-- > 0;) {
      for (std::size_t s = 0; s < s_len; ++s) {
        double v = beta[(t + 1) * s_len + s];
        if (s + 1 < s_len) v = detail::log_add(v, beta[(t + 1) * s_len + s + 1]);
        if (s + 2 < s_len && label(s) != blank && label(s) != label(s + 2)) v = detail::log_add(v, beta[(t + 1) * s_len + s + 2]);
        beta[t * s_len + s] = v == detail::kNegInf ? v : v + at(t, label(s));
      }
    }
    double log_p = alpha[last * s_len + s_len - 1];
    if (s_len > 1) log_p = detail::log_add(log_p, alpha[last * s_len + s_len - 2]);
    if (!std::isfinite(log_p)) throw NumericError("ctc: non-finite likelihood");
    total -= log_p;

    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t s = 0; s < s_len; ++s) {
        const double ab = alpha[t * s_len + s] + beta[t * s_len + s];
        if (ab == detail::kNegInf) continue;
        const long c = label(s);
        occupancy[(n * tmax + t) * k + static_cast<std::size_t>(c)] += std::exp(ab - at(t, c) - log_p);
      }
    }
  }
  out.data()[0] = total;
  if (out.requires_grad()) {
    detail::record("ctc", {log_probs.impl()}, out,
                   [li = log_probs.impl().get(), oi = out.impl().get(), occ = std::move(occupancy)] {
                     double* g = detail::grad_sink(li);
                     if (!g) return;
                     const double up = oi->grad[0];
                     for (std::size_t i = 0; i < occ.size(); ++i) g[i] -= up * occ[i];
                   });
  }
  return out;
}

/// -log P(target | log_probs) for one sequence; `log_probs` is [T, V+1].
inline Tensor ctc_forward(const Tensor& log_probs, std::span<const long> target) {
  if (log_probs.rank() != 2) throw DimensionError("ctc: log_probs must be [T,V+1], got " + shape_str(log_probs.shape()));
  return ctc_loss(reshape(log_probs, {1, log_probs.dim(0), log_probs.dim(1)}), {log_probs.dim(0)},
                  {std::vector<long>(target.begin(), target.end())});
}

}  // namespace lipmem
