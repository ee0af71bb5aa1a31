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

// Discrete speech units: K-means codebooks over feature frames.

#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lipmem/batching.hpp"
#include "lipmem/errors.hpp"
#include "lipmem/nnet.hpp"
#include "lipmem/random.hpp"

namespace lipmem {

struct UnitCodebook {
  std::vector<double> centroids;  // size x feature_dim, row-major
  std::size_t size = 0;           // C
  std::size_t feature_dim = 0;
  std::string source_tag = "mfcc-like";

  std::span<const double> centroid(std::size_t c) const {
    return {centroids.data() + c * feature_dim, feature_dim};
  }
};

using UnitSequence = std::vector<long>;

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

// Nearest centroid, ties to the lowest index.
inline std::size_t nearest(const double* x, const std::vector<double>& centroids, std::size_t c,
                           std::size_t d, double* best_dist = nullptr) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j) {
    const double dist = sq_dist(x, centroids.data() + j * d, d);
    if (dist < bd) {
      bd = dist;
      best = j;
    }
  }
  if (best_dist) *best_dist = bd;
  return best;
}

}  // namespace detail

struct KMeansResult {
  UnitCodebook codebook;
  double init_inertia = 0.0;
  std::vector<double> inertia_trace;  // after every assignment step
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. `points` is N x dim row-major.
/// An emptied cluster takes the point farthest from its current centroid.
inline KMeansResult kmeans_fit(std::span<const double> points, std::size_t dim, std::size_t clusters,
                               std::size_t max_iters, std::uint64_t seed) {
  if (dim == 0 || points.size() % dim != 0) {
    throw DimensionError("kmeans: point buffer of " + std::to_string(points.size()) +
                         " values is not a multiple of dim " + std::to_string(dim));
  }
  const std::size_t n = points.size() / dim;
  if (clusters < 1) throw ConfigError("kmeans: need at least one cluster");
  if (n < clusters) {
    throw DataError("kmeans: insufficient data, " + std::to_string(n) + " points for " +
                    std::to_string(clusters) + " clusters");
  }
  if (max_iters < 1) throw ConfigError("kmeans: max_iters must be >= 1");
  const double* x = points.data();
  Rng rng(derive_seed(seed, "kmeans"));

  std::vector<double> cent(clusters * dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = uniform_index(rng, n);
  std::copy_n(x + first * dim, dim, cent.begin());
  for (std::size_t c = 1; c < clusters; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], detail::sq_dist(x + i * dim, cent.data() + (c - 1) * dim, dim));
      total += d2[i];
    }
    if (total <= 0.0) {
      throw DataError("kmeans: fewer than " + std::to_string(clusters) + " distinct points");
    }
    double r = uniform01(rng) * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      r -= d2[i];
      if (r < 0.0) {
        pick = i;
        break;
      }
    }
    while (d2[pick] <= 0.0) --pick;  // rounding at the tail
    std::copy_n(x + pick * dim, dim, cent.begin() + static_cast<long>(c * dim));
  }

  KMeansResult res;
  std::vector<std::size_t> assign(n, clusters);
  std::vector<double> dist(n);
  for (std::size_t it = 0; it < max_iters; ++it) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = detail::nearest(x + i * dim, cent, clusters, dim, &dist[i]);
      changed |= a != assign[i];
      assign[i] = a;
      inertia += dist[i];
    }
    if (it == 0) res.init_inertia = inertia;
    res.inertia_trace.push_back(inertia);
    res.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<std::size_t> count(clusters, 0);
    for (std::size_t i = 0; i < n; ++i) ++count[assign[i]];
    for (std::size_t c = 0; c < clusters; ++c) {
      if (count[c] != 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (count[assign[i]] > 1 && (count[assign[far]] <= 1 || dist[i] > dist[far])) far = i;
      }
      --count[assign[far]];
      assign[far] = c;
      count[c] = 1;
      dist[far] = 0.0;
    }
    std::fill(cent.begin(), cent.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double* row = cent.data() + assign[i] * dim;
      for (std::size_t k = 0; k < dim; ++k) row[k] += x[i * dim + k];
    }
    for (std::size_t c = 0; c < clusters; ++c)
      for (std::size_t k = 0; k < dim; ++k) cent[c * dim + k] /= static_cast<double>(count[c]);
  }
  res.codebook.centroids = std::move(cent);
  res.codebook.size = clusters;
  res.codebook.feature_dim = dim;
  return res;
}

/// unit_t = argmin_c |feature_t - centroid_c|^2, ties to the lowest index.
inline UnitSequence quantize(std::span<const double> features, std::size_t feature_dim,
                             const UnitCodebook& codebook) {
  if (feature_dim != codebook.feature_dim) {
    throw DimensionError("quantize: feature dim " + std::to_string(feature_dim) +
                         " does not match codebook dim " + std::to_string(codebook.feature_dim));
  }
  if (feature_dim == 0 || features.size() % feature_dim != 0) {
    throw DimensionError("quantize: feature buffer is not a multiple of the feature dim");
  }
  const std::size_t t = features.size() / feature_dim;
  UnitSequence units(t);
  for (std::size_t i = 0; i < t; ++i) {
    units[i] = static_cast<long>(
        detail::nearest(features.data() + i * feature_dim, codebook.centroids, codebook.size, feature_dim));
  }
  return units;
}

inline double inertia(std::span<const double> points, std::size_t dim, const UnitCodebook& cb) {
  double s = 0.0;
  const std::size_t n = points.size() / dim;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    detail::nearest(points.data() + i * dim, cb.centroids, cb.size, dim, &d);
    s += d;
  }
  return s;
}

/// Fraction of frames whose unit's majority label matches their own label.
inline double cluster_purity(std::span<const long> units, std::span<const int> labels) {
  if (units.size() != labels.size()) throw DimensionError("purity: length mismatch");
  if (units.empty()) return 1.0;
  std::map<long, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < units.size(); ++i) ++table[units[i]][labels[i]];
  std::size_t hit = 0;
  for (const auto& [unit, counts] : table) {
    std::size_t best = 0;
    for (const auto& [label, c] : counts) best = std::max(best, c);
    hit += best;
  }
  return static_cast<double>(hit) / static_cast<double>(units.size());
}

/// Pooled audio frames of a corpus, N x audio_dim.
inline std::vector<double> pooled_audio(std::span<const Utterance> corpus) {
  std::vector<double> pts;
  for (const auto& u : corpus) pts.insert(pts.end(), u.audio.begin(), u.audio.end());
  return pts;
}

/// Encoder hidden features of every valid frame in the corpus (N x dim).
inline std::vector<double> encoder_features(const EncoderModel& model, std::span<const Utterance> corpus,
                                            std::size_t video_dim, std::size_t audio_dim, bool with_audio,
                                            std::size_t batch_size = 16) {
  NoGradScope no_grad;
  std::vector<double> feats;
  const UtteranceRefs all = refs_of(corpus);
  for (std::size_t s = 0; s < all.size(); s += batch_size) {
    UtteranceRefs part(all.begin() + static_cast<long>(s),
                       all.begin() + static_cast<long>(std::min(all.size(), s + batch_size)));
    Batch b = make_encoder_batch(part, video_dim, audio_dim, with_audio);
    Tensor f = model.encode(b);
    const std::size_t t = f.dim(1), d = f.dim(2);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const double* base = f.data().data() + i * t * d;
      feats.insert(feats.end(), base, base + part[i]->frames * d);
    }
  }
  return feats;
}

/// Re-clusters the encoder's hidden features (multimodal input) into a new
/// codebook tagged "learned-iter-<iteration>".
inline UnitCodebook refine_codebook(const EncoderModel& model, std::span<const Utterance> corpus,
                                    std::size_t clusters, std::uint64_t seed, std::size_t video_dim,
                                    std::size_t audio_dim, int iteration = 1,
                                    std::size_t max_iters = 50) {
  if (corpus.empty()) throw DataError("refine_codebook: empty corpus");
  const auto feats = encoder_features(model, corpus, video_dim, audio_dim, true);
  auto res = kmeans_fit(feats, model.dim(), clusters, max_iters, seed);
  res.codebook.source_tag = "learned-iter-" + std::to_string(iteration);
  return res.codebook;
}

}  // namespace lipmem
