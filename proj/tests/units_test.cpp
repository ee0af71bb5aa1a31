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

#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "lipmem/units.hpp"

namespace lipmem {
namespace {

UnitCodebook codebook_of(std::vector<double> rows, std::size_t dim) {
  UnitCodebook cb;
  cb.feature_dim = dim;
  cb.size = rows.size() / dim;
  cb.centroids = std::move(rows);
  return cb;
}

std::vector<double> random_points(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> p(n * d);
  for (auto& v : p) v = normal(rng);
  return p;
}

TEST(KMeans, ExactFitOnDistinctPoints) {
  std::vector<double> pts = {0, 0, 5, 0, 0, 5, 5, 5};
  auto res = kmeans_fit(pts, 2, 4, 10, 3);
  std::set<std::vector<double>> want, got;
  for (std::size_t i = 0; i < 4; ++i) {
    want.insert({pts[2 * i], pts[2 * i + 1]});
    auto c = res.codebook.centroid(i);
    got.insert({c[0], c[1]});
  }
  EXPECT_EQ(want, got);
  EXPECT_EQ(res.inertia_trace.back(), 0.0);
}

TEST(KMeans, TwoBlobsRecoverSampleMeans) {
  Rng rng(9);
  std::vector<double> pts;
  double mean[2][2] = {{0, 0}, {0, 0}};
  const double centers[2][2] = {{-2.0, 1.0}, {3.0, -1.5}};
  for (int blob = 0; blob < 2; ++blob)
    for (int i = 0; i < 100; ++i)
      for (int k = 0; k < 2; ++k) {
        const double v = centers[blob][k] + 0.01 * normal(rng);
        pts.push_back(v);
        mean[blob][k] += v / 100.0;
      }
  auto res = kmeans_fit(pts, 2, 2, 50, 4);
  for (int blob = 0; blob < 2; ++blob) {
    double best = 1e9;
    for (std::size_t c = 0; c < 2; ++c) {
      auto cen = res.codebook.centroid(c);
      best = std::min(best, std::max(std::abs(cen[0] - mean[blob][0]), std::abs(cen[1] - mean[blob][1])));
    }
    EXPECT_LT(best, 0.1);
  }
}

TEST(KMeans, DeterministicPerSeed) {
  Rng rng(2);
  auto pts = random_points(rng, 200, 3);
  auto a = kmeans_fit(pts, 3, 8, 20, 17);
  auto b = kmeans_fit(pts, 3, 8, 20, 17);
  EXPECT_EQ(a.codebook.centroids, b.codebook.centroids);
}

TEST(KMeans, InsufficientDataIsDataError) {
  std::vector<double> pts = {0, 1, 2};
  EXPECT_THROW(kmeans_fit(pts, 1, 4, 10, 1), DataError);
  std::vector<double> same = {1, 1, 1, 1};
  EXPECT_THROW(kmeans_fit(same, 1, 2, 10, 1), DataError);
}

TEST(KMeans, InertiaTraceIsMonotoneAndBelowInit) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto pts = random_points(rng, 150, 4);
    auto res = kmeans_fit(pts, 4, 10, 30, seed);
    for (std::size_t i = 1; i < res.inertia_trace.size(); ++i)
      EXPECT_LE(res.inertia_trace[i], res.inertia_trace[i - 1] + 1e-9);
    EXPECT_LE(inertia(pts, 4, res.codebook), res.init_inertia + 1e-9);
  }
}

TEST(KMeans, CentroidsAreDistinct) {
  Rng rng(5);
  auto pts = random_points(rng, 300, 2);
  auto res = kmeans_fit(pts, 2, 16, 30, 5);
  std::set<std::vector<double>> rows;
  for (std::size_t c = 0; c < 16; ++c) {
    auto r = res.codebook.centroid(c);
    rows.insert(std::vector<double>(r.begin(), r.end()));
  }
  EXPECT_EQ(rows.size(), 16u);
}

TEST(Quantize, ExactCentroidAndTieRule) {
  std::vector<double> rows(8 * 2);
  for (std::size_t c = 0; c < 8; ++c) {
    rows[2 * c] = static_cast<double>(c);
    rows[2 * c + 1] = static_cast<double>(c * c);
  }
  auto cb = codebook_of(rows, 2);
  std::vector<double> f = {7, 49};
  EXPECT_EQ(quantize(f, 2, cb)[0], 7);

  auto tie = codebook_of({0, 0, 0, 0, 1, 0, 9, 9, 9, 9, -1, 0}, 2);
  std::vector<double> mid = {0, 0};
  // Centroids 0 and 1 coincide; 2 and 5 are equidistant from the origin.
  EXPECT_EQ(quantize(mid, 2, tie)[0], 0);
  auto tie25 = codebook_of({9, 9, 9, 9, 1, 0, 9, 9, 9, 9, -1, 0}, 2);
  EXPECT_EQ(quantize(mid, 2, tie25)[0], 2);
}

TEST(Quantize, DimMismatchIsDimensionError) {
  auto cb = codebook_of({0, 0, 1, 1}, 2);
  std::vector<double> f = {0, 0, 0};
  EXPECT_THROW(quantize(f, 3, cb), DimensionError);
}

TEST(Quantize, MatchesBruteForceScan) {
  Rng rng(12);
  const std::size_t d = 5, c = 9;
  auto cb = codebook_of(random_points(rng, c, d), d);
  auto feats = random_points(rng, 50, d);
  auto units = quantize(feats, d, cb);
  for (std::size_t t = 0; t < 50; ++t) {
    long best = -1;
    double bd = 0;
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = feats[t * d + k] - cb.centroids[j * d + k];
        s += diff * diff;
      }
      if (best < 0 || s < bd) {
        bd = s;
        best = static_cast<long>(j);
      }
    }
    EXPECT_EQ(units[t], best);
  }
}

TEST(Quantize, CentroidsMapToThemselves) {
  Rng rng(13);
  auto cb = codebook_of(random_points(rng, 12, 3), 3);
  auto units = quantize(cb.centroids, 3, cb);
  for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(units[c], static_cast<long>(c));
}

TEST(Quantize, PermutingCentroidsPermutesLabels) {
  Rng rng(14);
  const std::size_t d = 3, c = 10;
  auto cb = codebook_of(random_points(rng, c, d), d);
  std::vector<std::size_t> perm(c);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_in_place(perm, rng);
  UnitCodebook pcb = cb;
  for (std::size_t j = 0; j < c; ++j)
    std::copy_n(cb.centroids.begin() + static_cast<long>(j * d), d,
                pcb.centroids.begin() + static_cast<long>(perm[j] * d));
  auto feats = random_points(rng, 40, d);
  auto u = quantize(feats, d, cb);
  auto pu = quantize(feats, d, pcb);
  for (std::size_t t = 0; t < 40; ++t) EXPECT_EQ(pu[t], static_cast<long>(perm[static_cast<std::size_t>(u[t])]));
}

TEST(Purity, MajorityCounting) {
  std::vector<long> units = {0, 0, 0, 1, 1};
  std::vector<int> labels = {4, 4, 5, 6, 6};
  EXPECT_DOUBLE_EQ(cluster_purity(units, labels), 4.0 / 5.0);
}

TEST(Refine, ShapeAndRange) {
  LanguageParams lp;
  auto lang = gen_language(lp);
  CorpusParams cp;
  cp.n_utts = 20;
  auto corpus = gen_corpus(lang, cp);
  Rng rng(1);
  TransformerConfig cfg{1, 16, 32, 2, 0.0, 64};
  EncoderModel enc(32, cfg, 8, rng);
  auto cb = refine_codebook(enc, corpus, 8, 1, 16, 16, 1);
  EXPECT_EQ(cb.size, 8u);
  EXPECT_EQ(cb.feature_dim, 16u);
  EXPECT_EQ(cb.source_tag, "learned-iter-1");
  auto feats = encoder_features(enc, corpus, 16, 16, true);
  for (long u : quantize(feats, 16, cb)) {
    EXPECT_GE(u, 0);
    EXPECT_LT(u, 8);
  }
  EXPECT_THROW(refine_codebook(enc, std::vector<Utterance>{}, 8, 1, 16, 16), DataError);
}

}  // namespace
}  // namespace lipmem
