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

// Helpers for the memory-attention tests.

#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lipmem/bridge.hpp"
#include "lipmem/container.hpp"
#include "lipmem/numcore.hpp"
#include "lipmem/random.hpp"

namespace lipmem::testing {

/// c <= d orthonormal rows by Gram-Schmidt on Gaussian draws.
inline Tensor orthonormal_rows(Rng& rng, std::size_t c, std::size_t d) {
  std::vector<double> m(c * d);
  for (std::size_t r = 0; r < c; ++r) {
    double* row = m.data() + r * d;
    for (std::size_t k = 0; k < d; ++k) row[k] = normal(rng);
    for (std::size_t p = 0; p < r; ++p) {
      const double* prev = m.data() + p * d;
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += row[k] * prev[k];
      for (std::size_t k = 0; k < d; ++k) row[k] -= dot * prev[k];
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < d; ++k) norm += row[k] * row[k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) row[k] /= norm;
  }
  return Tensor(Shape{c, d}, std::move(m));
}

/// Coefficients w minimizing |w^T V - x| for V [c, d] with c <= d, via the
/// normal equations and Gaussian elimination with partial pivoting.
inline std::vector<double> least_squares_coefficients(const std::vector<double>& v, std::size_t c, std::size_t d,
                                                      const std::vector<double>& x) {
  std::vector<double> a(c * (c + 1), 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t k = 0; k < d; ++k) a[i * (c + 1) + j] += v[i * d + k] * v[j * d + k];
    for (std::size_t k = 0; k < d; ++k) a[i * (c + 1) + c] += v[i * d + k] * x[k];
  }
  for (std::size_t col = 0; col < c; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < c; ++r)
      if (std::abs(a[r * (c + 1) + col]) > std::abs(a[piv * (c + 1) + col])) piv = r;
    for (std::size_t k = 0; k <= c; ++k) std::swap(a[col * (c + 1) + k], a[piv * (c + 1) + k]);
    const double p = a[col * (c + 1) + col];
    if (std::abs(p) < 1e-300) throw std::runtime_error("least squares: singular system");
    for (std::size_t r = 0; r < c; ++r) {
      if (r == col) continue;
      const double f = a[r * (c + 1) + col] / p;
      for (std::size_t k = col; k <= c; ++k) a[r * (c + 1) + k] -= f * a[col * (c + 1) + k];
    }
  }
  std::vector<double> w(c);
  for (std::size_t i = 0; i < c; ++i) w[i] = a[i * (c + 1) + c] / a[i * (c + 1) + i];
  return w;
}

/// Copies of the values rounded as a checkpoint stores them.
inline void round_all(ParamList& params) {
  ParamList copies;
  for (const auto& p : params) copies.push_back({p.name, p.tensor.detach()});
  round_to_stored(copies);
  params = std::move(copies);
}

/// Bridge with identity key/value maps and a query scaled by q_scale.
inline BridgeParams identity_bridge(std::size_t d, double q_scale) {
  BridgeParams p = BridgeParams::zeros(d);
  for (std::size_t i = 0; i < d; ++i) {
    p.wq.data()[i * d + i] = q_scale;
    p.wk.data()[i * d + i] = 1.0;
    p.wv.data()[i * d + i] = 1.0;
  }
  return p;
}

}  // namespace lipmem::testing
