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

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lipmem/errors.hpp"
#include "lipmem/numcore.hpp"

namespace lipmem {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

inline void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

struct AdamState {
  long step = 0;
  std::vector<AdamSlot> slots;  // parallel to the ParamList it was built for
};

/// One bias-corrected Adam update. Parameters that received no gradient are
/// updated with a zero gradient. With lr == 0 parameters are left untouched.
inline void sgd_adam_step(ParamList& params, AdamState& state, double lr,
                          const AdamConfig& cfg = {}) {
  if (lr < 0.0) throw ContractError("adam: negative learning rate");
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m.assign(params[i].tensor.numel(), 0.0);
      state.slots[i].v.assign(params[i].tensor.numel(), 0.0);
    }
  }
  if (state.slots.size() != params.size()) {
    throw DimensionError("adam: state tracks " + std::to_string(state.slots.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i].tensor;
    if (p.has_grad()) {
      for (double g : p.grad()) {
        if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient in " + params[i].name);
      }
    }
    if (state.slots[i].m.size() != p.numel()) {
      throw DimensionError("adam: state size mismatch for " + params[i].name);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    AdamSlot& slot = state.slots[i];
    const bool has = p.has_grad();
    auto grad = p.grad();
    auto data = p.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? grad[j] : 0.0;
      slot.m[j] = cfg.beta1 * slot.m[j] + (1.0 - cfg.beta1) * g;
      slot.v[j] = cfg.beta2 * slot.v[j] + (1.0 - cfg.beta2) * g * g;
      if (lr == 0.0) continue;
      const double mhat = slot.m[j] / bc1;
      const double vhat = slot.v[j] / bc2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

/// Linear warmup to the peak, constant hold, then linear decay to
/// peak * decay_floor. Stage proportions are fractions of total_steps.
struct TriStageSchedule {
  double peak_lr = 1e-3;
  long total_steps = 0;
  double warmup = 0.25;
  double hold = 0.0;
  double decay = 0.75;
  double decay_floor = 0.05;

  long warmup_steps() const { return std::lround(warmup * static_cast<double>(total_steps)); }
  long hold_steps() const { return std::lround(hold * static_cast<double>(total_steps)); }
  long decay_steps() const { return total_steps - warmup_steps() - hold_steps(); }

  void validate() const {
    if (std::abs(warmup + hold + decay - 1.0) > 1e-9) {
      throw ConfigError("tri-stage proportions must sum to 1");
    }
    if (warmup < 0 || hold < 0 || decay < 0 || total_steps < 0 || peak_lr < 0) {
      throw ConfigError("tri-stage schedule has a negative field");
    }
  }

  /// Learning rate applied at 1-based step `step` (0 gives the initial rate).
  double at(long step) const {
    const long w = warmup_steps(), h = hold_steps(), d = decay_steps();
    if (step <= w) return w > 0 ? peak_lr * static_cast<double>(step) / static_cast<double>(w)
                                : peak_lr;
    if (step <= w + h) return peak_lr;
    if (d <= 0) return peak_lr * decay_floor;
    const double frac =
        std::min(1.0, static_cast<double>(step - w - h) / static_cast<double>(d));
    return peak_lr * (1.0 - (1.0 - decay_floor) * frac);
  }
};

}  // namespace lipmem
