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

// Shared optimization loop plumbing.

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lipmem/errors.hpp"
#include "lipmem/nnet.hpp"
#include "lipmem/optim.hpp"
#include "lipmem/random.hpp"

namespace lipmem {

struct TrainConfig {
  long steps = 1000;
  std::size_t batch_size = 8;
  double peak_lr = 1e-3;
  double warmup = 0.25;
  double hold = 0.0;
  double decay = 0.75;
  double decay_floor = 0.05;
  long freeze_steps = 0;
  long log_every = 50;
  std::uint64_t seed = 1;

  TriStageSchedule schedule() const {
    TriStageSchedule s{peak_lr, steps, warmup, hold, decay, decay_floor};
    s.validate();
    return s;
  }

  void validate(const std::string& what) const {
    if (steps < 0 || freeze_steps < 0 || log_every < 1) throw ConfigError(what + ": negative step count");
    if (batch_size < 1) throw ConfigError(what + ": batch_size must be >= 1");
    schedule();
  }
};

/// Endless seeded stream of minibatch index sets: one shuffled pass after
/// another.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), rng_(derive_seed(seed, "batches")) {
    if (n == 0) throw DataError("training corpus is empty");
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = n;
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == n_) {
        shuffle_in_place(order_, rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

/// Metrics as comma-separated text with a header line.
struct MetricsLog {
  std::string header;
  std::string body;

  explicit MetricsLog(std::string h = "step,loss") : header(std::move(h)) {}

  void row(long step, std::initializer_list<double> values) {
    body += std::to_string(step);
    for (double v : values) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), ",%.6f", v);
      body += buf;
    }
    body += '\n';
  }

  std::string str() const { return header + '\n' + body; }
};

/// One optimizer step: backward, finiteness check, Adam with the scheduled
/// rate, tape reset.
inline void optimizer_step(Tape& tape, const Tensor& loss, ParamList& params, AdamState& state, double lr,
                           const std::string& stage, long step) {
  if (!std::isfinite(loss.item())) throw TrainingError(stage, step, "non-finite loss");
  zero_grads(params);
  tape.backward(loss);
  try {
    sgd_adam_step(params, state, lr);
  } catch (const NumericError& e) {
    throw TrainingError(stage, step, e.what());
  }
  tape.reset();
}

inline ParamList collect_params(const auto& module, const std::string& prefix) {
  ParamList p;
  module.collect(prefix, p);
  return p;
}

}  // namespace lipmem
