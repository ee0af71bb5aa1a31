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

// Dense 64-bit tensors and a reverse-mode tape.
//
// A Tensor is a shared handle to row-major storage. Operations evaluate
// eagerly; when a Tape is active (see TapeScope) and any input requires a
// gradient, the operation appends a node carrying its backward rule. Leaf
// gradients accumulate across backward passes until zero_grad() is called.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lipmem/errors.hpp"

namespace lipmem {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  bool is_leaf = true;

  void accumulate(std::size_t i, double g) { grad[i] += g; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values)
      : impl_(std::make_shared<TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  /// A trainable leaf.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.impl_->requires_grad = true;
    return t;
  }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  /// Size of an axis; negative axes count from the end.
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("tensor: axis " + std::to_string(axis) +
                           " out of range for shape " + shape_str(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(a)];
  }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->is_leaf; }

  double item() const {
    if (numel() != 1) {
      throw DimensionError("item: tensor of shape " + shape_str(shape()) +
                           " is not a scalar");
    }
    return impl_->data[0];
  }

  double operator[](std::size_t i) const { return impl_->data[i]; }

  /// Value copy without gradient tracking.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// --------------------------------------------------------------------------
// Tape

class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, BackwardFn fn) {
    nodes_.push_back(Node{std::string(op), std::move(inputs), std::move(output),
                          std::move(fn)});
  }

  /// Runs every node in reverse recording order, once. Returns the leaves that
  /// received a gradient, in first-reached order.
  std::vector<Tensor> backward(const Tensor& loss) {
    if (consumed_) {
      throw ContractError("backward: tape already consumed; call reset() first");
    }
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
    }
    const TensorImpl* root = loss.impl().get();
    const bool connected = std::any_of(nodes_.begin(), nodes_.end(),
                                       [&](const Node& n) { return n.output.get() == root; });
    if (!connected) throw ContractError("backward: loss is not connected to the tape");
    consumed_ = true;

    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;

    std::vector<Tensor> leaves;
    std::unordered_set<const TensorImpl*> seen;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
      for (const auto& in : it->inputs) {
        if (in->is_leaf && in->requires_grad && seen.insert(in.get()).second) {
          leaves.emplace_back(in);
        }
      }
    }
    return leaves;
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Makes `tape` the recording target for the current thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(Tape::active()) { Tape::active() = &tape; }
  ~TapeScope() { Tape::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording (evaluation).
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape::active()) { Tape::active() = nullptr; }
  ~NoGradScope() { Tape::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

inline bool tracking(std::span<const Tensor> inputs) {
  if (Tape::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

inline Tensor make_result(Shape shape, bool track) {
  Tensor out(std::move(shape));
  if (track) {
    out.impl()->requires_grad = true;
    out.impl()->is_leaf = false;
  }
  return out;
}

inline void record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
                   const Tensor& out, Tape::BackwardFn fn) {
  Tape::active()->record(op, std::move(inputs), out.impl(), std::move(fn));
}

// Gradient sink for an input, or nullptr when the input is not differentiable.
inline double* grad_sink(TensorImpl* t) {
  if (!t->requires_grad) return nullptr;
  t->ensure_grad();
  return t->grad.data();
}

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline std::size_t normalize_axis(std::string_view op, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

inline void require_finite(std::string_view op, const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

// --------------------------------------------------------------------------
// Element-wise

/// a + b. `b` may equal a's shape or a's trailing dimensions (bias broadcast).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool trailing = sb.size() <= sa.size() &&
                        std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size()));
  if (!trailing) {
    throw DimensionError("add: shape " + shape_str(sb) + " does not match trailing axes of " +
                         shape_str(sa));
  }
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::make_result(sa, track);
  const std::size_t n = a.numel(), m = b.numel();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % m];
  if (track) {
    detail::record("add", {a.impl(), b.impl()}, out,
                   [ai = a.impl().get(), bi = b.impl().get(), oi = out.impl().get(), n, m] {
                     const double* g = oi->grad.data();
                     if (double* ga = detail::grad_sink(ai)) {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                     }
                     if (double* gb = detail::grad_sink(bi)) {
                       for (std::size_t i = 0; i < n; ++i) gb[i % m] += g[i];
                     }
                   });
  }
  return out;
}

/// Element-wise product of equally shaped tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::make_result(a.shape(), track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a[i] * b[i];
  if (track) {
    detail::record("mul", {a.impl(), b.impl()}, out,
                   [ai = a.impl().get(), bi = b.impl().get(), oi = out.impl().get(), n] {
                     const double* g = oi->grad.data();
                     if (double* ga = detail::grad_sink(ai)) {
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bi->data[i];
                     }
                     if (double* gb = detail::grad_sink(bi)) {
                       for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ai->data[i];
                     }
                   });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(a.shape(), track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a[i] * s;
  if (track) {
    detail::record("scale", {a.impl()}, out, [ai = a.impl().get(), oi = out.impl().get(), n, s] {
      if (double* ga = detail::grad_sink(ai)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i] * s;
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& a) {
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(a.shape(), track);
  const std::size_t n = a.numel();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  if (track) {
    detail::record("gelu", {a.impl()}, out, [ai = a.impl().get(), oi = out.impl().get(), n] {
      constexpr double kInvSqrt2Pi = 0.39894228040143267794;
      if (double* ga = detail::grad_sink(ai)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double x = ai->data[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          ga[i] += oi->grad[i] * (cdf + x * pdf);
        }
      }
    });
  }
  return out;
}

/// Replaces entries where mask is non-zero by `value`; those entries pass no
/// gradient.
inline Tensor masked_fill(const Tensor& a, std::span<const std::uint8_t> mask, double value) {
  if (mask.size() != a.numel()) {
    throw DimensionError("masked_fill: mask has " + std::to_string(mask.size()) +
                         " entries, tensor " + shape_str(a.shape()) + " has " +
                         std::to_string(a.numel()));
  }
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(a.shape(), track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = mask[i] ? value : a[i];
  if (track) {
    detail::record("masked_fill", {a.impl()}, out,
                   [ai = a.impl().get(), oi = out.impl().get(), n,
                    m = std::vector<std::uint8_t>(mask.begin(), mask.end())] {
                     if (double* ga = detail::grad_sink(ai)) {
                       for (std::size_t i = 0; i < n; ++i) {
                         if (!m[i]) ga[i] += oi->grad[i];
                       }
                     }
                   });
  }
  return out;
}

// --------------------------------------------------------------------------
// Linear algebra and layout

/// [..., n, k] x [k, m] (shared right operand) or [..., n, k] x [..., k, m].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(-2), k = a.dim(-1), m = b.dim(-1);
  if (b.dim(-2) != k) {
    throw DimensionError("matmul: inner axes differ (" + std::to_string(k) + " vs " +
                         std::to_string(b.dim(-2)) + ") for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const bool shared_b = b.rank() == 2;
  const std::size_t batch = a.numel() / (n * k);
  if (!shared_b) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw DimensionError("matmul: batch axes differ for " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
    }
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(n);
  out_shape.push_back(m);
  const bool track = detail::tracking({&a, &b});
  Tensor out = detail::make_result(out_shape, track);
  const std::size_t b_stride = shared_b ? 0 : k * m;
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t s = 0; s < batch; ++s) {
      const double* A = pa + s * n * k;
      const double* B = pb + s * b_stride;
      double* C = po + s * n * m;
      for (std::size_t i = 0; i < n; ++i) {
        double* __restrict crow = C + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          const double* __restrict brow = B + p * m;
          for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
  if (track) {
    detail::record(
        "matmul", {a.impl(), b.impl()}, out,
        [ai = a.impl().get(), bi = b.impl().get(), oi = out.impl().get(), n, k, m, batch,
         b_stride] {
          const double* G = oi->grad.data();
          double* ga = detail::grad_sink(ai);
          double* gb = detail::grad_sink(bi);
          std::vector<double> bt(ga ? k * m : 0);
          for (std::size_t s = 0; s < batch; ++s) {
            const double* A = ai->data.data() + s * n * k;
            const double* B = bi->data.data() + s * b_stride;
            const double* Gs = G + s * n * m;
            if (ga) {
              // dA = G B^T, accumulated row-wise against B^T so the inner loop
              // is an axpy rather than a reduction.
              if (s == 0 || b_stride != 0) {
                for (std::size_t p = 0; p < k; ++p)
                  for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = B[p * m + j];
              }
              double* GA = ga + s * n * k;
              for (std::size_t i = 0; i < n; ++i) {
                const double* __restrict grow = Gs + i * m;
                double* __restrict garow = GA + i * k;
                for (std::size_t j = 0; j < m; ++j) {
                  const double gv = grow[j];
                  const double* __restrict btrow = bt.data() + j * k;
                  for (std::size_t p = 0; p < k; ++p) garow[p] += gv * btrow[p];
                }
              }
            }
            if (gb) {
              double* GB = gb + s * b_stride;
              for (std::size_t i = 0; i < n; ++i) {
                const double* __restrict grow = Gs + i * m;
                for (std::size_t p = 0; p < k; ++p) {
                  const double av = A[i * k + p];
                  double* __restrict gbrow = GB + p * m;
                  for (std::size_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
                }
              }
            }
          }
        });
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// For each output flat index, the source flat index under axis permutation.
inline std::vector<std::size_t> permutation_gather(const Shape& in_shape,
                                                   const std::vector<std::size_t>& perm) {
  const std::size_t r = in_shape.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_strides = strides_of(in_shape);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_strides[perm[i]];
  const std::size_t total = shape_numel(in_shape);
  std::vector<std::size_t> index(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; ++o) {
    index[o] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  return index;
}

}  // namespace detail

/// Axis permutation; an empty `perm` swaps the last two axes.
inline Tensor transpose(const Tensor& a, std::vector<std::size_t> perm = {}) {
  const std::size_t r = a.rank();
  if (perm.empty()) {
    if (r < 2) throw DimensionError("transpose: rank " + std::to_string(r) + " < 2");
    perm.resize(r);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[r - 1], perm[r - 2]);
  }
  {
    std::vector<std::size_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted.size() != r || sorted[i] != i) {
        throw DimensionError("transpose: invalid permutation for shape " + shape_str(a.shape()));
      }
    }
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  auto index = detail::permutation_gather(a.shape(), perm);
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(out_shape, track);
  for (std::size_t o = 0; o < index.size(); ++o) out.data()[o] = a[index[o]];
  if (track) {
    detail::record("transpose", {a.impl()}, out,
                   [ai = a.impl().get(), oi = out.impl().get(), index = std::move(index)] {
                     if (double* ga = detail::grad_sink(ai)) {
                       for (std::size_t o = 0; o < index.size(); ++o) ga[index[o]] += oi->grad[o];
                     }
                   });
  }
  return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(std::move(shape), track);
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  if (track) {
    detail::record("reshape", {a.impl()}, out, [ai = a.impl().get(), oi = out.impl().get()] {
      if (double* ga = detail::grad_sink(ai)) {
        for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
      }
    });
  }
  return out;
}

inline Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = detail::normalize_axis("concat", axis, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == ax) || s[i] == s0[i];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " +
                           shape_str(s0) + " along axis " + std::to_string(ax));
    }
    out_shape[ax] += s[ax];
  }
  const std::size_t outer = shape_numel(Shape(s0.begin(), s0.begin() + static_cast<long>(ax)));
  const std::size_t inner =
      shape_numel(Shape(s0.begin() + static_cast<long>(ax) + 1, s0.end()));
  const bool track = detail::tracking(parts);
  Tensor out = detail::make_result(out_shape, track);
  const std::size_t row = out_shape[ax] * inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t chunk = p.shape()[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk, out.data().data() + o * row + offset);
    }
    offsets.push_back(offset);
    offset += chunk;
  }
  if (track) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    detail::record("concat", ins, out,
                   [ins, oi = out.impl().get(), offsets, outer, inner, row, ax] {
                     for (std::size_t k = 0; k < ins.size(); ++k) {
                       double* g = detail::grad_sink(ins[k].get());
                       if (!g) continue;
                       const std::size_t chunk = ins[k]->shape[ax] * inner;
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* src = oi->grad.data() + o * row + offsets[k];
                         for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                       }
                     }
                   });
  }
  return out;
}

inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  std::vector<Tensor> v(parts);
  return concat(std::span<const Tensor>(v), axis);
}

/// Half-open range [start, end) along `axis`.
inline Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t end) {
  const std::size_t ax = detail::normalize_axis("slice", axis, a.rank());
  if (start > end || end > a.shape()[ax]) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                         ") outside axis " + std::to_string(ax) + " of " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[ax] = end - start;
  const Shape& s = a.shape();
  const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(ax)));
  const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(ax) + 1, s.end()));
  const std::size_t in_row = s[ax] * inner;
  const std::size_t chunk = (end - start) * inner;
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(out_shape, track);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * in_row + start * inner, chunk,
                out.data().data() + o * chunk);
  }
  if (track) {
    detail::record("slice", {a.impl()}, out,
                   [ai = a.impl().get(), oi = out.impl().get(), outer, in_row, chunk,
                    off = start * inner] {
                     if (double* g = detail::grad_sink(ai)) {
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < chunk; ++i) {
                           g[o * in_row + off + i] += oi->grad[o * chunk + i];
                         }
                       }
                     }
                   });
  }
  return out;
}

/// Row gather: out[..., :] = table[ids[...], :]. Output shape ids_shape + [d].
inline Tensor embed_gather(const Tensor& table, std::span<const long> ids, Shape ids_shape) {
  if (table.rank() != 2) {
    throw DimensionError("embed_gather: table must be rank 2, got " + shape_str(table.shape()));
  }
  if (shape_numel(ids_shape) != ids.size()) {
    throw DimensionError("embed_gather: " + std::to_string(ids.size()) + " ids for shape " +
                         shape_str(ids_shape));
  }
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (long id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("embed_gather: index " + std::to_string(id) + " outside [0," +
                       std::to_string(rows) + ")");
    }
  }
  Shape out_shape = std::move(ids_shape);
  out_shape.push_back(d);
  const bool track = detail::tracking({&table});
  Tensor out = detail::make_result(out_shape, track);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d,
                out.data().data() + t * d);
  }
  if (track) {
    detail::record("embed_gather", {table.impl()}, out,
                   [ti = table.impl().get(), oi = out.impl().get(), d,
                    idx = std::vector<long>(ids.begin(), ids.end())] {
                     if (double* g = detail::grad_sink(ti)) {
                       for (std::size_t t = 0; t < idx.size(); ++t) {
                         double* row = g + static_cast<std::size_t>(idx[t]) * d;
                         for (std::size_t j = 0; j < d; ++j) row[j] += oi->grad[t * d + j];
                       }
                     }
                   });
  }
  return out;
}

// --------------------------------------------------------------------------
// Normalizers

inline Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("softmax_lastdim: scalar input");
  const std::size_t d = a.dim(-1);
  const std::size_t rows = d ? a.numel() / d : 0;
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(a.shape(), track);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * d;
    double* y = out.data().data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < d; ++j) y[j] /= z;
  }
  if (track) {
    detail::record("softmax_lastdim", {a.impl()}, out,
                   [ai = a.impl().get(), oi = out.impl().get(), rows, d] {
                     double* g = detail::grad_sink(ai);
                     if (!g) return;
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* y = oi->data.data() + r * d;
                       const double* gy = oi->grad.data() + r * d;
                       double dot = 0.0;
                       for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
                       for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (gy[j] - dot);
                     }
                   });
  }
  return out;
}

inline Tensor log_softmax_lastdim(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("log_softmax_lastdim: scalar input");
  const std::size_t d = a.dim(-1);
  const std::size_t rows = d ? a.numel() / d : 0;
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(a.shape(), track);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * d;
    double* y = out.data().data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) y[j] = x[j] - lse;
  }
  if (track) {
    detail::record("log_softmax_lastdim", {a.impl()}, out,
                   [ai = a.impl().get(), oi = out.impl().get(), rows, d] {
                     double* g = detail::grad_sink(ai);
                     if (!g) return;
                     for (std::size_t r = 0; r < rows; ++r) {
                       const double* y = oi->data.data() + r * d;
                       const double* gy = oi->grad.data() + r * d;
                       double total = 0.0;
                       for (std::size_t j = 0; j < d; ++j) total += gy[j];
                       for (std::size_t j = 0; j < d; ++j) {
                         g[r * d + j] += gy[j] - std::exp(y[j]) * total;
                       }
                     }
                   });
  }
  return out;
}

constexpr double kLayerNormEps = 1e-5;

/// Normalizes over the last axis, then applies gain and bias of shape [D].
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match last axis " +
                         std::to_string(d));
  }
  const std::size_t rows = d ? x.numel() / d : 0;
  const bool track = detail::tracking({&x, &gain, &bias});
  Tensor out = detail::make_result(x.shape(), track);
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * rstd[r];
      out.data()[r * d + j] = xhat[r * d + j] * gain[j] + bias[j];
    }
  }
  if (track) {
    detail::record(
        "layer_norm", {x.impl(), gain.impl(), bias.impl()}, out,
        [xi = x.impl().get(), gi = gain.impl().get(), bi = bias.impl().get(),
         oi = out.impl().get(), xhat = std::move(xhat), rstd = std::move(rstd), rows, d] {
          double* gx = detail::grad_sink(xi);
          double* gg = detail::grad_sink(gi);
          double* gb = detail::grad_sink(bi);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gy = oi->grad.data() + r * d;
            const double* xh = xhat.data() + r * d;
            if (gg || gb) {
              for (std::size_t j = 0; j < d; ++j) {
                if (gg) gg[j] += gy[j] * xh[j];
                if (gb) gb[j] += gy[j];
              }
            }
            if (gx) {
              double sum_dxh = 0.0, sum_dxh_xh = 0.0;
              for (std::size_t j = 0; j < d; ++j) {
                const double dxh = gy[j] * gi->data[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[j];
              }
              for (std::size_t j = 0; j < d; ++j) {
                const double dxh = gy[j] * gi->data[j];
                gx[r * d + j] +=
                    rstd[r] * (dxh - sum_dxh * inv_d - xh[j] * sum_dxh_xh * inv_d);
              }
            }
          }
        });
  }
  return out;
}

// --------------------------------------------------------------------------
// Reductions and losses

inline Tensor reduce_sum(const Tensor& a) {
  const bool track = detail::tracking({&a});
  Tensor out = detail::make_result(Shape{}, track);
  double s = 0.0;
  for (double v : a.data()) s += v;
  out.data()[0] = s;
  if (track) {
    detail::record("reduce_sum", {a.impl()}, out, [ai = a.impl().get(), oi = out.impl().get()] {
      if (double* g = detail::grad_sink(ai)) {
        for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += oi->grad[0];
      }
    });
  }
  return out;
}

inline Tensor reduce_mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("reduce_mean: empty tensor");
  return scale(reduce_sum(a), 1.0 / static_cast<double>(a.numel()));
}

constexpr long kIgnoreIndex = -1;

/// Sum over rows of -log softmax(logits_row)[target]; rows whose target is
/// kIgnoreIndex contribute nothing. logits is [..., V] with one target per row.
inline Tensor cross_entropy(const Tensor& logits, std::span<const long> targets) {
  if (logits.rank() == 0) throw DimensionError("cross_entropy: scalar logits");
  const std::size_t v = logits.dim(-1);
  const std::size_t rows = v ? logits.numel() / v : 0;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  detail::require_finite("cross_entropy", logits);
  for (long t : targets) {
    if (t != kIgnoreIndex && (t < 0 || static_cast<std::size_t>(t) >= v)) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0," +
                       std::to_string(v) + ")");
    }
  }
  const bool track = detail::tracking({&logits});
  Tensor out = detail::make_result(Shape{}, track);
  std::vector<double> probs(logits.numel(), 0.0);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == kIgnoreIndex) continue;
    const double* x = logits.data().data() + r * v;
    double* p = probs.data() + r * v;
    const double mx = *std::max_element(x, x + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += (p[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < v; ++j) p[j] /= z;
    loss -= x[targets[r]] - mx - std::log(z);
  }
  out.data()[0] = loss;
  if (track) {
    detail::record("cross_entropy", {logits.impl()}, out,
                   [li = logits.impl().get(), oi = out.impl().get(), probs = std::move(probs),
                    tg = std::vector<long>(targets.begin(), targets.end()), rows, v] {
                     double* g = detail::grad_sink(li);
                     if (!g) return;
                     const double up = oi->grad[0];
                     for (std::size_t r = 0; r < rows; ++r) {
                       if (tg[r] == kIgnoreIndex) continue;
                       for (std::size_t j = 0; j < v; ++j) g[r * v + j] += up * probs[r * v + j];
                       g[r * v + static_cast<std::size_t>(tg[r])] -= up;
                     }
                   });
  }
  return out;
}

// --------------------------------------------------------------------------
// Uniform dispatch over op kinds (used by generic gradient checks).

enum class OpKind {
  kAdd,
  kMul,
  kMatmul,
  kTranspose,
  kReshape,
  kConcat,
  kSlice,
  kEmbedGather,
  kSoftmaxLastdim,
  kLogSoftmaxLastdim,
  kLayerNorm,
  kGelu,
  kMaskedFill,
  kReduceSum,
  kReduceMean,
  kCrossEntropy,
};

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::kAdd,           OpKind::kMul,          OpKind::kMatmul,
    OpKind::kTranspose,     OpKind::kReshape,      OpKind::kConcat,
    OpKind::kSlice,         OpKind::kEmbedGather,  OpKind::kSoftmaxLastdim,
    OpKind::kLogSoftmaxLastdim, OpKind::kLayerNorm, OpKind::kGelu,
    OpKind::kMaskedFill,    OpKind::kReduceSum,    OpKind::kReduceMean,
    OpKind::kCrossEntropy,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kEmbedGather: return "embed_gather";
    case OpKind::kSoftmaxLastdim: return "softmax_lastdim";
    case OpKind::kLogSoftmaxLastdim: return "log_softmax_lastdim";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kMaskedFill: return "masked_fill";
    case OpKind::kReduceSum: return "reduce_sum";
    case OpKind::kReduceMean: return "reduce_mean";
    case OpKind::kCrossEntropy: return "cross_entropy";
  }
  return "?";
}

struct OpAttrs {
  std::vector<std::size_t> perm;  // transpose
  Shape shape;                    // reshape target, embed_gather ids shape
  int axis = -1;                  // concat, slice
  std::size_t start = 0, end = 0; // slice
  std::vector<long> indices;      // embed_gather ids, cross_entropy targets
  std::vector<std::uint8_t> mask; // masked_fill
  double value = 0.0;             // masked_fill
  double eps = kLayerNormEps;     // layer_norm
};

inline Tensor forward(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw DimensionError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                           " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::kAdd: need(2); return add(in[0], in[1]);
    case OpKind::kMul: need(2); return mul(in[0], in[1]);
    case OpKind::kMatmul: need(2); return matmul(in[0], in[1]);
    case OpKind::kTranspose: need(1); return transpose(in[0], attrs.perm);
    case OpKind::kReshape: need(1); return reshape(in[0], attrs.shape);
    case OpKind::kConcat: return concat(in, attrs.axis);
    case OpKind::kSlice: need(1); return slice(in[0], attrs.axis, attrs.start, attrs.end);
    case OpKind::kEmbedGather: need(1); return embed_gather(in[0], attrs.indices, attrs.shape);
    case OpKind::kSoftmaxLastdim: need(1); return softmax_lastdim(in[0]);
    case OpKind::kLogSoftmaxLastdim: need(1); return log_softmax_lastdim(in[0]);
    case OpKind::kLayerNorm: need(3); return layer_norm(in[0], in[1], in[2], attrs.eps);
    case OpKind::kGelu: need(1); return gelu(in[0]);
    case OpKind::kMaskedFill: need(1); return masked_fill(in[0], attrs.mask, attrs.value);
    case OpKind::kReduceSum: need(1); return reduce_sum(in[0]);
    case OpKind::kReduceMean: need(1); return reduce_mean(in[0]);
    case OpKind::kCrossEntropy: need(1); return cross_entropy(in[0], attrs.indices);
  }
  throw ContractError("forward: unknown op kind");
}

}  // namespace lipmem
