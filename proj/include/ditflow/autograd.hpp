#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape owns every value produced during one forward computation, in
// creation order, so node ids are already a topological order. Operations
// whose inputs do not require gradients are stored as plain values without a
// backward rule.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "ditflow/tensor.hpp"

namespace ditflow::ag {

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  transpose,
  add,
  sub,
  scale,
  mul,
  softmax,
  layer_norm,
  gelu,
  reshape,
  permute,
  gather_rows,
  mean_axis,
  sum,
  sum_squares,
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) noexcept : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& dims() const { return value().dims(); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Record an input. Rejects non-finite values.
  Var<T> leaf(Tensor<T> value, bool requires_grad);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Accumulate d(out)/d(node) into every node that requires a gradient.
  /// Grads from earlier backward passes are discarded first. Leaves that
  /// require a gradient but are unreachable from `out` receive zeros.
  void backward(Var<T> out);

  /// Gradient of a node after backward(); zeros if never reached.
  Tensor<T> grad(Var<T> v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).value.requires_grad(); }

  // Used by operation implementations.
  Var<T> record(OpKind kind, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward);
  /// Gradient accumulator for a node, allocated as zeros on first use.
  std::vector<T>& grad_buffer(std::size_t id);
  std::span<const T> output_grad(std::size_t id) const { return nodes_.at(id).value.grad(); }

 private:
  struct Node {
    OpKind kind;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

/// [m,k]x[k,n], [b,m,k]x[b,k,n] (batched) or [b,m,k]x[k,n] (shared rhs).
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

/// Swap the last two axes (rank 2 or 3).
template <typename T>
Var<T> transpose(Var<T> a);

/// Elementwise a + b. `b` may broadcast when its dims are a suffix of a's.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> sub(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> a, T factor);

/// Elementwise product, same broadcasting rule as add.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

/// softmax(temperature * a) over the last axis.
template <typename T>
Var<T> softmax(Var<T> a, T temperature = T(1));

/// Normalize over the last axis, then gamma * x + beta (gamma, beta: [D]).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
Var<T> gelu(Var<T> a);

template <typename T>
Var<T> reshape(Var<T> a, Shape dims);

/// out.dims[i] = a.dims[axes[i]].
template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> axes);

/// Rows of `a` along axis 0.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> rows);

/// Mean over one axis; the axis is removed.
template <typename T>
Var<T> mean_axis(Var<T> a, std::size_t axis);

template <typename T>
Var<T> sum(Var<T> a);

template <typename T>
Var<T> sum_squares(Var<T> a);

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return add(a, b);
}
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return sub(a, b);
}

}  // namespace ditflow::ag
