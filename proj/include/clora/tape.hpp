// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "clora/matrix.hpp"

namespace clora {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the
/// owning Tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode differentiation record.
///
/// Every operation appends a node holding its forward value and a closure
/// that scatters the node's adjoint into its inputs. Nodes whose inputs do
/// not depend on any parameter carry no closure and are skipped during the
/// reverse sweep. A Tape is single-use: build it, call backward() once,
/// read the gradients, discard it. It owns the FlopMeter that every
/// recorded operation charges.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Matrix value);
  /// Leaf whose gradient is collected by backward().
  Var parameter(Matrix value);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  /// Adjoint of `v` after backward(); a zero matrix if nothing flowed into it.
  Matrix grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Reverse sweep from a 1x1 node. Throws ContractError if `loss` is not
  /// scalar or if backward() already ran on this Tape.
  void backward(Var loss);

  /// backward(f) followed by grad() for each of `params`, in order.
  std::vector<Matrix> gradients(Var f, std::span<const Var> params);

  FlopMeter& meter() { return meter_; }
  const FlopMeter& meter() const { return meter_; }
  std::size_t size() const { return nodes_.size(); }

  /// Records an op result. `backward` may be empty; it is dropped anyway
  /// when no input requires a gradient.
  Var record(Matrix value, std::span<const Var> inputs, Backward backward);
  /// Adds `contribution` to the adjoint of node `id` if it tracks gradients.
  void accumulate(std::size_t id, const Matrix& contribution);
  const Matrix& adjoint(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push_leaf(Matrix value, bool requires_grad);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  FlopMeter meter_;
};

// Differentiable operations. All operands must live on the same Tape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var transpose(Var a);
/// Adds a 1 x c row to every row of an r x c matrix.
Var add_row(Var a, Var row);
/// 1x1 sum of all entries.
Var sum(Var a);
/// 1x1 sum of squared entries.
Var frobenius_sq(Var a);
/// Sum of a non-empty list of same-shape terms.
Var add_all(std::span<const Var> terms);

Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);

Var softmax_rows(Var a);
/// Per-row normalization to zero mean / unit variance, then `* gamma + beta`
/// with gamma and beta of shape 1 x cols.
Var layer_norm_rows(Var a, Var gamma, Var beta, double eps);
/// Exact GELU, x * Phi(x).
Var gelu(Var a);

/// Row-wise cosine similarity of two t x d matrices, returned as t x 1.
/// A row where either side has zero norm yields 0 with zero gradient.
Var cosine_rows(Var a, Var b);

/// Mean softmax cross-entropy of `logits` (b x k) against integer labels.
/// Throws IndexError on a label outside [0, k).
Var cross_entropy(Var logits, std::span<const std::size_t> labels);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

}  // namespace clora
