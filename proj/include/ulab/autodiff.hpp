// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major Eigen matrices.
//
// A Tape records primitive operations in execution order. Every value on the
// tape is a 2-D matrix; scalars are 1x1. Gradients accumulate on fan-out and
// leaf gradients survive across backward() calls until zero_grad().

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace ulab {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Tape;

/// Flushes subnormal floats to zero on this thread while alive. Softmax
/// tails of a confident model underflow into subnormals, and arithmetic on
/// them runs an order of magnitude slower on x86.
class FlushDenormals {
 public:
#if defined(__SSE2__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }
  ~FlushDenormals() { _mm_setcsr(saved_); }
#else
  FlushDenormals() = default;
#endif
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

#if defined(__SSE2__)
 private:
  unsigned saved_;
#endif
};

/// Handle to a value recorded on a Tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double item() const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of a node; a zero matrix of the right shape when untouched.
  const Matrix& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Propagates `seed` (same shape as `output`) back to every node.
  /// Interior gradients are reset first; leaf gradients accumulate.
  void backward(Var output, const Matrix& seed);
  /// Seeds a 1x1 output with 1.
  void backward(Var scalar_output);

  void zero_grad();
  std::size_t size() const { return nodes_.size(); }

  // Used by the primitive implementations.
  using Pullback = std::function<void(Tape&, int self)>;
  Var record(Matrix value, std::vector<int> inputs, Pullback pullback);
  Matrix& grad_ref(int id);
  const Matrix& value_at(int id) const { return nodes_[id].value; }
  const Matrix& grad_at(int id) const { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool is_leaf = false;
    bool has_grad = false;
    std::vector<int> inputs;
    Pullback pullback;
  };
  std::vector<Node> nodes_;
  mutable Matrix zero_cache_;
};

// ---------------------------------------------------------------------------
// Primitives. All shape checks throw ShapeError naming the primitive.

Var matmul(Var a, Var b);            // a * b
Var matmul_bt(Var a, Var b);         // a * b^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);               // elementwise
Var add_row(Var a, Var row);         // row-wise bias: a + 1 * row
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var exp(Var a);
Var log(Var a);
Var gelu(Var a);                     // tanh approximation
Var log_sigmoid(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var gather_rows(Var table, std::span<const int> ids);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var sum(Var a);                      // -> 1x1
Var mean(Var a);                     // -> 1x1
Var sum_rows(Var a);                 // N x C -> N x 1
Var block(Var a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols);
/// Same elements in row-major order, new shape.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// out(i) = a(i, ids[i]); N x C -> N x 1.
Var pick(Var a, std::span<const int> ids);
/// Mean of an N x 1 column over rows with mask[i] != 0.
Var masked_mean(Var column, std::span<const double> mask);
/// Mean next-token cross-entropy of row-wise logits over masked rows.
/// The backward is the closed form (softmax - onehot) * mask / count.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> mask);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return scale(a, -1.0); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Finite-difference oracle.

/// Builds a scalar loss on `tape` from leaves holding `params`.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct FdCheckOptions {
  double step = 1e-5;
  /// Accuracy order of the central stencil: 2 (two points) or 4 (four points).
  /// Order 4 at a larger step resolves coordinates whose gradient is far
  /// below the loss scale, where two-point differences drown in roundoff.
  int order = 2;
  /// Checks at most this many coordinates (deterministically strided); 0 = all.
  std::size_t max_coords = 0;
};

struct FdCheckResult {
  double max_relative_error = 0.0;
  std::size_t coords_checked = 0;
  /// Worst coordinate as (param index, flat index).
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

/// Compares autodiff gradients to central differences. Per coordinate the
/// error is |analytic - fd| / (|fd| + 1e-12); the maximum is returned.
/// Throws std::domain_error on a non-finite loss.
FdCheckResult finite_difference_check(const LossBuilder& loss, std::span<const Matrix> params,
                                      FdCheckOptions options = {});

}  // namespace ulab
