#pragma once

// Dense tensors and a tape-based reverse-mode autodiff.
//
// Tensor is a value type: a rank-2 row-major array (scalars are 1x1, vectors
// 1xn) with an optional gradient buffer. Computation is recorded on a Tape as
// a sequence of nodes addressed by Var handles; backward() walks the tape in
// reverse, deposits leaf gradients into their sinks and frees the tape.

#include "lasad/common.hpp"

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lasad {

using Shape = std::array<Index, 2>;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Index rows, Index cols, bool requires_grad = false);
  explicit Tensor(Matrix data, bool requires_grad = false);

  Shape shape() const { return {data_.rows(), data_.cols()}; }
  Index rows() const { return data_.rows(); }
  Index cols() const { return data_.cols(); }
  Index size() const { return data_.size(); }

  Matrix& data() { return data_; }
  const Matrix& data() const { return data_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return grad_.has_value(); }
  const Matrix& grad() const;
  /// Gradient buffer, allocated as zeros on first access.
  Matrix& grad_buffer();
  void zero_grad();
  void clear_grad() { grad_.reset(); }

 private:
  Matrix data_;
  std::optional<Matrix> grad_;
  bool requires_grad_ = false;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const;
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool tracked() const;
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Called with the gradient of the node's output; routes contributions to
  /// inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf bound to a tensor. Tracked iff tensor.requires_grad(); backward()
  /// adds into tensor.grad_buffer(). The tensor must outlive the tape.
  Var leaf(Tensor& tensor);
  /// Leaf reading `value` in place with gradients added into `grad_sink`
  /// (nullptr for an untracked leaf). Used for sharded gradient accumulation.
  Var leaf(const Matrix& value, Matrix* grad_sink);
  Var constant(Matrix value);

  /// Records an op output. The node is tracked iff any input is tracked.
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward, const char* op);

  const Matrix& value(std::size_t id) const;
  bool tracked(std::size_t id) const { return nodes_[id].tracked; }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }

  /// Adds `contribution` into the gradient of node `id` (no-op if untracked).
  void accumulate(std::size_t id, const Matrix& contribution);
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& contribution) {
    if (!nodes_[id].tracked) return;
    grad_ref(id) += contribution;
  }
  /// Mutable gradient buffer of node `id`; zero-initialized on first use.
  Matrix& grad_ref(std::size_t id);

  void backward(Var loss);
  void clear();

  std::size_t size() const { return nodes_.size(); }
  /// Nodes whose backward rule ran during the most recent backward().
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    bool has_grad = false;
    bool tracked = false;
    Matrix* sink = nullptr;
    BackwardFn backward;
    const char* op = "";
  };

  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

/// backward() on the tape that owns `loss`.
void backward(Var loss);

// ---------------------------------------------------------------------------
// Primitive ops. Every op checks shapes, checks that its output is finite and
// registers a gradient rule.

Var matmul(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var add(Var a, double s);
Var sub(Var a, Var b);
/// s - a
Var rsub(double s, Var a);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var neg(Var a);
Var sigmoid(Var a);
Var silu(Var a);
Var exp(Var a);
Var log(Var a);
Var elu_plus_one(Var a);
/// Elementwise clamp; zero gradient where clamped.
Var clamp(Var a, double lo, double hi);
/// Adds the row vector `bias` (1xn) to every row of `a`.
Var add_row(Var a, Var bias);

enum class Unary { neg, sigmoid, silu, exp, log, elu_plus_one };
enum class Binary { add, sub, mul };
Var elementwise(Unary op, Var a);
Var elementwise(Binary op, Var a, Var b);

Var softmax_rows(Var a, bool causal = false);
/// x * gain / sqrt(mean(x^2) + eps) along each row; gain is 1xd.
Var rms_norm(Var a, Var gain, double eps);

Var sum(Var a);
Var mean(Var a);

Var slice_rows(Var a, Index begin, Index count);
Var slice_cols(Var a, Index begin, Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Rows of `table` selected by `ids` (embedding lookup).
Var gather_rows(Var table, std::span<const int> ids);
/// Mean cross-entropy of softmax(logits) against integer targets.
Var cross_entropy(Var logits, std::span<const int> targets);

/// Rotary position encoding applied per head. Rows are grouped into sequences
/// of `seq_len`; the position of a row is its index within its sequence.
Var rope(Var a, Index heads, Index seq_len, double base = 10000.0);

// Plain (untaped) versions used by the inference path.
Matrix rms_norm_rows(const Matrix& x, const RowVector& gain, double eps);
void rope_row_inplace(Eigen::Ref<RowVector> row, Index heads, Index position, double base);

/// Throws NumericError if `m` holds NaN or Inf.
void check_finite(const Matrix& m, const char* op);

}  // namespace lasad
