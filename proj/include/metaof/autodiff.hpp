#pragma once

// Tape-based reverse-mode automatic differentiation over dense real matrices.
//
// Every operation appends an immutable record to a Tape. Backward passes are
// themselves expressed as tape operations, so with create_graph=true the
// resulting gradients are ordinary differentiable Vars and can be
// differentiated again (MAML's second-order meta-gradient).

#include <cstdint>
#include <deque>
#include <span>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

namespace metaof::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  MatMul,
  Transpose,
  BroadcastRows,  // 1 x m -> n x m
  SumRows,        // n x m -> 1 x m
  BroadcastCols,  // n x 1 -> n x m
  SumCols,        // n x m -> n x 1
  Relu,
  Exp,
  LogSoftmax,     // row-wise
  Sum,            // -> 1 x 1
  Fill,           // 1 x 1 -> r x c
};

class Tape;

/// Handle to a record on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that gradients can be taken with respect to.
  Var variable(Matrix value);
  /// Leaf with no gradient.
  Var constant(Matrix value);

  /// d(output)/d(wrt_k) as Vars on this tape. With create_graph the returned
  /// Vars are differentiable and the nesting depth increases by one.
  /// `output` must be 1x1. A wrt Var that `output` does not depend on (or
  /// that lives on another tape) gets a zero gradient.
  std::vector<Var> gradients(Var output, std::span<const Var> wrt, bool create_graph = false);

  /// Numeric convenience wrapper around gradients(create_graph=false).
  std::vector<Matrix> backward(Var output, std::span<const Var> wrt);

  /// Number of completed create_graph backward passes on this tape.
  [[nodiscard]] int nesting_depth() const { return depth_; }
  [[nodiscard]] std::size_t size() const { return records_.size(); }
  [[nodiscard]] bool was_differentiated(const Var& v) const {
    return differentiated_.contains(v.id());
  }

  // Used by the operation functions below.
  Var record(Op op, Matrix value, Var lhs, Var rhs = {}, double scalar = 0.0);

 private:
  friend class Var;
  struct Record {
    Matrix value;
    Op op = Op::Leaf;
    std::int64_t lhs = -1;
    std::int64_t rhs = -1;
    double scalar = 0.0;
    bool requires_grad = false;
  };

  void accumulate(std::vector<Var>& adjoint, std::vector<bool>& has, std::int64_t id, Var contribution);
  void propagate(std::size_t id, Var g, std::vector<Var>& adjoint, std::vector<bool>& has);

  // std::deque keeps references to existing records stable across appends.
  std::deque<Record> records_;
  std::unordered_set<std::size_t> differentiated_;
  int depth_ = 0;
  bool recording_ = true;
};

// Operations. All operands must live on the same tape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var neg(Var a);
Var scale(Var a, double c);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var broadcast_rows(Var row, Index n);
Var sum_rows(Var a);
Var broadcast_cols(Var col, Index m);
Var sum_cols(Var a);
Var relu(Var a);
Var exp(Var a);
Var log_softmax(Var a);
Var sum(Var a);
Var fill(Var s, Index rows, Index cols);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }

/// Convenience: reverse-mode gradient of a scalar Var.
inline std::vector<Matrix> backward(Var output, std::span<const Var> wrt) {
  return output.tape()->backward(output, wrt);
}

/// Gradient of `output` w.r.t. `outer_wrt`, where `output` was built from the
/// differentiable result of an earlier gradients(..., create_graph=true) call
/// taken with respect to `inner_wrt`. Requires nesting depth >= 1.
std::vector<Matrix> grad_of_grad(Var output, std::span<const Var> inner_wrt,
                                 std::span<const Var> outer_wrt);

}  // namespace metaof::ad
