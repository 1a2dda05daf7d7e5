#include "metaof/autodiff.hpp"

#include <cmath>
#include <string>

#include "metaof/error.hpp"

namespace metaof::ad {

const Matrix& Var::value() const {
  require(tape_ != nullptr, "Var::value on an empty handle");
  return tape_->records_[id_].value;
}

bool Var::requires_grad() const {
  return tape_ != nullptr && tape_->records_[id_].requires_grad;
}

Var Tape::variable(Matrix value) {
  records_.push_back(Record{std::move(value), Op::Leaf, -1, -1, 0.0, true});
  return Var(this, records_.size() - 1);
}

Var Tape::constant(Matrix value) {
  records_.push_back(Record{std::move(value), Op::Leaf, -1, -1, 0.0, false});
  return Var(this, records_.size() - 1);
}

Var Tape::record(Op op, Matrix value, Var lhs, Var rhs, double scalar) {
  require(lhs.tape() == this && (!rhs.valid() || rhs.tape() == this),
          "operands live on different tapes");
  const bool grad = recording_ && (lhs.requires_grad() || rhs.requires_grad());
  Record r;
  r.value = std::move(value);
  r.scalar = scalar;
  r.requires_grad = grad;
  if (grad) {
    r.op = op;
    r.lhs = static_cast<std::int64_t>(lhs.id());
    r.rhs = rhs.valid() ? static_cast<std::int64_t>(rhs.id()) : -1;
  }
  records_.push_back(std::move(r));
  return Var(this, records_.size() - 1);
}

void Tape::accumulate(std::vector<Var>& adjoint, std::vector<bool>& has, std::int64_t id,
                      Var contribution) {
  if (id < 0 || !records_[static_cast<std::size_t>(id)].requires_grad) return;
  const auto k = static_cast<std::size_t>(id);
  if (has[k]) {
    adjoint[k] = add(adjoint[k], contribution);
  } else {
    adjoint[k] = contribution;
    has[k] = true;
  }
}

void Tape::propagate(std::size_t id, Var g, std::vector<Var>& adjoint, std::vector<bool>& has) {
  const Record& r = records_[id];
  const Var y(this, id);
  const Var a = r.lhs >= 0 ? Var(this, static_cast<std::size_t>(r.lhs)) : Var{};
  const Var b = r.rhs >= 0 ? Var(this, static_cast<std::size_t>(r.rhs)) : Var{};
  switch (r.op) {
    case Op::Leaf:
      break;
    case Op::Add:
      accumulate(adjoint, has, r.lhs, g);
      accumulate(adjoint, has, r.rhs, g);
      break;
    case Op::Sub:
      accumulate(adjoint, has, r.lhs, g);
      if (b.requires_grad()) accumulate(adjoint, has, r.rhs, neg(g));
      break;
    case Op::Mul:
      if (a.requires_grad()) accumulate(adjoint, has, r.lhs, mul(g, b));
      if (b.requires_grad()) accumulate(adjoint, has, r.rhs, mul(g, a));
      break;
    case Op::Neg:
      accumulate(adjoint, has, r.lhs, neg(g));
      break;
    case Op::Scale:
      accumulate(adjoint, has, r.lhs, scale(g, r.scalar));
      break;
    case Op::MatMul:
      if (a.requires_grad()) accumulate(adjoint, has, r.lhs, matmul(g, transpose(b)));
      if (b.requires_grad()) accumulate(adjoint, has, r.rhs, matmul(transpose(a), g));
      break;
    case Op::Transpose:
      accumulate(adjoint, has, r.lhs, transpose(g));
      break;
    case Op::BroadcastRows:
      accumulate(adjoint, has, r.lhs, sum_rows(g));
      break;
    case Op::SumRows:
      accumulate(adjoint, has, r.lhs, broadcast_rows(g, a.rows()));
      break;
    case Op::BroadcastCols:
      accumulate(adjoint, has, r.lhs, sum_cols(g));
      break;
    case Op::SumCols:
      accumulate(adjoint, has, r.lhs, broadcast_cols(g, a.cols()));
      break;
    case Op::Relu: {
      // The mask is piecewise constant, so it carries no gradient of its own.
      Matrix mask = (a.value().array() > 0.0).cast<double>().matrix();
      accumulate(adjoint, has, r.lhs, mul(g, constant(std::move(mask))));
      break;
    }
    case Op::Exp:
      accumulate(adjoint, has, r.lhs, mul(g, y));
      break;
    case Op::LogSoftmax:
      accumulate(adjoint, has, r.lhs, sub(g, mul(exp(y), broadcast_cols(sum_cols(g), y.cols()))));
      break;
    case Op::Sum:
      accumulate(adjoint, has, r.lhs, fill(g, a.rows(), a.cols()));
      break;
    case Op::Fill:
      accumulate(adjoint, has, r.lhs, sum(g));
      break;
  }
}

std::vector<Var> Tape::gradients(Var output, std::span<const Var> wrt, bool create_graph) {
  require(output.tape() == this, "gradients: output belongs to another tape");
  require(output.rows() == 1 && output.cols() == 1, "gradients: output must be a scalar (1x1)");

  const std::size_t end = output.id() + 1;
  std::vector<Var> adjoint(end);
  std::vector<bool> has(end, false);

  const bool saved = recording_;
  recording_ = create_graph;
  if (output.requires_grad()) {
    adjoint[output.id()] = constant(Matrix::Ones(1, 1));
    has[output.id()] = true;
    for (std::size_t i = end; i-- > 0;) {
      if (!has[i] || records_[i].op == Op::Leaf) continue;
      propagate(i, adjoint[i], adjoint, has);
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    const bool reached = w.tape() == this && w.id() < end && has[w.id()];
    if (reached) {
      result.push_back(adjoint[w.id()]);
    } else {
      result.push_back(constant(Matrix::Zero(w.rows(), w.cols())));
    }
  }
  recording_ = saved;

  if (create_graph) {
    ++depth_;
    for (const Var& w : wrt) {
      if (w.tape() == this) differentiated_.insert(w.id());
    }
  }
  return result;
}

std::vector<Matrix> Tape::backward(Var output, std::span<const Var> wrt) {
  auto grads = gradients(output, wrt, false);
  std::vector<Matrix> out;
  out.reserve(grads.size());
  for (const Var& g : grads) out.push_back(g.value());
  return out;
}

namespace {

Tape& tape_of(Var a, Var b = {}) {
  require(a.valid(), "operation on an empty Var");
  require(!b.valid() || a.tape() == b.tape(), "operands live on different tapes");
  return *a.tape();
}

void same_shape(Var a, Var b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch");
}

}  // namespace

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  return tape_of(a, b).record(Op::Add, a.value() + b.value(), a, b);
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  return tape_of(a, b).record(Op::Sub, a.value() - b.value(), a, b);
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  return tape_of(a, b).record(Op::Mul, a.value().cwiseProduct(b.value()), a, b);
}

Var neg(Var a) { return tape_of(a).record(Op::Neg, -a.value(), a); }

Var scale(Var a, double c) { return tape_of(a).record(Op::Scale, c * a.value(), a, {}, c); }

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix v = a.value() * b.value();
  return tape_of(a, b).record(Op::MatMul, std::move(v), a, b);
}

Var transpose(Var a) {
  Matrix v = a.value().transpose();
  return tape_of(a).record(Op::Transpose, std::move(v), a);
}

Var broadcast_rows(Var row, Index n) {
  require(row.rows() == 1, "broadcast_rows: expects a single row");
  Matrix v = row.value().replicate(n, 1);
  return tape_of(row).record(Op::BroadcastRows, std::move(v), row);
}

Var sum_rows(Var a) {
  Matrix v = a.value().colwise().sum();
  return tape_of(a).record(Op::SumRows, std::move(v), a);
}

Var broadcast_cols(Var col, Index m) {
  require(col.cols() == 1, "broadcast_cols: expects a single column");
  Matrix v = col.value().replicate(1, m);
  return tape_of(col).record(Op::BroadcastCols, std::move(v), col);
}

Var sum_cols(Var a) {
  Matrix v = a.value().rowwise().sum();
  return tape_of(a).record(Op::SumCols, std::move(v), a);
}

Var relu(Var a) {
  Matrix v = a.value().cwiseMax(0.0);
  return tape_of(a).record(Op::Relu, std::move(v), a);
}

Var exp(Var a) {
  Matrix v = a.value().array().exp().matrix();
  return tape_of(a).record(Op::Exp, std::move(v), a);
}

Var log_softmax(Var a) {
  const Matrix& z = a.value();
  Matrix v(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    v.row(i) = z.row(i).array() - lse;
  }
  return tape_of(a).record(Op::LogSoftmax, std::move(v), a);
}

Var sum(Var a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return tape_of(a).record(Op::Sum, std::move(v), a);
}

Var fill(Var s, Index rows, Index cols) {
  require(s.rows() == 1 && s.cols() == 1, "fill: expects a scalar");
  Matrix v = Matrix::Constant(rows, cols, s.value()(0, 0));
  return tape_of(s).record(Op::Fill, std::move(v), s);
}

std::vector<Matrix> grad_of_grad(Var output, std::span<const Var> inner_wrt,
                                 std::span<const Var> outer_wrt) {
  Tape& tape = tape_of(output);
  require(tape.nesting_depth() >= 1,
          "grad_of_grad: tape has no differentiable gradient (nesting depth 0)");
  for (const Var& v : inner_wrt) {
    require(v.tape() == &tape && tape.was_differentiated(v),
            "grad_of_grad: inner variable was not differentiated with create_graph");
  }
  return tape.backward(output, outer_wrt);
}

}  // namespace metaof::ad
