#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "metaof/autodiff.hpp"
#include "metaof/error.hpp"

using namespace metaof;
using namespace metaof::ad;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(gen);
  return m;
}

using Builder = std::function<Var(Tape&, std::span<const Var>)>;

// Central differences of a scalar function of several matrices.
std::vector<Matrix> numeric_grad(const Builder& f, const std::vector<Matrix>& inputs, double h = 1e-6) {
  std::vector<Matrix> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Matrix g(inputs[k].rows(), inputs[k].cols());
    for (Index i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        auto shifted = inputs;
        shifted[k].data()[i] += delta;
        Tape t;
        std::vector<Var> vars;
        for (auto& m : shifted) vars.push_back(t.variable(m));
        return f(t, vars).value()(0, 0);
      };
      g.data()[i] = (eval(h) - eval(-h)) / (2 * h);
    }
    out.push_back(g);
  }
  return out;
}

std::vector<Matrix> tape_grad(const Builder& f, const std::vector<Matrix>& inputs) {
  Tape t;
  std::vector<Var> vars;
  for (auto& m : inputs) vars.push_back(t.variable(m));
  return t.backward(f(t, vars), vars);
}

void check_against_fd(const Builder& f, const std::vector<Matrix>& inputs, double tol = 1e-6) {
  const auto a = tape_grad(f, inputs);
  const auto n = numeric_grad(f, inputs);
  REQUIRE(a.size() == n.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    REQUIRE(a[k].rows() == inputs[k].rows());
    REQUIRE(a[k].cols() == inputs[k].cols());
    for (Index i = 0; i < a[k].size(); ++i) {
      const double scale = std::max(1.0, std::abs(n[k].data()[i]));
      CHECK(std::abs(a[k].data()[i] - n[k].data()[i]) / scale < tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise and structural ops match finite differences") {
  std::mt19937_64 gen(11);
  const Matrix a = random_matrix(3, 4, gen);
  const Matrix b = random_matrix(3, 4, gen);
  const Matrix w = random_matrix(4, 2, gen);

  check_against_fd([](Tape&, std::span<const Var> v) { return sum(v[0] + v[1]); }, {a, b});
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(mul(v[0] - v[1], v[0])); }, {a, b});
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(mul(-v[0], 2.5 * v[1])); }, {a, b});
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(mul(matmul(v[0], v[1]), matmul(v[0], v[1]))); },
                   {a, w});
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(mul(transpose(v[0]), transpose(v[0]))); }, {a});
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(exp(scale(v[0], 0.3))); }, {a});
}

TEST_CASE("broadcast and reductions match finite differences") {
  std::mt19937_64 gen(12);
  const Matrix row = random_matrix(1, 4, gen);
  const Matrix col = random_matrix(3, 1, gen);
  const Matrix a = random_matrix(3, 4, gen);
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(mul(broadcast_rows(v[0], 3), v[1])); },
                   {row, a});
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(mul(broadcast_cols(v[0], 4), v[1])); },
                   {col, a});
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(mul(sum_rows(v[0]), sum_rows(v[0]))); }, {a});
  check_against_fd([](Tape&, std::span<const Var> v) { return sum(mul(sum_cols(v[0]), sum_cols(v[0]))); }, {a});
  check_against_fd(
      [](Tape&, std::span<const Var> v) {
        const Var s = sum(v[0]);
        return sum(mul(fill(s, 2, 3), fill(s, 2, 3)));
      },
      {a});
}

TEST_CASE("log_softmax and relu match finite differences") {
  std::mt19937_64 gen(13);
  Matrix a = random_matrix(5, 3, gen);
  // Keep relu inputs away from the kink.
  for (Index i = 0; i < a.size(); ++i) {
    if (std::abs(a.data()[i]) < 0.05) a.data()[i] = 0.5;
  }
  const Matrix mask = random_matrix(5, 3, gen);
  check_against_fd([&](Tape& t, std::span<const Var> v) { return sum(mul(log_softmax(v[0]), t.constant(mask))); },
                   {a});
  check_against_fd([&](Tape& t, std::span<const Var> v) { return sum(mul(relu(v[0]), t.constant(mask))); }, {a});
}

TEST_CASE("log_softmax rows are normalized and stable for large logits") {
  Tape t;
  Matrix big(2, 3);
  big << 1000.0, 1001.0, 999.0, -1000.0, 0.0, 1000.0;
  const Var y = log_softmax(t.constant(big));
  for (Index r = 0; r < 2; ++r) {
    CHECK(y.value().row(r).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y.value().row(r).allFinite());
  }
}

TEST_CASE("second-order gradient of a cubic") {
  // f(x) = sum(x^3); grad = 3x^2; d/dx sum(grad * u) = 6 x u.
  std::mt19937_64 gen(14);
  const Matrix x0 = random_matrix(2, 3, gen);
  const Matrix u = random_matrix(2, 3, gen);
  Tape t;
  const Var x = t.variable(x0);
  const Var f = sum(mul(mul(x, x), x));
  const auto g = t.gradients(f, std::span<const Var>(&x, 1), true);
  CHECK(t.nesting_depth() == 1);
  CHECK((g[0].value() - 3.0 * x0.cwiseProduct(x0)).cwiseAbs().maxCoeff() < 1e-12);
  const Var inner = sum(mul(g[0], t.constant(u)));
  const auto h = t.backward(inner, std::span<const Var>(&x, 1));
  CHECK((h[0] - 6.0 * x0.cwiseProduct(u)).cwiseAbs().maxCoeff() < 1e-12);
  const auto gg = grad_of_grad(inner, std::span<const Var>(&x, 1), std::span<const Var>(&x, 1));
  CHECK((gg[0] - h[0]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradients without create_graph are constants") {
  Tape t;
  const Var x = t.variable(Matrix::Constant(1, 1, 2.0));
  const Var f = sum(mul(mul(x, x), x));
  const auto g = t.gradients(f, std::span<const Var>(&x, 1), false);
  CHECK(t.nesting_depth() == 0);
  CHECK_FALSE(g[0].requires_grad());
  const auto h = t.backward(sum(g[0]), std::span<const Var>(&x, 1));
  CHECK(h[0](0, 0) == 0.0);
}

TEST_CASE("disconnected variables get zero gradients") {
  Tape t;
  const Var x = t.variable(Matrix::Ones(2, 2));
  const Var y = t.variable(Matrix::Ones(3, 1));
  const Var f = sum(x);
  const std::vector<Var> wrt = {x, y};
  const auto g = t.backward(f, wrt);
  CHECK(g[0] == Matrix::Ones(2, 2));
  CHECK(g[1] == Matrix::Zero(3, 1));
  Tape other;
  const Var z = other.variable(Matrix::Ones(1, 1));
  const auto gz = t.backward(f, std::span<const Var>(&z, 1));
  CHECK(gz[0](0, 0) == 0.0);
}

TEST_CASE("shared subexpressions accumulate") {
  Tape t;
  const Var x = t.variable(Matrix::Constant(1, 1, 3.0));
  const Var y = x + x;
  const auto g = t.backward(sum(mul(y, x)), std::span<const Var>(&x, 1));  // 2x^2
  CHECK(g[0](0, 0) == doctest::Approx(12.0));
}

TEST_CASE("contract violations throw") {
  Tape t;
  const Var a = t.variable(Matrix::Ones(2, 3));
  const Var b = t.variable(Matrix::Ones(3, 2));
  CHECK_THROWS_AS(add(a, b), ContractError);
  CHECK_THROWS_AS(mul(a, b), ContractError);
  CHECK_THROWS_AS(matmul(a, a), ContractError);
  CHECK_THROWS_AS(t.backward(a, std::span<const Var>(&a, 1)), ContractError);
  CHECK_THROWS_AS(broadcast_rows(a, 4), ContractError);
  CHECK_THROWS_AS(add(Var{}, a), ContractError);
  Tape other;
  const Var c = other.variable(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(add(a, c), ContractError);
  const Var s = sum(a);
  CHECK_THROWS_AS(grad_of_grad(s, std::span<const Var>(&a, 1), std::span<const Var>(&a, 1)), ContractError);
}

TEST_CASE("linearity of the gradient operator") {
  std::mt19937_64 gen(15);
  const Matrix x0 = random_matrix(3, 3, gen);
  const double alpha = 0.7;
  const double beta = -1.3;
  Tape t;
  const Var x = t.variable(x0);
  const Var f = sum(exp(scale(x, 0.2)));
  const Var g = sum(mul(mul(x, x), x));
  const auto gf = t.backward(f, std::span<const Var>(&x, 1));
  const auto gg = t.backward(g, std::span<const Var>(&x, 1));
  const auto gc = t.backward(alpha * f + beta * g, std::span<const Var>(&x, 1));
  CHECK((gc[0] - (alpha * gf[0] + beta * gg[0])).cwiseAbs().maxCoeff() < 1e-12);
}
