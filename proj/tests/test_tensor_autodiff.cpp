#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <string>

#include "tp2m/autodiff.hpp"
#include "tp2m/error.hpp"

using namespace tp2m;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.values()) v = d(rng);
  return t;
}

// Gradchecks `op` applied to randomly filled parameters, contracted with fixed
// random weights.
double op_error(const std::vector<Tensor>& inputs, const std::function<Var(std::vector<Var>&)>& op,
                std::uint64_t seed = 1) {
  ad::ParameterSet params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.add("in" + std::to_string(i), inputs[i]);
  Tensor weights;
  {
    Tape tape;
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(tape.constant(p.value));
    const Var out = op(vars);
    std::mt19937_64 rng(seed);
    weights = random_tensor(out.rows(), out.cols(), rng);
    weights = weights.reshaped(out.shape());
  }
  auto f = [&](Tape& tape) {
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(tape.parameter(p));
    return ad::sum(ad::mul(op(vars), tape.constant(weights)));
  };
  return ad::gradcheck(f, params).max_rel_error;
}

}  // namespace

TEST_CASE("tensor data length equals product of shape") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 12);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ContractViolation);
  CHECK(ad::element_count({5, 0, 2}) == 0);
}

TEST_CASE("softmax of equal values is uniform") {
  Tape tape;
  for (std::size_t n : {1u, 3u, 7u}) {
    const Var s = ad::softmax_lastdim(tape.constant(Tensor::matrix(2, n, 4.25)));
    for (double v : s.value().values()) CHECK(v == doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-15));
  }
}

TEST_CASE("matmul with identity returns the operand") {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor(5, 4, rng);
  Tape tape;
  const Var out = ad::matmul(tape.constant(a), tape.constant(Tensor::identity(4)));
  CHECK(out.value() == a);
}

TEST_CASE("silu closed form") {
  Tape tape;
  Tensor x = Tensor::matrix(1, 2);
  x[0] = 0.0;
  x[1] = 1.0;
  const Var y = ad::silu(tape.constant(x));
  CHECK(y.value()[0] == 0.0);
  CHECK(y.value()[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));
  CHECK(y.value()[1] == doctest::Approx(0.731059).epsilon(1e-6));
}

TEST_CASE("backward: sum gives ones, elementwise product gives the other factor") {
  std::mt19937_64 rng(5);
  ad::ParameterSet params;
  auto& w = params.add("w", random_tensor(3, 4, rng));
  auto& a = params.add("a", random_tensor(3, 4, rng));
  auto& b = params.add("b", random_tensor(3, 4, rng));
  auto& unused = params.add("unused", random_tensor(2, 2, rng));
  {
    Tape tape;
    tape.backward(ad::sum(tape.parameter(w)));
  }
  for (double g : w.grad.values()) CHECK(g == 1.0);
  {
    Tape tape;
    tape.backward(ad::sum(ad::mul(tape.parameter(a), tape.parameter(b))));
  }
  CHECK(a.grad == b.value);
  CHECK(b.grad == a.value);
  REQUIRE(unused.grad.same_shape(unused.value));
  for (double g : unused.grad.values()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss and a second call") {
  Tape tape;
  const Var x = tape.variable(Tensor::matrix(2, 2, 1.0));
  CHECK_THROWS_AS(tape.backward(x), ContractViolation);
  const Var s = ad::sum(x);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), ContractViolation);
}

TEST_CASE("shape mismatch names both shapes") {
  Tape tape;
  const Var a = tape.constant(Tensor::matrix(2, 3));
  const Var b = tape.constant(Tensor::matrix(4, 5));
  try {
    (void)ad::add(a, b);
    FAIL("expected a contract violation");
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    CHECK(msg.find(ad::shape_string({2, 3})) != std::string::npos);
    CHECK(msg.find(ad::shape_string({4, 5})) != std::string::npos);
  }
  CHECK_THROWS_AS((void)ad::matmul(a, a), ContractViolation);
}

TEST_CASE("gradcheck of a quadratic is exact up to roundoff") {
  std::mt19937_64 rng(7);
  ad::ParameterSet params;
  params.add("w", random_tensor(6, 1, rng));
  auto f = [&](Tape& tape) {
    const Var w = tape.parameter(params.at("w"));
    return ad::sum(ad::mul(w, w));
  };
  CHECK(ad::gradcheck(f, params).max_rel_error < 1e-8);
}

TEST_CASE("gradcheck rejects non-deterministic functions and bad steps") {
  ad::ParameterSet params;
  params.add("w", Tensor::matrix(2, 2, 0.5));
  int calls = 0;
  auto noisy = [&](Tape& tape) {
    ++calls;
    return ad::scale(ad::sum(tape.parameter(params.at("w"))), 1.0 + 1e-9 * calls);
  };
  CHECK_THROWS_AS(ad::gradcheck(noisy, params), ContractViolation);
  auto f = [&](Tape& tape) { return ad::sum(tape.parameter(params.at("w"))); };
  CHECK_THROWS_AS(ad::gradcheck(f, params, {1e-8}), ContractViolation);
  CHECK_THROWS_AS(ad::gradcheck(f, params, {1e-2}), ContractViolation);
  CHECK_NOTHROW(ad::gradcheck(f, params, {1e-3}));
}

TEST_CASE("every op passes randomized gradcheck below 1e-5") {
  std::mt19937_64 rng(11);
  const double tol = 1e-5;
  for (std::size_t n : {3u, 32u}) {
    CAPTURE(n);
    const Tensor a = random_tensor(n, n, rng), b = random_tensor(n, n, rng);
    const Tensor pos = random_tensor(n, n, rng, 0.5, 2.0);
    const Tensor row = random_tensor(1, n, rng);
    CHECK(op_error({a, b}, [](auto& v) { return ad::matmul(v[0], v[1]); }) < tol);
    CHECK(op_error({a, b}, [](auto& v) { return ad::add(v[0], v[1]); }) < tol);
    CHECK(op_error({a, b}, [](auto& v) { return ad::sub(v[0], v[1]); }) < tol);
    CHECK(op_error({a, b}, [](auto& v) { return ad::mul(v[0], v[1]); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::scale(v[0], -2.5); }) < tol);
    CHECK(op_error({a, b}, [](auto& v) { return ad::concat({v[0], v[1]}, 0); }) < tol);
    CHECK(op_error({a, b}, [](auto& v) { return ad::concat({v[0], v[1]}, 1); }) < tol);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < 2 * n; ++i) idx.push_back((i * 7 + 1) % n);
    CHECK(op_error({a}, [&](auto& v) { return ad::gather_rows(v[0], idx); }) < tol);
    std::vector<std::size_t> scatter_idx;
    for (std::size_t i = 0; i < n; ++i) scatter_idx.push_back((i * 5 + 2) % (n / 2 + 1));
    CHECK(op_error({a}, [&](auto& v) { return ad::scatter_add_rows(v[0], scatter_idx, n / 2 + 2); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::softmax_lastdim(v[0]); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::relu(v[0]); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::silu(v[0]); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::mean_rows(v[0]); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::sum(v[0]); }) < tol);
    CHECK(op_error({pos}, [](auto& v) { return ad::sqrt(v[0]); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::transpose(v[0]); }) < tol);
    CHECK(op_error({row}, [n](auto& v) { return ad::broadcast(v[0], n + 1); }) < tol);
    CHECK(op_error({a}, [n](auto& v) { return ad::reshape(v[0], {n * n, 1}); }) < tol);
    CHECK(op_error({pos}, [](auto& v) { return ad::reciprocal(v[0]); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::abs(v[0]); }) < tol);
    CHECK(op_error({a}, [](auto& v) { return ad::row_norm(v[0]); }) < tol);
    CHECK(op_error({a, row, row}, [](auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }) < tol);
  }
}

TEST_CASE("softmax rows sum to one within 1e-12") {
  std::mt19937_64 rng(13);
  Tape tape;
  for (double spread : {1.0, 30.0, 300.0}) {
    const Var s = ad::softmax_lastdim(tape.constant(random_tensor(16, 29, rng, -spread, spread)));
    for (std::size_t r = 0; r < 16; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 29; ++c) total += s.value().at(r, c);
      CHECK(std::fabs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("scatter_add_rows is the adjoint of gather_rows") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 5 + trial, m = 3 * n;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> idx(m);
    for (auto& i : idx) i = pick(rng);
    const Tensor x = random_tensor(n, 4, rng), y = random_tensor(m, 4, rng);
    Tape tape;
    const Tensor gx = ad::gather_rows(tape.constant(x), idx).value();
    const Tensor sy = ad::scatter_add_rows(tape.constant(y), idx, n).value();
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) lhs += gx[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * sy[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("finite check flags NaN production") {
  Tape tape;
  tape.set_finite_check(true);
  Tensor t = Tensor::matrix(1, 2, 1.0);
  t[1] = 1e308;
  const Var x = tape.constant(t);
  CHECK_THROWS_AS((void)ad::mul(x, ad::scale(x, 10.0)), NumericalError);
}

TEST_CASE("forward evaluation is deterministic") {
  std::mt19937_64 rng(19);
  ad::ParameterSet params;
  params.add("a", random_tensor(8, 8, rng));
  auto f = [&](Tape& tape) {
    const Var a = tape.parameter(params.at("a"));
    return ad::sum(ad::softmax_lastdim(ad::matmul(a, ad::transpose(a))));
  };
  CHECK(ad::evaluate(f) == ad::evaluate(f));
}
