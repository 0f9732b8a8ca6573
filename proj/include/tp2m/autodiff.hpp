#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tp2m/tensor.hpp"

namespace tp2m::ad {

// A named learnable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Ordered collection of parameters. References returned by add()/at() stay
// valid for the lifetime of the set.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const noexcept;
  void zero_grad();

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Ordered record of operations. Nodes are appended in execution order, so
// inputs always precede their consumers; backward() walks the record once in
// reverse. A tape belongs to a single thread.
class Tape {
 public:
  // Propagates the gradient stored at `node` into its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t node)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Differentiable leaf that is not tied to a Parameter.
  Var variable(Tensor value);
  // Leaf bound to `param`; repeated calls return the same Var.
  Var parameter(Parameter& param);

  // Records an op output. The backward rule is dropped when no input needs a
  // gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(std::size_t node) const { return nodes_[node].value; }
  bool requires_grad(std::size_t node) const { return nodes_[node].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }

  // Gradient accumulated at a node; empty when the node was never reached.
  const Tensor& grad(std::size_t node) const { return nodes_[node].grad; }
  const Tensor& grad(Var v) const { return grad(v.id()); }
  // Zero-initialized on first access.
  Tensor& grad_buffer(std::size_t node);

  std::size_t size() const noexcept { return nodes_.size(); }

  // Runs reverse accumulation from a scalar loss and adds the resulting
  // gradients into every bound Parameter::grad.
  void backward(Var loss);

  bool finite_check() const noexcept { return finite_check_; }
  void set_finite_check(bool enabled) noexcept { finite_check_ = enabled; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool finite_check_ = false;
  bool backward_done_ = false;
};

// Free-function form of Tape::backward.
void backward(Tape& tape, Var loss);

// ---- Core op set -----------------------------------------------------------
// All ops require operands on the same tape and report both shapes on
// mismatch. Rank-2 operands are expected unless noted.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// Concatenates along columns (axis 1) or rows (axis 0).
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var gather_rows(Var x, std::vector<std::size_t> index);
// out[index[r]] += x[r]; exact adjoint of gather_rows.
Var scatter_add_rows(Var x, std::vector<std::size_t> index, std::size_t out_rows);
Var softmax_lastdim(Var x);
Var relu(Var x);
Var silu(Var x);
// Column means over all rows -> (1, cols).
Var mean_rows(Var x);
// Sum of all elements -> (1, 1).
Var sum(Var x);
// Elementwise square root. The derivative at exactly zero is taken as zero.
Var sqrt(Var x);
Var transpose(Var x);
// Expands a (1, cols) row to (rows, cols).
Var broadcast(Var row, std::size_t rows);
Var reshape(Var x, Shape shape);
Var reciprocal(Var x);
// Elementwise |x| with derivative sign(x), zero at zero.
Var abs(Var x);

// ---- Composites ------------------------------------------------------------

// x W + b with b a (1, out) row.
Var linear(Var x, Var weight, Var bias);
// Per-row sum over columns -> (rows, 1).
Var row_sum(Var x);
// Per-row Euclidean norm -> (rows, 1).
Var row_norm(Var x);
// Normalizes each row to zero mean, unit variance, then applies gain/bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

// ---- Verification ----------------------------------------------------------

struct GradcheckOptions {
  double epsilon = 1e-6;
  // Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t max_per_parameter = 0;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarFunction = std::function<Var(Tape&)>;

// Compares reverse-mode gradients of `f` against central differences.
// Error per coordinate: |analytic - numeric| / max(1, |analytic|, |numeric|).
GradcheckResult gradcheck(const ScalarFunction& f, ParameterSet& params,
                          const GradcheckOptions& options = {});

// Evaluates f on a fresh tape and returns its scalar value.
double evaluate(const ScalarFunction& f);

}  // namespace tp2m::ad
