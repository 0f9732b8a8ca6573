#include "tp2m/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>

#include "tp2m/error.hpp"

namespace tp2m::ad {

// ---- ParameterSet ----------------------------------------------------------

Parameter& ParameterSet::add(std::string name, Tensor value) {
  if (index_.contains(name)) {
    throw ContractViolation("duplicate parameter name '" + name + "'");
  }
  Tensor grad(value.shape());
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{std::move(name), std::move(value), std::move(grad)});
  return params_.back();
}

Parameter& ParameterSet::at(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ContractViolation("unknown parameter '" + std::string(name) + "'");
  }
  return params_[it->second];
}

const Parameter& ParameterSet::at(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ContractViolation("unknown parameter '" + std::string(name) + "'");
  }
  return params_[it->second];
}

bool ParameterSet::contains(std::string_view name) const {
  return index_.find(name) != index_.end();
}

std::size_t ParameterSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad = Tensor(p.value.shape());
}

// ---- Tape ------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Tape::Tape() {
  const char* env = std::getenv("TP2M_CHECK_FINITE");
  finite_check_ = env != nullptr && env[0] != '\0' && env[0] != '0';
}

Var Tape::push(Node node) {
  if (finite_check_) {
    for (double v : node.value.values()) {
      if (!std::isfinite(v)) {
        throw NumericalError("non-finite value produced by tape node " +
                             std::to_string(nodes_.size()) + " of shape " +
                             shape_string(node.value.shape()));
      }
    }
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(Node{std::move(value), {}, false, {}, nullptr}); }

Var Tape::variable(Tensor value) { return push(Node{std::move(value), {}, true, {}, nullptr}); }

Var Tape::parameter(Parameter& param) {
  if (auto it = param_nodes_.find(&param); it != param_nodes_.end()) {
    return Var(this, it->second);
  }
  Var v = push(Node{param.value, {}, true, {}, &param});
  param_nodes_.emplace(&param, v.id());
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw ContractViolation("operands recorded on different tapes");
    needs = needs || requires_grad(in.id());
  }
  return push(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}, nullptr});
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw ContractViolation("operands recorded on different tapes");
    needs = needs || requires_grad(in.id());
  }
  return push(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}, nullptr});
}

Tensor& Tape::grad_buffer(std::size_t node) {
  Node& n = nodes_[node];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractViolation("loss recorded on a different tape");
  if (loss.value().size() != 1) {
    throw ContractViolation("backward() needs a scalar loss, got shape " +
                            shape_string(loss.shape()));
  }
  if (backward_done_) throw ContractViolation("backward() already ran on this tape");
  backward_done_ = true;
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
  }
  for (Node& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    if (!n.param->grad.same_shape(n.value)) n.param->grad = Tensor(n.value.shape());
    auto dst = n.param->grad.values();
    auto src = n.grad.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

void backward(Tape& tape, Var loss) { tape.backward(loss); }

// ---- Kernels ---------------------------------------------------------------

namespace {

void require_rank2(const Var& x, const char* op) {
  if (x.value().rank() != 2) {
    throw ContractViolation(std::string(op) + ": expected a rank-2 operand, got shape " +
                            shape_string(x.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                            " vs " + shape_string(b.shape()));
  }
}

// c(m,n) += a(m,k) b(k,n)
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c(m,k) += g(m,n) b(k,n)^T
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c(k,n) += a(m,k)^T g(m,n)
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

template <typename F>
Var unary(Var x, Tensor out, F local_derivative) {
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, local_derivative](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const auto g = t.grad(self).values();
    const auto xv = t.value(xid).values();
    const auto yv = t.value(self).values();
    auto dx = t.grad_buffer(xid).values();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * local_derivative(xv[i], yv[i]);
  });
}

void accumulate(Tape& t, std::size_t node, std::span<const double> g, double factor = 1.0) {
  if (!t.requires_grad(node)) return;
  auto dst = t.grad_buffer(node).values();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
}

}  // namespace

// ---- Core ops --------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ContractViolation("matmul: shape mismatch " + shape_string(a.shape()) + " x " +
                            shape_string(b.shape()));
  }
  Tensor out = Tensor::matrix(m, n);
  gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {a, b}, [aid, bid, m, k, n](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data();
    if (t.requires_grad(aid)) gemm_nt(g, t.value(bid).data(), t.grad_buffer(aid).data(), m, k, n);
    if (t.requires_grad(bid)) gemm_tn(t.value(aid).data(), g, t.grad_buffer(bid).data(), m, k, n);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {a, b}, [aid, bid](Tape& t, std::size_t self) {
    accumulate(t, aid, t.grad(self).values());
    accumulate(t, bid, t.grad(self).values());
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {a, b}, [aid, bid](Tape& t, std::size_t self) {
    accumulate(t, aid, t.grad(self).values());
    accumulate(t, bid, t.grad(self).values(), -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto bv = b.value().values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {a, b}, [aid, bid](Tape& t, std::size_t self) {
    const auto g = t.grad(self).values();
    if (t.requires_grad(aid)) {
      const auto bv = t.value(bid).values();
      auto da = t.grad_buffer(aid).values();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bid)) {
      const auto av = t.value(aid).values();
      auto db = t.grad_buffer(bid).values();
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v = factor * v;
  const std::size_t aid = a.id();
  return a.tape().record(std::move(out), {a}, [aid, factor](Tape& t, std::size_t self) {
    accumulate(t, aid, t.grad(self).values(), factor);
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractViolation("concat: no operands");
  if (axis > 1) throw ContractViolation("concat: axis must be 0 or 1");
  for (const Var& p : parts) require_rank2(p, "concat");
  const std::size_t rows0 = parts[0].rows(), cols0 = parts[0].cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    const bool ok = axis == 1 ? p.rows() == rows0 : p.cols() == cols0;
    if (!ok) {
      throw ContractViolation("concat: shape mismatch " + shape_string(parts[0].shape()) +
                              " vs " + shape_string(p.shape()));
    }
    total += axis == 1 ? p.cols() : p.rows();
  }
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  Tensor out = axis == 1 ? Tensor::matrix(rows0, total) : Tensor::matrix(total, cols0);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (axis == 1) {
      for (std::size_t r = 0; r < rows0; ++r) {
        std::copy_n(v.data() + r * v.cols(), v.cols(), out.data() + r * total + offset);
      }
      widths.push_back(v.cols());
      offset += v.cols();
    } else {
      std::copy_n(v.data(), v.size(), out.data() + offset * cols0);
      widths.push_back(v.rows());
      offset += v.rows();
    }
    ids.push_back(p.id());
  }
  return parts[0].tape().record(
      std::move(out), parts, [ids, widths, axis, rows0, cols0, total](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            double* dst = t.grad_buffer(ids[k]).data();
            if (axis == 1) {
              for (std::size_t r = 0; r < rows0; ++r) {
                const double* src = g.data() + r * total + offset;
                for (std::size_t c = 0; c < widths[k]; ++c) dst[r * widths[k] + c] += src[c];
              }
            } else {
              const double* src = g.data() + offset * cols0;
              for (std::size_t i = 0; i < widths[k] * cols0; ++i) dst[i] += src[i];
            }
          }
          offset += widths[k];
        }
      });
}

Var gather_rows(Var x, std::vector<std::size_t> index) {
  require_rank2(x, "gather_rows");
  const std::size_t n = x.rows(), c = x.cols();
  for (std::size_t i : index) {
    if (i >= n) {
      throw ContractViolation("gather_rows: index " + std::to_string(i) + " out of range for " +
                              shape_string(x.shape()));
    }
  }
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    std::copy_n(x.value().data() + index[r] * c, c, out.data() + r * c);
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, c, index = std::move(index)](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const double* g = t.grad(self).data();
    double* dx = t.grad_buffer(xid).data();
    for (std::size_t r = 0; r < index.size(); ++r) {
      double* dst = dx + index[r] * c;
      const double* src = g + r * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var scatter_add_rows(Var x, std::vector<std::size_t> index, std::size_t out_rows) {
  require_rank2(x, "scatter_add_rows");
  const std::size_t c = x.cols();
  if (index.size() != x.rows()) {
    throw ContractViolation("scatter_add_rows: " + std::to_string(index.size()) +
                            " indices for input of shape " + shape_string(x.shape()));
  }
  for (std::size_t i : index) {
    if (i >= out_rows) {
      throw ContractViolation("scatter_add_rows: index " + std::to_string(i) +
                              " out of range for " + std::to_string(out_rows) + " rows");
    }
  }
  Tensor out = Tensor::matrix(out_rows, c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const double* src = x.value().data() + r * c;
    double* dst = out.data() + index[r] * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, c, index = std::move(index)](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const double* g = t.grad(self).data();
    double* dx = t.grad_buffer(xid).data();
    for (std::size_t r = 0; r < index.size(); ++r) {
      const double* src = g + index[r] * c;
      double* dst = dx + r * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var softmax_lastdim(Var x) {
  const Tensor& xv = x.value();
  const std::size_t width = xv.rank() == 0 ? 0 : xv.shape().back();
  if (width == 0) throw ContractViolation("softmax_lastdim: empty last dimension");
  const std::size_t rows = xv.size() / width;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * width;
    double* o = out.data() + r * width;
    const double peak = *std::max_element(in, in + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - peak);
      total += o[j];
    }
    for (std::size_t j = 0; j < width; ++j) o[j] /= total;
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, rows, width](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const double* g = t.grad(self).data();
    const double* y = t.value(self).data();
    double* dx = t.grad_buffer(xid).data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * width;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < width; ++j) dx[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return unary(x, std::move(out), [](double xi, double) { return xi > 0.0 ? 1.0 : 0.0; });
}

Var silu(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
  return unary(x, std::move(out), [](double xi, double) {
    const double s = 1.0 / (1.0 + std::exp(-xi));
    return s * (1.0 + xi * (1.0 - s));
  });
}

Var mean_rows(Var x) {
  require_rank2(x, "mean_rows");
  const std::size_t n = x.rows(), c = x.cols();
  if (n == 0) throw ContractViolation("mean_rows: no rows");
  Tensor out = Tensor::matrix(1, c);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) out[j] += x.value().at(r, j);
  }
  for (double& v : out.values()) v /= static_cast<double>(n);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, n, c](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const double* g = t.grad(self).data();
    double* dx = t.grad_buffer(xid).data();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += g[j] * inv;
    }
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  const std::size_t xid = x.id();
  return x.tape().record(Tensor::scalar(total), {x}, [xid](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const double g = t.grad(self)[0];
    for (double& d : t.grad_buffer(xid).values()) d += g;
  });
}

Var sqrt(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) {
    if (v < 0.0) throw NumericalError("sqrt of negative value " + std::to_string(v));
    v = std::sqrt(v);
  }
  return unary(x, std::move(out), [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var transpose(Var x) {
  require_rank2(x, "transpose");
  const std::size_t n = x.rows(), c = x.cols();
  Tensor out = Tensor::matrix(c, n);
  const double* src = x.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) out.data()[j * n + r] = src[r * c + j];
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid, n, c](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const double* g = t.grad(self).data();
    double* dx = t.grad_buffer(xid).data();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += g[j * n + r];
    }
  });
}

Var broadcast(Var row, std::size_t rows) {
  require_rank2(row, "broadcast");
  if (row.rows() != 1) {
    throw ContractViolation("broadcast: expected a (1, n) row, got " + shape_string(row.shape()));
  }
  const std::size_t c = row.cols();
  Tensor out = Tensor::matrix(rows, c);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(row.value().data(), c, out.data() + r * c);
  const std::size_t xid = row.id();
  return row.tape().record(std::move(out), {row}, [xid, rows, c](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    const double* g = t.grad(self).data();
    double* dx = t.grad_buffer(xid).data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) dx[j] += g[r * c + j];
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [xid](Tape& t, std::size_t self) {
    accumulate(t, xid, t.grad(self).values());
  });
}

Var reciprocal(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) {
    if (v == 0.0) throw NumericalError("reciprocal of zero");
    v = 1.0 / v;
  }
  return unary(x, std::move(out), [](double, double y) { return -y * y; });
}

Var abs(Var x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::fabs(v);
  return unary(x, std::move(out), [](double xi, double) {
    return xi > 0.0 ? 1.0 : (xi < 0.0 ? -1.0 : 0.0);
  });
}

// ---- Composites ------------------------------------------------------------

Var linear(Var x, Var weight, Var bias) {
  return add(matmul(x, weight), broadcast(bias, x.rows()));
}

Var row_sum(Var x) {
  require_rank2(x, "row_sum");
  return matmul(x, x.tape().constant(Tensor::matrix(x.cols(), 1, 1.0)));
}

Var row_norm(Var x) { return sqrt(row_sum(mul(x, x))); }

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_rank2(x, "layer_norm");
  Tape& tape = x.tape();
  const std::size_t n = x.rows(), d = x.cols();
  const Var spread = tape.constant(Tensor::matrix(1, d, 1.0));
  const Var mean = scale(row_sum(x), 1.0 / static_cast<double>(d));
  const Var centered = sub(x, matmul(mean, spread));
  const Var var = scale(row_sum(mul(centered, centered)), 1.0 / static_cast<double>(d));
  const Var inv_std = reciprocal(sqrt(add(var, tape.constant(Tensor::matrix(n, 1, eps)))));
  const Var normed = mul(centered, matmul(inv_std, spread));
  return add(mul(normed, broadcast(gain, n)), broadcast(bias, n));
}

// ---- Verification ----------------------------------------------------------

double evaluate(const ScalarFunction& f) {
  Tape tape;
  return f(tape).value().item();
}

GradcheckResult gradcheck(const ScalarFunction& f, ParameterSet& params,
                          const GradcheckOptions& options) {
  if (!(options.epsilon >= 1e-7 && options.epsilon <= 1e-3)) {
    throw ContractViolation("gradcheck: epsilon " + std::to_string(options.epsilon) +
                            " outside [1e-7, 1e-3]");
  }
  params.zero_grad();
  double base = 0.0;
  {
    Tape tape;
    Var loss = f(tape);
    base = loss.value().item();
    tape.backward(loss);
  }
  const double again = evaluate(f);
  if (std::bit_cast<std::uint64_t>(again) != std::bit_cast<std::uint64_t>(base)) {
    throw ContractViolation("gradcheck: function is not deterministic");
  }

  std::mt19937_64 rng(options.seed);
  GradcheckResult result;
  for (Parameter& p : params) {
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_per_parameter != 0 && coords.size() > options.max_per_parameter) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_per_parameter);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double original = p.value[idx];
      p.value[idx] = original + options.epsilon;
      const double plus = evaluate(f);
      p.value[idx] = original - options.epsilon;
      const double minus = evaluate(f);
      p.value[idx] = original;
      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      const double analytic = p.grad[idx];
      const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
      const double err = std::fabs(analytic - numeric) / denom;
      ++result.coordinates;
      if (err > result.max_rel_error || result.worst_parameter.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        if (err >= result.max_rel_error) {
          result.worst_parameter = p.name;
          result.worst_index = idx;
          result.worst_analytic = analytic;
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace tp2m::ad
