#include "unidiff/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "unidiff/errors.hpp"
#include "unidiff/kernels.hpp"

namespace unidiff::nn {

const Tensor& Var::value() const { return graph_->value(*this); }

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(const Tensor& value) {
  if (auto it = params_.find(&value); it != params_.end()) return Var(this, it->second);
  Node n;
  n.external = &value;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  params_.emplace(&value, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(Var v) const { return node_value(v.id()); }

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty() && !node_value(v.id()).empty()) return Tensor::zeros_like(node_value(v.id()));
  return n.grad;
}

Tensor Graph::grad_of(const Tensor& param) const {
  auto it = params_.find(&param);
  if (it == params_.end()) return Tensor::zeros_like(param);
  return grad(Var(const_cast<Graph*>(this), it->second));
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor::zeros_like(node_value(id));
  return n.grad;
}

Var Graph::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
}

Var Graph::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [&](Var p) { return nodes_[p.id()].requires_grad; });
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var loss) {
  if (!record_) throw ParameterError("backward() on a graph built without recording");
  const Tensor& lv = value(loss);
  if (lv.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(lv.shape()));
  if (!std::isfinite(lv[0])) {
    throw NumericError("non-finite loss value " + std::to_string(lv[0]));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    // Copy the closure: the callee may grow nodes_ only in pathological use,
    // but references into the vector must not be held across the call.
    BackwardFn fn = n.backward;
    fn(*this, id);
  }
}

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 1 && t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(t.shape()));
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& go = g.node_grad(self);
    for (Var p : {a, b}) {
      if (!g.requires_grad(p.id())) continue;
      Tensor& gp = g.grad_buffer(p.id());
      for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
    }
  });
}

Var sub(Var a, Var b) { return axpby(1.0, a, -1.0, b); }

Var axpby(double alpha, Var a, double beta, Var b) {
  require_same_shape(a.value(), b.value(), "axpby");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * av[i] + beta * bv[i];
  return a.graph().record(std::move(out), {a, b},
                          [a, b, alpha, beta](Graph& g, std::size_t self) {
                            const Tensor& go = g.node_grad(self);
                            if (g.requires_grad(a.id())) {
                              Tensor& ga = g.grad_buffer(a.id());
                              for (std::size_t i = 0; i < go.size(); ++i) ga[i] += alpha * go[i];
                            }
                            if (g.requires_grad(b.id())) {
                              Tensor& gb = g.grad_buffer(b.id());
                              for (std::size_t i = 0; i < go.size(); ++i) gb[i] += beta * go[i];
                            }
                          });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.graph().record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& go = g.node_grad(self);
    if (g.requires_grad(a.id())) {
      const Tensor& bv = g.value(b);
      Tensor& ga = g.grad_buffer(a.id());
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(b.id())) {
      const Tensor& av = g.value(a);
      Tensor& gb = g.grad_buffer(b.id());
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= s;
  return a.graph().record(std::move(out), {a}, [a, s](Graph& g, std::size_t self) {
    const Tensor& go = g.node_grad(self);
    Tensor& ga = g.grad_buffer(a.id());
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
  });
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_2d(xv, "add_bias");
  const std::size_t n = xv.rows(), m = xv.cols();
  if (bv.size() != m) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " vs input " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bv[j];
  return x.graph().record(std::move(out), {x, bias}, [x, bias, n, m](Graph& g, std::size_t self) {
    const Tensor& go = g.node_grad(self);
    if (g.requires_grad(x.id())) {
      Tensor& gx = g.grad_buffer(x.id());
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (g.requires_grad(bias.id())) {
      Tensor& gb = g.grad_buffer(bias.id());
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += go[i * m + j];
    }
  });
}

Var matmul_nt(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_2d(xv, "matmul_nt");
  require_2d(wv, "matmul_nt");
  const std::size_t n = xv.rows(), k = xv.cols(), m = wv.rows();
  if (wv.cols() != k) {
    throw ShapeError("matmul_nt: " + shape_str(xv.shape()) + " x " + shape_str(wv.shape()) + "^T");
  }
  Tensor out({n, m});
  kernels::matmul_nt(xv.data(), wv.data(), out.data(), n, k, m, false);
  return x.graph().record(std::move(out), {x, w}, [x, w, n, k, m](Graph& g, std::size_t self) {
    const Tensor& go = g.node_grad(self);
    if (g.requires_grad(x.id())) {
      // dX[n x k] += dY[n x m] * W[m x k]
      kernels::matmul_nn(go.data(), g.value(w).data(), g.grad_buffer(x.id()).data(), n, m, k,
                         true);
    }
    if (g.requires_grad(w.id())) {
      // dW[m x k] += dY^T * X
      kernels::matmul_tn(go.data(), g.value(x).data(), g.grad_buffer(w.id()).data(), n, m, k,
                         true);
    }
  });
}

Var silu(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = v * sigmoid(v);
  return x.graph().record(std::move(out), {x}, [x](Graph& g, std::size_t self) {
    const Tensor& go = g.node_grad(self);
    const Tensor& xv = g.value(x);
    Tensor& gx = g.grad_buffer(x.id());
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double s = sigmoid(xv[i]);
      gx[i] += go[i] * (s * (1.0 + xv[i] * (1.0 - s)));
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return x.graph().record(std::move(out), {x}, [x](Graph& g, std::size_t self) {
    const Tensor& go = g.node_grad(self);
    const Tensor& xv = g.value(x);
    Tensor& gx = g.grad_buffer(x.id());
    for (std::size_t i = 0; i < go.size(); ++i)
      if (xv[i] > 0.0) gx[i] += go[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().storage()) s += v;
  return x.graph().record(Tensor({1}, {s}), {x}, [x](Graph& g, std::size_t self) {
    const double go = g.node_grad(self)[0];
    Tensor& gx = g.grad_buffer(x.id());
    for (double& v : gx.storage()) v += go;
  });
}

Var mse(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mse");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const double inv = 1.0 / static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  return a.graph().record(Tensor({1}, {s * inv}), {a, b}, [a, b, inv](Graph& g, std::size_t self) {
    const double go = g.node_grad(self)[0];
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    const double c = 2.0 * inv * go;
    if (g.requires_grad(a.id())) {
      Tensor& ga = g.grad_buffer(a.id());
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += c * (av[i] - bv[i]);
    }
    if (g.requires_grad(b.id())) {
      Tensor& gb = g.grad_buffer(b.id());
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= c * (av[i] - bv[i]);
    }
  });
}

Var soft_cross_entropy(Var logits, const Tensor& targets) {
  const Tensor& lv = logits.value();
  require_2d(lv, "soft_cross_entropy");
  const std::size_t n = lv.rows(), c = lv.cols();
  if (targets.size() != n * c) {
    throw ShapeError("soft_cross_entropy: targets " + shape_str(targets.shape()) + " vs logits " +
                     shape_str(lv.shape()));
  }
  Tensor probs({n, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      const double logp = row[j] - log_z;
      probs[i * c + j] = std::exp(logp);
      loss -= targets[i * c + j] * logp;
    }
  }
  loss /= static_cast<double>(n);
  Tensor tgt = targets.reshaped({n, c});
  return logits.graph().record(
      Tensor({1}, {loss}), {logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), n, c](Graph& g, std::size_t self) {
        const double go = g.node_grad(self)[0] / static_cast<double>(n);
        Tensor& gl = g.grad_buffer(logits.id());
        for (std::size_t i = 0; i < n; ++i) {
          double tsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) tsum += tgt[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            gl[i * c + j] += go * (tsum * probs[i * c + j] - tgt[i * c + j]);
        }
      });
}

Var stack_rows(Graph& g, const std::vector<std::vector<Var>>& rows, std::size_t dim) {
  const std::size_t n = rows.size();
  Tensor out({n, dim});
  std::vector<Var> parents;
  for (std::size_t i = 0; i < n; ++i) {
    for (Var v : rows[i]) {
      const Tensor& vv = v.value();
      if (vv.size() != dim) {
        throw ShapeError("stack_rows: vector of size " + std::to_string(vv.size()) +
                         " where " + std::to_string(dim) + " expected");
      }
      for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] += vv[j];
      parents.push_back(v);
    }
  }
  return g.record(std::move(out), parents, [rows, dim](Graph& gr, std::size_t self) {
    const Tensor& go = gr.node_grad(self);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (Var v : rows[i]) {
        if (!gr.requires_grad(v.id())) continue;
        Tensor& gv = gr.grad_buffer(v.id());
        for (std::size_t j = 0; j < dim; ++j) gv[j] += go[i * dim + j];
      }
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.graph().record(std::move(out), {x}, [x](Graph& g, std::size_t self) {
    const Tensor& go = g.node_grad(self);
    Tensor& gx = g.grad_buffer(x.id());
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
}

std::vector<Tensor> grad(Graph& g, Var loss, std::span<const Tensor* const> params) {
  g.backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Tensor* p : params) out.push_back(g.grad_of(*p));
  return out;
}

}  // namespace unidiff::nn
