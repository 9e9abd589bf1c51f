#include "unidiff/optim.hpp"

#include <cmath>

#include "unidiff/errors.hpp"

namespace unidiff::nn {

OptimizerState make_sgd(double lr, double momentum, double weight_decay) {
  OptimizerState s;
  s.kind = OptimizerKind::sgd_momentum;
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

OptimizerState make_adam(double lr, double beta1, double beta2, double eps) {
  OptimizerState s;
  s.kind = OptimizerKind::adam;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  return s;
}

void optimizer_step(OptimizerState& state, std::span<Tensor* const> params,
                    std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("optimizer_step: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(grads.size()) + " grads");
  }
  if (state.first.empty()) {
    for (const Tensor* p : params) {
      state.first.push_back(Tensor::zeros_like(*p));
      if (state.kind == OptimizerKind::adam) state.second.push_back(Tensor::zeros_like(*p));
    }
  }
  if (state.first.size() != params.size()) {
    throw ShapeError("optimizer_step: parameter list changed size between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], grads[i], "optimizer_step grad");
    require_same_shape(*params[i], state.first[i], "optimizer_step buffer");
  }
  ++state.step;

  if (state.kind == OptimizerKind::sgd_momentum) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      Tensor& buf = state.first[i];
      const Tensor& g = grads[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j] + state.weight_decay * p[j];
        buf[j] = state.momentum * buf[j] + gj;
        p[j] -= state.lr * buf[j];
      }
    }
    return;
  }

  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.first[i];
    Tensor& v = state.second[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] + state.weight_decay * p[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      p[j] -= state.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

}  // namespace unidiff::nn
