#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "unidiff/tensor.hpp"

namespace unidiff::nn {

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t step = 0;
  std::vector<Tensor> first;   // momentum buffer / Adam first moment
  std::vector<Tensor> second;  // Adam second moment
};

OptimizerState make_sgd(double lr, double momentum = 0.9, double weight_decay = 0.0);
OptimizerState make_adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Updates params in place. Moment buffers are created on the first call and
// must keep mirroring the parameter shapes afterwards.
void optimizer_step(OptimizerState& state, std::span<Tensor* const> params,
                    std::span<const Tensor> grads);

}  // namespace unidiff::nn
