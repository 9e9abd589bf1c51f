#include "unidiff/layers.hpp"

#include <cmath>

#include "unidiff/errors.hpp"
#include "unidiff/kernels.hpp"

namespace unidiff::nn {

LoraAdapter make_lora_adapter(std::size_t in_features, std::size_t out_features, std::size_t rank,
                              double alpha, Rng& rng) {
  if (rank == 0) throw ParameterError("lora rank must be >= 1");
  if (rank > in_features || rank > out_features) {
    throw ParameterError("lora rank " + std::to_string(rank) + " exceeds layer dims " +
                         std::to_string(out_features) + "x" + std::to_string(in_features));
  }
  LoraAdapter a;
  a.down = Tensor({rank, in_features});
  a.up = Tensor({out_features, rank});
  a.alpha = alpha;
  const double std = 1.0 / std::sqrt(static_cast<double>(rank));
  for (double& v : a.down.storage()) v = std * rng.normal();
  return a;
}

Linear::Linear(std::size_t in_features, std::size_t out_features)
    : weight({out_features, in_features}), bias({out_features}) {}

void Linear::init_normal(Rng& rng, double gain) {
  const double std = gain / std::sqrt(static_cast<double>(in_features()));
  for (double& v : weight.storage()) v = std * rng.normal();
  bias.fill(0.0);
}

Var Linear::forward(Graph& g, Var x, const LoraAdapter* adapter) const {
  Var y = matmul_nt(x, g.param(weight));
  if (adapter) {
    if (adapter->in_features() != in_features() || adapter->out_features() != out_features()) {
      throw ShapeError("lora adapter " + shape_str(adapter->up.shape()) + "*" +
                       shape_str(adapter->down.shape()) + " does not fit layer " +
                       shape_str(weight.shape()));
    }
    Var low = matmul_nt(matmul_nt(x, g.param(adapter->down)), g.param(adapter->up));
    y = axpby(1.0, y, adapter->scale(), low);
  }
  return add_bias(y, g.param(bias));
}

Tensor merged_weight(const Linear& layer, const LoraAdapter& adapter) {
  if (adapter.in_features() != layer.in_features() ||
      adapter.out_features() != layer.out_features() || adapter.up.cols() != adapter.rank()) {
    throw ParameterError("lora adapter shape does not match host layer " +
                         shape_str(layer.weight.shape()));
  }
  const std::size_t out = layer.out_features(), in = layer.in_features(), r = adapter.rank();
  Tensor delta({out, in});
  kernels::matmul_nn(adapter.up.data(), adapter.down.data(), delta.data(), out, r, in, false);
  Tensor w = layer.weight;
  const double s = adapter.scale();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += s * delta[i];
  return w;
}

}  // namespace unidiff::nn
