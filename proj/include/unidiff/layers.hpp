#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "unidiff/autodiff.hpp"
#include "unidiff/rng.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff::nn {

// Low-rank update W_eff = W + (alpha / rank) * up * down.
struct LoraAdapter {
  Tensor down;  // rank x d_in
  Tensor up;    // d_out x rank
  double alpha = 1.0;

  std::size_t rank() const { return down.rows(); }
  std::size_t in_features() const { return down.cols(); }
  std::size_t out_features() const { return up.rows(); }
  double scale() const { return alpha / static_cast<double>(rank()); }
  std::size_t parameter_count() const { return down.size() + up.size(); }

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

// Adapters keyed by the name of the layer they modify.
using AdapterSet = std::map<std::string, LoraAdapter>;

// down ~ N(0, 1/rank), up = 0, so an attached adapter starts as the identity edit.
LoraAdapter make_lora_adapter(std::size_t in_features, std::size_t out_features, std::size_t rank,
                              double alpha, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features);

  std::size_t in_features() const { return weight.cols(); }
  std::size_t out_features() const { return weight.rows(); }

  void init_normal(Rng& rng, double gain = 1.0);

  // y = x W^T + b, plus the low-rank path x A^T B^T * scale when an adapter is given.
  Var forward(Graph& g, Var x, const LoraAdapter* adapter = nullptr) const;

  Tensor weight;  // out x in
  Tensor bias;    // out

  friend bool operator==(const Linear&, const Linear&) = default;
};

// W + scale * up * down
Tensor merged_weight(const Linear& layer, const LoraAdapter& adapter);

}  // namespace unidiff::nn
