#pragma once

#include <cstddef>

#include "unidiff/tensor.hpp"

namespace unidiff {

struct FidResult {
  double value = 0.0;
  bool regularized = false;  // +1e-6 I was added to both covariances
};

// Frechet distance between Gaussian fits of the rows of two [n x d] feature sets.
FidResult fid(const nn::Tensor& real, const nn::Tensor& generated);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

// k-NN manifold estimator. A point belongs to a set's manifold when it lies
// within the k-th-neighbour radius of at least one point of the set (the point
// itself excluded when computing radii).
PrecisionRecall precision_recall(const nn::Tensor& real, const nn::Tensor& generated,
                                 std::size_t k);

// Squared k-th-neighbour radius of every row (self excluded).
std::vector<double> knn_radii(const nn::Tensor& points, std::size_t k);

}  // namespace unidiff
