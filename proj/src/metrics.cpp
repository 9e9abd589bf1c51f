#include "unidiff/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "unidiff/errors.hpp"
#include "unidiff/kernels.hpp"

namespace unidiff {

using nn::Tensor;

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

void moments(const Tensor& x, Vec& mu, Mat& cov) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto d = static_cast<Eigen::Index>(x.cols());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      x.data(), n, d);
  mu = m.colwise().mean().transpose();
  const Mat centered = m.rowwise() - mu.transpose();
  cov = centered.transpose() * centered / static_cast<double>(n - 1);
}

bool singular(const Eigen::SelfAdjointEigenSolver<Mat>& es) {
  const Vec& ev = es.eigenvalues();
  return ev.minCoeff() <= 1e-10 * std::max(1.0, ev.maxCoeff());
}

}  // namespace

FidResult fid(const Tensor& real, const Tensor& generated) {
  if (real.rank() != 2 || generated.rank() != 2 || real.cols() != generated.cols()) {
    throw ShapeError("fid: feature sets must be [n x d] with equal d");
  }
  if (real.rows() < 2 || generated.rows() < 2) throw ParameterError("fid needs >= 2 samples per set");
  Vec mu_r, mu_g;
  Mat cov_r, cov_g;
  moments(real, mu_r, cov_r);
  moments(generated, mu_g, cov_g);

  FidResult out;
  Eigen::SelfAdjointEigenSolver<Mat> es_r(cov_r);
  Eigen::SelfAdjointEigenSolver<Mat> es_g(cov_g, Eigen::EigenvaluesOnly);
  if (singular(es_r) || singular(es_g)) {
    out.regularized = true;
    const Mat eye = Mat::Identity(cov_r.rows(), cov_r.cols());
    cov_r += 1e-6 * eye;
    cov_g += 1e-6 * eye;
    es_r.compute(cov_r);
  }
  // tr sqrt(S_r S_g) = tr sqrt(S_r^1/2 S_g S_r^1/2), the inner matrix being symmetric PSD.
  const Vec root_ev = es_r.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Mat root_r = es_r.eigenvectors() * root_ev.asDiagonal() * es_r.eigenvectors().transpose();
  const Mat inner = root_r * cov_g * root_r;
  Eigen::SelfAdjointEigenSolver<Mat> es_m(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es_m.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_r - mu_g).squaredNorm() + cov_r.trace() + cov_g.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(value)) throw NumericError("fid is not finite");
  out.value = std::max(0.0, value);
  return out;
}

std::vector<double> knn_radii(const Tensor& points, std::size_t k) {
  const std::size_t n = points.rows(), d = points.cols();
  if (k < 1 || k >= n) {
    throw ParameterError("k = " + std::to_string(k) + " needs 1 <= k < " + std::to_string(n));
  }
  std::vector<double> dist(n * n);
  kernels::pairwise_sq_dist(points.data(), points.data(), dist.data(), n, n, d);
  std::vector<double> radii(n);
  std::vector<double> row;
  for (std::size_t i = 0; i < n; ++i) {
    row.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) row.push_back(dist[i * n + j]);
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k - 1), row.end());
    radii[i] = row[k - 1];
  }
  return radii;
}

namespace {

double coverage(const Tensor& manifold, const std::vector<double>& radii, const Tensor& queries) {
  const std::size_t n = manifold.rows(), m = queries.rows(), d = manifold.cols();
  std::vector<double> dist(m * n);
  kernels::pairwise_sq_dist(queries.data(), manifold.data(), dist.data(), m, n, d);
  std::size_t inside = 0;
  for (std::size_t q = 0; q < m; ++q) {
    for (std::size_t i = 0; i < n; ++i) {
      if (dist[q * n + i] <= radii[i]) {
        ++inside;
        break;
      }
    }
  }
  return static_cast<double>(inside) / static_cast<double>(m);
}

}  // namespace

PrecisionRecall precision_recall(const Tensor& real, const Tensor& generated, std::size_t k) {
  if (real.rank() != 2 || generated.rank() != 2 || real.cols() != generated.cols()) {
    throw ShapeError("precision_recall: feature sets must be [n x d] with equal d");
  }
  if (k >= std::min(real.rows(), generated.rows()) || k < 1) {
    throw ParameterError("precision_recall: k = " + std::to_string(k) +
                         " must be in [1, min set size)");
  }
  return {coverage(real, knn_radii(real, k), generated),
          coverage(generated, knn_radii(generated, k), real)};
}

}  // namespace unidiff
