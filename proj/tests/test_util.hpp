#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "unidiff/autodiff.hpp"
#include "unidiff/rng.hpp"
#include "unidiff/tensor.hpp"

namespace testutil {

using unidiff::nn::Graph;
using unidiff::nn::Tensor;
using unidiff::nn::Var;

// Builds a scalar loss in a fresh graph from the current parameter values.
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error of analytic vs central-difference gradients,
// |a - n| / max(|a|, |n|, floor). Checks up to `per_tensor` entries per tensor.
inline GradCheck finite_difference_check(const LossBuilder& build,
                                         const std::vector<Tensor*>& params,
                                         std::size_t per_tensor = 24, double h = 1e-5,
                                         double floor = 1e-7, std::uint64_t seed = 17) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    Var loss = build(g);
    std::vector<const Tensor*> cp(params.begin(), params.end());
    analytic = unidiff::nn::grad(g, loss, cp);
  }
  auto eval = [&] {
    Graph g(false);
    return build(g).value()[0];
  };
  unidiff::Rng rng(seed);
  GradCheck out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    std::vector<std::size_t> idx(t.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > per_tensor) {
      for (std::size_t i = 0; i < per_tensor; ++i) {
        std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
      }
      idx.resize(per_tensor);
    }
    for (std::size_t i : idx) {
      const double saved = t[i];
      t[i] = saved + h;
      const double up = eval();
      t[i] = saved - h;
      const double down = eval();
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, rel);
      ++out.checked;
    }
  }
  return out;
}

inline Tensor random_tensor(unidiff::nn::Shape shape, unidiff::Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = scale * rng.normal();
  return t;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    unidiff::Rng rng(reinterpret_cast<std::uintptr_t>(this) ^ std::hash<std::string>{}(tag));
    path_ = std::filesystem::temp_directory_path() /
            ("unidiff-" + tag + "-" + std::to_string(rng.engine()() % 1000000007ULL));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
