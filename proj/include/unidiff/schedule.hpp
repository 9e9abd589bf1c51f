#pragma once

#include <vector>

#include "unidiff/tensor.hpp"

namespace unidiff {

// Linear variance schedule over steps t = 1..T. Vectors are stored 0-based
// (index t-1); use the accessors with 1-based step indices.
struct NoiseSchedule {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;
  std::vector<double> alpha_bars;
  std::vector<double> sigmas;  // sqrt(beta_t)

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  // alpha_bar(0) == 1 so that t=0 denotes clean data.
  double alpha_bar(int t) const {
    return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1));
  }
  double sigma(int t) const { return sigmas.at(static_cast<std::size_t>(t - 1)); }
};

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

// Linear schedule whose endpoints scale with 1000/T so that short chains keep
// the noise budget of the standard 1000-step schedule (capped below 1).
NoiseSchedule make_default_schedule(int steps);

// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
nn::Tensor diffuse(const nn::Tensor& x0, int t, const nn::Tensor& eps,
                   const NoiseSchedule& schedule);

// One forward-process transition q(x_t | x_{t-1}).
nn::Tensor forward_step(const nn::Tensor& x_prev, int t, const nn::Tensor& eps,
                        const NoiseSchedule& schedule);

// clamp(round_half_up(s * T), 1, T)
int strength_to_step(double strength, int steps);

}  // namespace unidiff
