#include "unidiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "unidiff/errors.hpp"

namespace unidiff {

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ParameterError("schedule requires T >= 1, got " + std::to_string(steps));
  if (!(beta_start > 0.0)) throw ParameterError("schedule requires beta_start > 0");
  if (!(beta_start <= beta_end)) throw ParameterError("schedule requires beta_start <= beta_end");
  if (!(beta_end < 1.0)) throw ParameterError("schedule requires beta_end < 1");

  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(static_cast<std::size_t>(steps));
  s.alpha_bars.resize(s.betas.size());
  s.sigmas.resize(s.betas.size());
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    const double beta = i == steps - 1 ? beta_end : beta_start + (beta_end - beta_start) * frac;
    s.betas[static_cast<std::size_t>(i)] = beta;
    prod *= (1.0 - beta);
    s.alpha_bars[static_cast<std::size_t>(i)] = prod;
    s.sigmas[static_cast<std::size_t>(i)] = std::sqrt(beta);
  }
  return s;
}

NoiseSchedule make_default_schedule(int steps) {
  if (steps < 1) throw ParameterError("schedule requires T >= 1, got " + std::to_string(steps));
  const double factor = 1000.0 / steps;
  const double beta_end = std::min(0.02 * factor, 0.999);
  const double beta_start = std::min(1e-4 * factor, beta_end);
  return make_linear_schedule(steps, beta_start, beta_end);
}

nn::Tensor diffuse(const nn::Tensor& x0, int t, const nn::Tensor& eps,
                   const NoiseSchedule& schedule) {
  nn::require_same_shape(x0, eps, "diffuse");
  if (t < 1 || t > schedule.steps) {
    throw ParameterError("diffuse: step " + std::to_string(t) + " outside [1, " +
                         std::to_string(schedule.steps) + "]");
  }
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  nn::Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

nn::Tensor forward_step(const nn::Tensor& x_prev, int t, const nn::Tensor& eps,
                        const NoiseSchedule& schedule) {
  nn::require_same_shape(x_prev, eps, "forward_step");
  const double beta = schedule.beta(t);
  const double a = std::sqrt(1.0 - beta), b = std::sqrt(beta);
  nn::Tensor out(x_prev.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x_prev[i] + b * eps[i];
  return out;
}

int strength_to_step(double strength, int steps) {
  if (!(strength > 0.0) || strength > 1.0) {
    throw ParameterError("strength must lie in (0, 1], got " + std::to_string(strength));
  }
  const int t = static_cast<int>(std::floor(strength * steps + 0.5));
  return std::clamp(t, 1, steps);
}

}  // namespace unidiff
