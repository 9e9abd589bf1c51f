#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unidiff/autodiff.hpp"
#include "unidiff/denoiser.hpp"
#include "unidiff/rng.hpp"
#include "unidiff/schedule.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

enum class SamplerKind { ancestral, ddim };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ddim;
  int steps = 0;            // effective step count; 0 means the full schedule
  double eta = 0.0;         // DDIM stochasticity; for ancestral, scales sigma_t
  double guidance_w = 2.0;  // classifier-free guidance weight
};

// Evenly spaced decreasing timesteps that include T and 1 (just {T} for one step).
std::vector<int> strided_timesteps(int total_steps, int steps);

struct StepRecord {
  int t = 0;
  int t_next = 0;
  std::string condition;  // "<token>+<suffix>" or "<null>"
};
using StepTrace = std::function<void(const StepRecord&)>;

std::string prompt_label(const Prompt& prompt);

// Anything that predicts the noise in x_t: the trained model or an analytic oracle.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual nn::Tensor predict(const nn::Tensor& x_t, int t, const Prompt& prompt) const = 0;
  // Flattened image size, used to draw the initial noise when no start is given.
  virtual std::size_t image_dim() const = 0;
};

// Output scaling that turns the raw network output F into a noise estimate:
//
//   x0_hat = c_skip(t) x_t + c_out(t) F,   eps_hat = (x_t - sqrt(ab_t) x0_hat) / sqrt(1 - ab_t)
//
// with c_skip, c_out chosen for data of standard deviation kDataStd. The skip
// path carries x_t at full rank, so a narrow trunk only has to model the
// low-dimensional image content.
inline constexpr double kDataStd = 0.5;

struct EpsScaling {
  double k_x = 0.0;  // coefficient on x_t
  double k_f = 0.0;  // coefficient on F
};
EpsScaling eps_scaling(const NoiseSchedule& schedule, int t);

class ModelPredictor final : public NoisePredictor {
 public:
  ModelPredictor(const DenoiserModel& model, const NoiseSchedule& schedule)
      : model_(model), schedule_(schedule) {}
  nn::Tensor predict(const nn::Tensor& x_t, int t, const Prompt& prompt) const override;
  std::size_t image_dim() const override { return model_.arch().image_dim; }

 private:
  const DenoiserModel& model_;
  const NoiseSchedule& schedule_;
};

// Denoiser that is exact when the data distribution is a single point x*.
class SingleDatumPredictor final : public NoisePredictor {
 public:
  SingleDatumPredictor(nn::Tensor datum, const NoiseSchedule& schedule)
      : datum_(std::move(datum)), schedule_(schedule) {}
  nn::Tensor predict(const nn::Tensor& x_t, int t, const Prompt& prompt) const override;
  std::size_t image_dim() const override { return datum_.size(); }

 private:
  nn::Tensor datum_;
  const NoiseSchedule& schedule_;
};

// eps_uncond + w * (eps_cond - eps_uncond)
nn::Tensor cfg_eps(const nn::Tensor& eps_cond, const nn::Tensor& eps_uncond, double w);

struct SampleStart {
  nn::Tensor x;
  int t = 0;
};

// Reverse chain x_T -> x_0 (or from `start`), final output clamped to [-1, 1].
nn::Tensor sample_ancestral(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                            const Prompt& prompt, const SamplerConfig& config, Rng& rng,
                            const std::optional<SampleStart>& start = std::nullopt,
                            const StepTrace& trace = {});
nn::Tensor sample_ddim(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                       const Prompt& prompt, const SamplerConfig& config, Rng& rng,
                       const std::optional<SampleStart>& start = std::nullopt,
                       const StepTrace& trace = {});
// Dispatches on config.kind.
nn::Tensor sample(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                  const Prompt& prompt, const SamplerConfig& config, Rng& rng,
                  const std::optional<SampleStart>& start = std::nullopt,
                  const StepTrace& trace = {});

// Deterministic DDIM run with increasing t; returns the latent at t = T.
// Uses the conditional prediction only (no guidance). `refine` extra
// fixed-point passes per step tighten the round trip through sample_ddim.
inline constexpr int kInversionRefine = 2;
nn::Tensor ddim_invert(const NoisePredictor& predictor, const nn::Tensor& x0,
                       const Prompt& prompt, const NoiseSchedule& schedule, int steps,
                       int refine = kInversionRefine, const StepTrace& trace = {});

// Spherical interpolation; linear when the angle is below 1e-6.
nn::Tensor slerp(const nn::Tensor& a, const nn::Tensor& b, double lam);

// Denoises z from t = T: the first ceil((1-r) * T_eff) steps under `suffixed`,
// the rest under `base`, continuing from the intermediate state.
nn::Tensor two_stage_sample(const NoisePredictor& predictor, const nn::Tensor& z,
                            const Prompt& suffixed, const Prompt& base, double r,
                            const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng,
                            const StepTrace& trace = {});

// One training item: a flattened model-space image and its prompt.
struct TrainExample {
  const nn::Tensor* x0 = nullptr;
  Prompt prompt;
};

// Network hook for the loss: predicted noise [n x D] for noisy inputs.
using EpsNetwork = std::function<nn::Var(nn::Graph&, nn::Var x_t, std::span<const int> t,
                                         std::span<const Prompt> prompts)>;

EpsNetwork model_network(const DenoiserModel& model, const NoiseSchedule& schedule);

// Mean over batch and elements of ||eps - eps_theta(diffuse(x0, t, eps), t, c)||^2 with
// t ~ U{1..T}, eps ~ N(0, I), and c replaced by the null condition with
// probability cond_dropout_p.
nn::Var ddpm_loss(nn::Graph& g, const EpsNetwork& network, std::span<const TrainExample> batch,
                  const NoiseSchedule& schedule, double cond_dropout_p, Rng& rng);
nn::Var ddpm_loss(nn::Graph& g, const DenoiserModel& model, std::span<const TrainExample> batch,
                  const NoiseSchedule& schedule, double cond_dropout_p, Rng& rng);

// Same loss at caller-chosen steps and noise (no randomness).
nn::Var ddpm_loss_at(nn::Graph& g, const EpsNetwork& network, std::span<const TrainExample> batch,
                     std::span<const int> t, const nn::Tensor& eps, const NoiseSchedule& schedule);

}  // namespace unidiff
