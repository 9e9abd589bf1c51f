#include "unidiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "unidiff/errors.hpp"

namespace unidiff {

using nn::Graph;
using nn::Tensor;
using nn::Var;

std::vector<int> strided_timesteps(int total_steps, int steps) {
  if (steps < 1) throw ParameterError("sampler steps must be >= 1");
  if (steps > total_steps) {
    throw ParameterError("sampler steps " + std::to_string(steps) + " exceed schedule length " +
                         std::to_string(total_steps));
  }
  if (steps == 1) return {total_steps};
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double pos = 1.0 + (total_steps - 1.0) * static_cast<double>(steps - 1 - i) / (steps - 1);
    out.push_back(static_cast<int>(std::floor(pos + 0.5)));
  }
  return out;
}

std::string prompt_label(const Prompt& prompt) {
  if (prompt.unconditional()) return "<null>";
  return prompt.suffix.empty() ? prompt.token : prompt.token + "+" + prompt.suffix;
}

EpsScaling eps_scaling(const NoiseSchedule& schedule, int t) {
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  const double v = kDataStd * kDataStd;
  const double denom = ab * v + (1.0 - ab);
  const double c_skip = a * v / denom;
  const double c_out = b * kDataStd / std::sqrt(denom);
  return {(1.0 - a * c_skip) / b, -a * c_out / b};
}

Tensor ModelPredictor::predict(const Tensor& x_t, int t, const Prompt& prompt) const {
  Tensor f = model_.predict(x_t, t, model_.condition(prompt));
  const EpsScaling k = eps_scaling(schedule_, t);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = k.k_x * x_t[i] + k.k_f * f[i];
  return f;
}

Tensor SingleDatumPredictor::predict(const Tensor& x_t, int t, const Prompt&) const {
  nn::require_same_shape(x_t, datum_, "single-datum predictor");
  const double ab = schedule_.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor eps(x_t.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x_t[i] - a * datum_[i]) / b;
  return eps;
}

Tensor cfg_eps(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
  nn::require_same_shape(eps_cond, eps_uncond, "cfg_eps");
  if (!(w >= 0.0)) throw ParameterError("guidance weight must be >= 0");
  Tensor out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]);
  }
  return out;
}

namespace {

Tensor guided_eps(const NoisePredictor& predictor, const Tensor& x, int t, const Prompt& prompt,
                  double w) {
  Tensor cond = predictor.predict(x, t, prompt);
  if (w == 1.0 || prompt.unconditional()) return cond;
  Tensor uncond = predictor.predict(x, t, Prompt{});
  return cfg_eps(cond, uncond, w);
}

void check_finite(const Tensor& x, int t) {
  if (!x.all_finite()) {
    throw NumericError("non-finite sampler state at step " + std::to_string(t));
  }
}

struct ChainSetup {
  Tensor x;
  std::vector<int> timesteps;
};

ChainSetup setup_chain(const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng,
                       const std::optional<SampleStart>& start, std::size_t dim) {
  const int total = schedule.steps;
  const int steps = config.steps == 0 ? total : config.steps;
  std::vector<int> grid = strided_timesteps(total, steps);
  ChainSetup c;
  if (start) {
    if (start->t < 1 || start->t > total) {
      throw ParameterError("sampler start step " + std::to_string(start->t) + " outside [1, " +
                           std::to_string(total) + "]");
    }
    c.x = start->x;
    c.timesteps.push_back(start->t);
    for (int t : grid)
      if (t < start->t) c.timesteps.push_back(t);
  } else {
    c.x = Tensor({dim});
    rng.fill_normal(c.x.values());
    c.timesteps = std::move(grid);
  }
  return c;
}

Tensor ancestral_step(const Tensor& x, const Tensor& eps, int t, int t_next,
                      const NoiseSchedule& schedule, double eta, Rng& rng) {
  const double ab_t = schedule.alpha_bar(t);
  const double ab_n = schedule.alpha_bar(t_next);
  const double alpha = ab_t / ab_n;
  const double beta = 1.0 - alpha;
  const double coef = beta / std::sqrt(1.0 - ab_t);
  const double inv = 1.0 / std::sqrt(alpha);
  const double sigma = t_next > 0 ? eta * (t_next == t - 1 ? schedule.sigma(t) : std::sqrt(beta))
                                  : 0.0;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv * (x[i] - coef * eps[i]);
  if (sigma > 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sigma * rng.normal();
  }
  return out;
}

Tensor ddim_step(const Tensor& x, const Tensor& eps, int t, int t_next,
                 const NoiseSchedule& schedule, double eta, Rng& rng) {
  const double ab_t = schedule.alpha_bar(t);
  const double ab_n = schedule.alpha_bar(t_next);
  const double sigma =
      eta > 0.0 ? eta * std::sqrt((1.0 - ab_n) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_n) : 0.0;
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_n - sigma * sigma));
  const double sa_t = std::sqrt(ab_t), sb_t = std::sqrt(1.0 - ab_t), sa_n = std::sqrt(ab_n);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0_hat = (x[i] - sb_t * eps[i]) / sa_t;
    out[i] = sa_n * x0_hat + dir * eps[i];
  }
  if (sigma > 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sigma * rng.normal();
  }
  return out;
}

using PromptForStep = std::function<const Prompt&(std::size_t)>;

Tensor run_chain(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                 const PromptForStep& prompt_at, const SamplerConfig& config, Rng& rng,
                 ChainSetup chain, const StepTrace& trace) {
  Tensor x = std::move(chain.x);
  const auto& ts = chain.timesteps;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_next = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Prompt& prompt = prompt_at(i);
    if (trace) trace(StepRecord{t, t_next, prompt_label(prompt)});
    Tensor eps = guided_eps(predictor, x, t, prompt, config.guidance_w);
    x = config.kind == SamplerKind::ancestral
            ? ancestral_step(x, eps, t, t_next, schedule, config.eta, rng)
            : ddim_step(x, eps, t, t_next, schedule, config.eta, rng);
    check_finite(x, t);
  }
  for (double& v : x.storage()) v = std::clamp(v, -1.0, 1.0);
  return x;
}

}  // namespace

Tensor sample(const NoisePredictor& predictor, const NoiseSchedule& schedule, const Prompt& prompt,
              const SamplerConfig& config, Rng& rng, const std::optional<SampleStart>& start,
              const StepTrace& trace) {
  ChainSetup chain = setup_chain(schedule, config, rng, start, predictor.image_dim());
  return run_chain(
      predictor, schedule, [&](std::size_t) -> const Prompt& { return prompt; }, config, rng,
      std::move(chain), trace);
}

Tensor sample_ancestral(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                        const Prompt& prompt, const SamplerConfig& config, Rng& rng,
                        const std::optional<SampleStart>& start, const StepTrace& trace) {
  SamplerConfig c = config;
  c.kind = SamplerKind::ancestral;
  return sample(predictor, schedule, prompt, c, rng, start, trace);
}

Tensor sample_ddim(const NoisePredictor& predictor, const NoiseSchedule& schedule,
                   const Prompt& prompt, const SamplerConfig& config, Rng& rng,
                   const std::optional<SampleStart>& start, const StepTrace& trace) {
  SamplerConfig c = config;
  c.kind = SamplerKind::ddim;
  return sample(predictor, schedule, prompt, c, rng, start, trace);
}

Tensor ddim_invert(const NoisePredictor& predictor, const Tensor& x0, const Prompt& prompt,
                   const NoiseSchedule& schedule, int steps, int refine, const StepTrace& trace) {
  if (steps < 1) throw ParameterError("ddim_invert requires steps >= 1");
  if (refine < 0) throw ParameterError("ddim_invert refinement count must be >= 0");
  std::vector<int> ts = strided_timesteps(schedule.steps, steps);
  std::reverse(ts.begin(), ts.end());
  Tensor x = x0;
  int t_cur = 0;
  for (int t : ts) {
    if (trace) trace(StepRecord{t_cur, t, prompt_label(prompt)});
    const double ab_c = schedule.alpha_bar(t_cur), ab_n = schedule.alpha_bar(t);
    const double sa_c = std::sqrt(ab_c), sb_c = std::sqrt(1.0 - ab_c);
    const double sa_n = std::sqrt(ab_n), sb_n = std::sqrt(1.0 - ab_n);
    // First pass evaluates eps at the current latent; each refinement
    // re-evaluates it at the latest estimate of the next latent, converging to
    // the point the forward DDIM step maps back onto x.
    Tensor next = x;
    for (int pass = 0; pass <= refine; ++pass) {
      const Tensor eps = predictor.predict(next, t, prompt);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0_hat = (x[i] - sb_c * eps[i]) / sa_c;
        next[i] = sa_n * x0_hat + sb_n * eps[i];
      }
      check_finite(next, t);
    }
    x = std::move(next);
    t_cur = t;
  }
  return x;
}

Tensor slerp(const Tensor& a, const Tensor& b, double lam) {
  nn::require_same_shape(a, b, "slerp");
  if (!(lam >= 0.0 && lam <= 1.0)) throw ParameterError("slerp weight must lie in [0, 1]");
  const double na = std::sqrt(nn::squared_norm(a.values()));
  const double nb = std::sqrt(nn::squared_norm(b.values()));
  if (na == 0.0 || nb == 0.0) throw ParameterError("slerp of a zero vector");
  if (lam == 0.0) return a;
  if (lam == 1.0) return b;
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  const double cos_omega = std::clamp(dot / (na * nb), -1.0, 1.0);
  const double omega = std::acos(cos_omega);
  double wa = 1.0 - lam, wb = lam;
  if (omega >= 1e-6) {
    const double s = std::sin(omega);
    wa = std::sin((1.0 - lam) * omega) / s;
    wb = std::sin(lam * omega) / s;
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wa * a[i] + wb * b[i];
  return out;
}

Tensor two_stage_sample(const NoisePredictor& predictor, const Tensor& z, const Prompt& suffixed,
                        const Prompt& base, double r, const NoiseSchedule& schedule,
                        const SamplerConfig& config, Rng& rng, const StepTrace& trace) {
  if (!(r >= 0.0 && r <= 1.0)) throw ParameterError("two-stage ratio r must lie in [0, 1]");
  ChainSetup chain = setup_chain(schedule, config, rng, SampleStart{z, schedule.steps}, z.size());
  const std::size_t n = chain.timesteps.size();
  const auto first = static_cast<std::size_t>(
      std::clamp(std::ceil((1.0 - r) * static_cast<double>(n) - 1e-9), 0.0, static_cast<double>(n)));
  return run_chain(
      predictor, schedule,
      [&](std::size_t i) -> const Prompt& { return i < first ? suffixed : base; }, config, rng,
      std::move(chain), trace);
}

EpsNetwork model_network(const DenoiserModel& model, const NoiseSchedule& schedule) {
  return [&model, &schedule](Graph& g, Var x_t, std::span<const int> t,
                             std::span<const Prompt> prompts) {
    Var f = model.forward(g, x_t, t, model.condition(g, prompts));
    const Tensor& xv = x_t.value();
    const std::size_t n = xv.rows(), d = xv.cols();
    Tensor skip({n, d}), gain({n, d});
    for (std::size_t i = 0; i < n; ++i) {
      const EpsScaling k = eps_scaling(schedule, t[i]);
      for (std::size_t j = 0; j < d; ++j) {
        skip[i * d + j] = k.k_x * xv[i * d + j];
        gain[i * d + j] = k.k_f;
      }
    }
    return g.constant(std::move(skip)) + g.constant(std::move(gain)) * f;
  };
}

Var ddpm_loss_at(Graph& g, const EpsNetwork& network, std::span<const TrainExample> batch,
                 std::span<const int> t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (batch.empty()) throw ParameterError("ddpm_loss on an empty batch");
  const std::size_t n = batch.size();
  const std::size_t d = batch.front().x0->size();
  if (t.size() != n || eps.size() != n * d) throw ShapeError("ddpm_loss_at: steps/noise size mismatch");
  Tensor xt({n, d});
  std::vector<Prompt> prompts;
  prompts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& x0 = *batch[i].x0;
    if (x0.size() != d) throw ShapeError("ddpm_loss: ragged batch");
    const double ab = schedule.alpha_bar(t[i]);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t j = 0; j < d; ++j) xt[i * d + j] = a * x0[j] + b * eps[i * d + j];
    prompts.push_back(batch[i].prompt);
  }
  Var pred = network(g, g.constant(std::move(xt)), t, prompts);
  return nn::mse(pred, g.constant(eps.reshaped({n, d})));
}

Var ddpm_loss(Graph& g, const EpsNetwork& network, std::span<const TrainExample> batch,
              const NoiseSchedule& schedule, double cond_dropout_p, Rng& rng) {
  if (batch.empty()) throw ParameterError("ddpm_loss on an empty batch");
  if (!(cond_dropout_p >= 0.0 && cond_dropout_p < 1.0)) {
    throw ParameterError("condition dropout probability must lie in [0, 1)");
  }
  const std::size_t n = batch.size();
  const std::size_t d = batch.front().x0->size();
  std::vector<int> t(n);
  Tensor eps({n, d});
  std::vector<TrainExample> items(batch.begin(), batch.end());
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(schedule.steps)));
    rng.fill_normal(eps.row(i));
    if (rng.uniform() < cond_dropout_p) items[i].prompt = Prompt{};
  }
  return ddpm_loss_at(g, network, items, t, eps, schedule);
}

Var ddpm_loss(Graph& g, const DenoiserModel& model, std::span<const TrainExample> batch,
              const NoiseSchedule& schedule, double cond_dropout_p, Rng& rng) {
  return ddpm_loss(g, model_network(model, schedule), batch, schedule, cond_dropout_p, rng);
}

}  // namespace unidiff
