#include "unidiff/generate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <set>

#include "unidiff/errors.hpp"
#include "unidiff/kernels.hpp"

namespace unidiff {

using nn::Graph;
using nn::Tensor;
using nn::Var;

namespace {

const std::pair<Strategy, const char*> kStrategyNames[] = {
    {Strategy::sdedit, "sdedit"},
    {Strategy::interclass_mix, "interclass_mix"},
    {Strategy::invert_interpolate, "invert_interpolate"},
    {Strategy::stylemix_composite, "stylemix_composite"},
    {Strategy::latent_optimized_sdedit, "latent_optimized_sdedit"}};

const std::pair<SuffixPolicy, const char*> kPolicyNames[] = {{SuffixPolicy::none, "none"},
                                                             {SuffixPolicy::pool, "pool"},
                                                             {SuffixPolicy::dream, "dream"},
                                                             {SuffixPolicy::exchange, "exchange"}};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(Strategy s) {
  for (const auto& [k, v] : kStrategyNames)
    if (k == s) return v;
  throw ParameterError("unknown strategy");
}

Strategy strategy_from_string(const std::string& s) {
  for (const auto& [k, v] : kStrategyNames)
    if (s == v) return k;
  throw ParameterError("unknown generation strategy '" + s + "'");
}

std::string to_string(SuffixPolicy p) {
  for (const auto& [k, v] : kPolicyNames)
    if (k == p) return v;
  throw ParameterError("unknown suffix policy");
}

SuffixPolicy suffix_policy_from_string(const std::string& s) {
  for (const auto& [k, v] : kPolicyNames)
    if (s == v) return k;
  throw ParameterError("unknown suffix policy '" + s + "'");
}

void validate(const GenerationSpec& spec) {
  if (!(spec.strength > 0.0 && spec.strength <= 1.0)) {
    throw ParameterError("transition strength must lie in (0, 1]");
  }
  if (spec.ratio < 1) throw ParameterError("augmentation ratio must be >= 1");
  if (!(spec.sampler.guidance_w >= 0.0)) throw ParameterError("guidance weight must be >= 0");
  if (spec.sampler.steps < 0) throw ParameterError("sampler steps must be >= 0");
  if (!(spec.two_stage_r >= 0.0 && spec.two_stage_r <= 1.0)) {
    throw ParameterError("two-stage ratio must lie in [0, 1]");
  }
  if (spec.two_stage_r != 0.0 && spec.strategy != Strategy::invert_interpolate) {
    throw ParameterError("two-stage ratio only applies to invert_interpolate");
  }
  if (spec.lambda && !(*spec.lambda >= 0.0 && *spec.lambda <= 1.0)) {
    throw ParameterError("interpolation weight must lie in [0, 1]");
  }
  if (!(0.0 <= spec.lambda_lo && spec.lambda_lo <= spec.lambda_hi && spec.lambda_hi <= 1.0)) {
    throw ParameterError("interpolation range must satisfy 0 <= lo <= hi <= 1");
  }
  if (!(spec.fractal_gamma >= 0.0 && spec.fractal_gamma < 1.0)) {
    throw ParameterError("fractal blend weight must lie in [0, 1)");
  }
  if (!(spec.style_strength > 0.0 && spec.style_strength <= 1.0)) {
    throw ParameterError("style strength must lie in (0, 1]");
  }
  if (spec.opt_steps < 0) throw ParameterError("latent optimization steps must be >= 0");
  if (!(spec.opt_lr > 0.0)) throw ParameterError("latent optimization step size must be > 0");
}

void set_default_vocabulary(GenerationContext& ctx, std::span<const LabeledSample> train) {
  ctx.pool_suffixes = kBackgroundSuffixes;
  ctx.pool_suffixes.insert(ctx.pool_suffixes.end(), kToneSuffixes.begin(), kToneSuffixes.end());
  ctx.dream_suffixes = kToneSuffixes;
  ctx.observed.clear();
  for (const auto& s : train) ctx.observed.emplace_back(s.id, s.annotation);
}

Var ClassifierScorer::log_prob(Graph& g, Var x, int label) const {
  const std::size_t c = model_.num_classes();
  if (label < 0 || static_cast<std::size_t>(label) >= c) {
    throw ParameterError("scorer has no class " + std::to_string(label));
  }
  Tensor onehot({1, c});
  onehot[static_cast<std::size_t>(label)] = 1.0;
  return nn::scale(nn::soft_cross_entropy(model_.logits(g, x), onehot), -1.0);
}

namespace {

void check_context(const GenerationContext& ctx) {
  if (!ctx.predictor || !ctx.schedule || !ctx.hierarchy) {
    throw ParameterError("generation context needs a predictor, schedule and hierarchy");
  }
}

Prompt class_prompt(const GenerationContext& ctx, int fine) {
  if (fine < 0 || static_cast<std::size_t>(fine) >= ctx.tokens.size()) {
    throw ParameterError("class " + std::to_string(fine) + " has no concept token");
  }
  const std::string& tok = ctx.tokens[static_cast<std::size_t>(fine)];
  if (ctx.model && !ctx.model->concepts().has_token(tok)) {
    throw ParameterError("concept table lacks token '" + tok + "'");
  }
  return Prompt{tok, ""};
}

std::string pick_suffix(const GenerationContext& ctx, SuffixPolicy policy,
                        const std::string& sample_id, Rng& rng) {
  auto pick = [&](const std::vector<std::string>& v) {
    return v.empty() ? std::string() : v[rng.index(v.size())];
  };
  switch (policy) {
    case SuffixPolicy::none:
      return "";
    case SuffixPolicy::pool:
      return pick(ctx.pool_suffixes);
    case SuffixPolicy::dream:
      return pick(ctx.dream_suffixes);
    case SuffixPolicy::exchange: {
      std::vector<std::string> others;
      for (const auto& [id, ann] : ctx.observed)
        if (id != sample_id && !ann.empty()) others.push_back(ann);
      return pick(others);
    }
  }
  return "";
}

int coarse_of(const GenerationContext& ctx, int fine) {
  return ctx.hierarchy->fine_to_coarse.at(static_cast<std::size_t>(fine));
}

LabeledSample synthetic_from(const LabeledSample& source, const std::string& method, double s,
                             std::uint64_t seed) {
  LabeledSample out;
  out.id = source.id + ".syn";
  out.fine = source.fine;
  out.coarse = source.coarse;
  out.annotation = source.annotation;
  out.provenance.synthetic = true;
  out.provenance.method = method;
  out.provenance.source_ids = {source.id};
  out.provenance.strength = s;
  out.provenance.seed = seed;
  return out;
}

struct NoisedStart {
  SampleStart start;
  Prompt prompt;
};

// Draws the suffix and the forward noise exactly as SDEdit does, so variants
// that start from the same seed share the noised latent.
NoisedStart sdedit_start(const GenerationContext& ctx, const LabeledSample& sample, int fine,
                         double strength, SuffixPolicy policy, Rng& rng) {
  NoisedStart ns;
  ns.prompt = class_prompt(ctx, fine);
  ns.prompt.suffix = pick_suffix(ctx, policy, sample.id, rng);
  const int t0 = strength_to_step(strength, ctx.schedule->steps);
  const Tensor x0 = to_model_space(sample.image);
  Tensor eps(x0.shape());
  rng.fill_normal(eps.values());
  ns.start = SampleStart{diffuse(x0, t0, eps, *ctx.schedule), t0};
  return ns;
}

void record_sampling(LabeledSample& out, const NoisedStart& ns, const GenerationSpec& spec) {
  out.provenance.extra["suffix"] = ns.prompt.suffix;
  out.provenance.extra["t_start"] = std::to_string(ns.start.t);
  out.provenance.extra["sampler_steps"] = std::to_string(spec.sampler.steps);
  out.provenance.extra["guidance_w"] = fmt(spec.sampler.guidance_w);
}

}  // namespace

LabeledSample sdedit_generate(const GenerationContext& ctx, const LabeledSample& sample,
                              const GenerationSpec& spec, std::uint64_t seed) {
  validate(spec);
  check_context(ctx);
  Rng rng(seed);
  NoisedStart ns = sdedit_start(ctx, sample, sample.fine, spec.strength, spec.suffix_policy, rng);
  const Tensor x = unidiff::sample(*ctx.predictor, *ctx.schedule, ns.prompt, spec.sampler, rng, ns.start);
  LabeledSample out = synthetic_from(sample, "sdedit", spec.strength, seed);
  out.image = to_storage_space(x, sample.image.shape());
  record_sampling(out, ns, spec);
  return out;
}

LabeledSample latent_optimized_sdedit(const GenerationContext& ctx, const LabeledSample& sample,
                                      const GenerationSpec& spec,
                                      const DifferentiableScorer& scorer, std::uint64_t seed) {
  validate(spec);
  check_context(ctx);
  if (spec.opt_steps > 0 && !ctx.model) {
    throw ParameterError("latent optimization needs the denoiser network");
  }
  Rng rng(seed);
  NoisedStart ns = sdedit_start(ctx, sample, sample.fine, spec.strength, spec.suffix_policy, rng);
  const int t0 = ns.start.t;
  const std::size_t d = ns.start.x.size();
  const Tensor x0 = to_model_space(sample.image).reshaped({1, d});
  const double ab = ctx.schedule->alpha_bar(t0);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  const EpsScaling k = eps_scaling(*ctx.schedule, t0);

  // Objective on the one-step clean estimate of the latent, with its gradient.
  auto objective = [&](const Tensor& z, Tensor* grad) {
    Graph g;
    Var zv = g.input(z.reshaped({1, d}));
    const int steps[1] = {t0};
    Tensor cond = ctx.model->condition(ns.prompt);
    cond = cond.reshaped({1, cond.size()});
    Var f = ctx.model->forward(g, zv, steps, g.constant(std::move(cond)));
    Var eps = nn::axpby(k.k_x, zv, k.k_f, f);
    Var x0_hat = nn::axpby(1.0 / a, zv, -b / a, eps);
    Var delta = x0_hat - g.constant(x0);
    Var j = nn::axpby(spec.w_info, scorer.log_prob(g, x0_hat, sample.fine), spec.w_div,
                      nn::sum(delta * delta));
    const double value = j.value()[0];
    if (!std::isfinite(value)) {
      throw NumericError("latent objective is not finite (" + fmt(value) + ")");
    }
    g.backward(j);
    *grad = g.grad(zv).reshaped({d});
    return value;
  };

  Tensor z = ns.start.x;
  double value = 0.0;
  int accepted = 0;
  if (spec.opt_steps > 0) {
    Tensor grad;
    value = objective(z, &grad);
    for (int step = 0; step < spec.opt_steps; ++step) {
      const double gnorm = std::sqrt(nn::squared_norm(grad.values()));
      if (gnorm == 0.0) break;
      // Step of RMS size lr per pixel, halved until the objective does not drop.
      double lr = spec.opt_lr * std::sqrt(static_cast<double>(d)) / gnorm;
      bool moved = false;
      for (int tries = 0; tries < 12 && !moved; ++tries, lr *= 0.5) {
        Tensor cand = z;
        for (std::size_t i = 0; i < d; ++i) cand[i] += lr * grad[i];
        Tensor cand_grad;
        const double cand_value = objective(cand, &cand_grad);
        if (cand_value >= value) {
          z = std::move(cand);
          grad = std::move(cand_grad);
          value = cand_value;
          moved = true;
        }
      }
      if (!moved) break;
      ++accepted;
    }
  }
  ns.start.x = z;
  const Tensor x = unidiff::sample(*ctx.predictor, *ctx.schedule, ns.prompt, spec.sampler, rng, ns.start);
  LabeledSample out = synthetic_from(sample, "latent_optimized_sdedit", spec.strength, seed);
  out.image = to_storage_space(x, sample.image.shape());
  record_sampling(out, ns, spec);
  out.provenance.extra["opt_steps"] = std::to_string(spec.opt_steps);
  out.provenance.extra["opt_accepted"] = std::to_string(accepted);
  out.provenance.extra["objective"] = fmt(value);
  return out;
}

LabeledSample interclass_mix(const GenerationContext& ctx, const LabeledSample& sample,
                             int target_class, const GenerationSpec& spec, std::uint64_t seed) {
  validate(spec);
  check_context(ctx);
  if (target_class == sample.fine) {
    throw ParameterError("interclass_mix needs a target class different from the source class");
  }
  class_prompt(ctx, sample.fine);
  Rng rng(seed);
  NoisedStart ns = sdedit_start(ctx, sample, target_class, spec.strength, spec.suffix_policy, rng);
  const Tensor x = unidiff::sample(*ctx.predictor, *ctx.schedule, ns.prompt, spec.sampler, rng, ns.start);
  LabeledSample out = synthetic_from(sample, "interclass_mix", spec.strength, seed);
  out.image = to_storage_space(x, sample.image.shape());
  out.fine = target_class;
  out.coarse = coarse_of(ctx, target_class);
  record_sampling(out, ns, spec);
  out.provenance.extra["source_class"] = std::to_string(sample.fine);
  out.provenance.extra["target_class"] = std::to_string(target_class);
  return out;
}

LabeledSample invert_interpolate(const GenerationContext& ctx, const LabeledSample& a,
                                 const LabeledSample& b, const GenerationSpec& spec,
                                 std::uint64_t seed) {
  validate(spec);
  check_context(ctx);
  if (a.fine != b.fine) {
    throw ParameterError("invert_interpolate needs two samples of the same class (" +
                         std::to_string(a.fine) + " vs " + std::to_string(b.fine) + ")");
  }
  if (a.id == b.id) throw ParameterError("invert_interpolate needs two distinct samples");
  Rng rng(seed);
  const Prompt base = class_prompt(ctx, a.fine);
  Prompt suffixed = base;
  suffixed.suffix = pick_suffix(ctx, spec.suffix_policy, a.id, rng);
  const double lam = spec.lambda ? *spec.lambda : rng.uniform(spec.lambda_lo, spec.lambda_hi);
  const int steps = spec.sampler.steps == 0 ? ctx.schedule->steps : spec.sampler.steps;
  const Tensor za = ddim_invert(*ctx.predictor, to_model_space(a.image), base, *ctx.schedule, steps);
  const Tensor zb = ddim_invert(*ctx.predictor, to_model_space(b.image), base, *ctx.schedule, steps);
  const Tensor z = slerp(za, zb, lam);
  const Tensor x = two_stage_sample(*ctx.predictor, z, suffixed, base, spec.two_stage_r,
                                    *ctx.schedule, spec.sampler, rng);
  LabeledSample out = synthetic_from(a, "invert_interpolate", spec.strength, seed);
  out.image = to_storage_space(x, a.image.shape());
  out.provenance.source_ids = {a.id, b.id};
  out.provenance.extra["lambda"] = fmt(lam);
  out.provenance.extra["two_stage_r"] = fmt(spec.two_stage_r);
  out.provenance.extra["suffix"] = suffixed.suffix;
  out.provenance.extra["sampler_steps"] = std::to_string(spec.sampler.steps);
  out.provenance.extra["guidance_w"] = fmt(spec.sampler.guidance_w);
  return out;
}

Tensor fractal_texture(const nn::Shape& shape, Rng& rng, double roughness) {
  if (shape.size() != 3) throw ShapeError("fractal_texture expects [H x W x C]");
  const std::size_t h = shape[0], w = shape[1], ch = shape[2];
  std::size_t n = 1;
  while (n + 1 < std::max(h, w)) n *= 2;
  const std::size_t size = n + 1;
  Tensor out(shape);
  std::vector<double> grid(size * size);
  auto at = [&](std::size_t y, std::size_t x) -> double& { return grid[y * size + x]; };
  for (std::size_t c = 0; c < ch; ++c) {
    at(0, 0) = rng.normal();
    at(0, n) = rng.normal();
    at(n, 0) = rng.normal();
    at(n, n) = rng.normal();
    double amp = 1.0;
    for (std::size_t step = n; step > 1; step /= 2) {
      const std::size_t half = step / 2;
      for (std::size_t y = half; y < size; y += step)
        for (std::size_t x = half; x < size; x += step)
          at(y, x) = 0.25 * (at(y - half, x - half) + at(y - half, x + half) +
                             at(y + half, x - half) + at(y + half, x + half)) +
                     amp * rng.normal();
      for (std::size_t y = 0; y < size; y += half) {
        for (std::size_t x = (y / half) % 2 == 0 ? half : 0; x < size; x += step) {
          double s = 0.0;
          int cnt = 0;
          if (y >= half) { s += at(y - half, x); ++cnt; }
          if (y + half < size) { s += at(y + half, x); ++cnt; }
          if (x >= half) { s += at(y, x - half); ++cnt; }
          if (x + half < size) { s += at(y, x + half); ++cnt; }
          at(y, x) = s / cnt + amp * rng.normal();
        }
      }
      amp *= roughness;
    }
    double lo = grid[0], hi = grid[0];
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        lo = std::min(lo, at(y, x));
        hi = std::max(hi, at(y, x));
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(y * w + x) * ch + c] = hi > lo ? (at(y, x) - lo) / (hi - lo) : 0.5;
  }
  return out;
}

LabeledSample stylemix_composite(const GenerationContext& ctx, const LabeledSample& sample,
                                 const std::string& style, const GenerationSpec& spec,
                                 std::uint64_t seed, const StyleTransform& transform) {
  validate(spec);
  const bool known = std::find(kToneSuffixes.begin(), kToneSuffixes.end(), style) != kToneSuffixes.end() ||
                     std::find(kBackgroundSuffixes.begin(), kBackgroundSuffixes.end(), style) !=
                         kBackgroundSuffixes.end();
  if (!known || (ctx.model && !transform && !ctx.model->concepts().has_suffix(style))) {
    throw ParameterError("style suffix '" + style + "' is not in the suffix vocabulary");
  }
  Rng rng(seed);
  Tensor styled;
  if (transform) {
    styled = transform(sample, style);
  } else {
    check_context(ctx);
    Rng style_rng(derive_seed(seed, "style"));
    NoisedStart ns = sdedit_start(ctx, sample, sample.fine, spec.style_strength,
                                  SuffixPolicy::none, style_rng);
    ns.prompt.suffix = style;
    styled = to_storage_space(
        unidiff::sample(*ctx.predictor, *ctx.schedule, ns.prompt, spec.sampler, style_rng, ns.start),
        sample.image.shape());
  }
  nn::require_same_shape(styled, sample.image, "stylemix transform");

  MaskChoice mask;
  if (spec.mask) {
    mask = *spec.mask;
  } else {
    mask.vertical = rng.bernoulli(0.5);
    mask.original_first = rng.bernoulli(0.5);
  }
  const Tensor fractal = fractal_texture(sample.image.shape(), rng);
  const std::size_t h = sample.image.dim(0), w = sample.image.dim(1), ch = sample.image.dim(2);
  const double gamma = spec.fractal_gamma;
  LabeledSample out = synthetic_from(sample, "stylemix_composite", spec.style_strength, seed);
  out.image = Tensor(sample.image.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool first_half = mask.vertical ? (2 * x < w) : (2 * y < h);
      const bool original = first_half == mask.original_first;
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t i = (y * w + x) * ch + c;
        const double hybrid = original ? sample.image[i] : styled[i];
        out.image[i] = quantize_storage((1.0 - gamma) * hybrid + gamma * fractal[i]);
      }
    }
  }
  out.provenance.extra["style"] = style;
  out.provenance.extra["mask"] = std::string(mask.vertical ? "vertical" : "horizontal") +
                                 (mask.original_first ? "/original-first" : "/original-second");
  out.provenance.extra["gamma"] = fmt(gamma);
  return out;
}

std::uint64_t variant_seed(std::uint64_t master, const std::string& sample_id, int variant) {
  return derive_seed(master, {fnv1a64(sample_id), static_cast<std::uint64_t>(variant)});
}

LabeledSample generate_variant(const GenerationContext& ctx, std::span<const LabeledSample> real,
                               std::size_t i, int j, const GenerationSpec& spec,
                               const DifferentiableScorer* scorer) {
  const LabeledSample& src = real[i];
  const std::uint64_t seed = variant_seed(spec.seed, src.id, j);
  Rng partner_rng(derive_seed(seed, "partner"));
  LabeledSample out;
  switch (spec.strategy) {
    case Strategy::sdedit:
      out = sdedit_generate(ctx, src, spec, seed);
      break;
    case Strategy::latent_optimized_sdedit:
      if (!scorer) throw ParameterError("latent_optimized_sdedit needs a scorer");
      out = latent_optimized_sdedit(ctx, src, spec, *scorer, seed);
      break;
    case Strategy::interclass_mix: {
      check_context(ctx);
      const auto classes = ctx.hierarchy->num_fine();
      if (classes < 2) throw ParameterError("interclass_mix needs at least two classes");
      auto target = static_cast<int>(partner_rng.index(classes - 1));
      if (target >= src.fine) ++target;
      out = interclass_mix(ctx, src, target, spec, seed);
      break;
    }
    case Strategy::invert_interpolate: {
      std::vector<std::size_t> partners;
      for (std::size_t k = 0; k < real.size(); ++k)
        if (k != i && real[k].fine == src.fine) partners.push_back(k);
      if (partners.empty()) {
        GenerationSpec fallback = spec;
        fallback.strategy = Strategy::sdedit;
        fallback.two_stage_r = 0.0;
        out = sdedit_generate(ctx, src, fallback, seed);
        out.provenance.extra["fallback"] = "invert_interpolate: no same-class partner";
      } else {
        out = invert_interpolate(ctx, src, real[partners[partner_rng.index(partners.size())]], spec,
                                 seed);
      }
      break;
    }
    case Strategy::stylemix_composite: {
      const auto& styles = ctx.dream_suffixes.empty() ? kToneSuffixes : ctx.dream_suffixes;
      out = stylemix_composite(ctx, src, styles[partner_rng.index(styles.size())], spec, seed);
      break;
    }
  }
  out.id = src.id + ".syn" + std::to_string(j);
  out.provenance.extra["variant"] = std::to_string(j);
  return out;
}

AugmentResult augment_dataset(const GenerationContext& ctx, std::span<const LabeledSample> real,
                              const GenerationSpec& spec, const DifferentiableScorer* scorer,
                              bool parallel) {
  validate(spec);
  check_context(ctx);
  std::set<std::string> ids;
  for (const auto& s : real) {
    if (s.provenance.synthetic) throw ParameterError("augment_dataset expects real samples only");
    if (!ids.insert(s.id).second) throw ParameterError("duplicate sample id " + s.id);
  }
  const auto start = std::chrono::steady_clock::now();
  const std::size_t m = static_cast<std::size_t>(spec.ratio);
  const long long total = static_cast<long long>(real.size() * m);
  AugmentResult result;
  result.synthetic.resize(static_cast<std::size_t>(total));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(total));
#pragma omp parallel for schedule(dynamic, 1) num_threads(kernels::worker_count()) if (parallel)
  for (long long k = 0; k < total; ++k) {
    const auto uk = static_cast<std::size_t>(k);
    try {
      result.synthetic[uk] = generate_variant(ctx, real, uk / m, static_cast<int>(uk % m), spec, scorer);
    } catch (...) {
      errors[uk] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& s : result.synthetic)
    if (s.provenance.extra.count("fallback")) ++result.fallbacks;
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace unidiff
