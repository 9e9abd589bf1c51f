#include "unidiff/finetune.hpp"

#include <algorithm>
#include <set>

#include "unidiff/diffusion.hpp"
#include "unidiff/errors.hpp"
#include "unidiff/optim.hpp"

namespace unidiff {

using nn::Graph;
using nn::Tensor;

void validate(const FinetuneConfig& cfg) {
  if (cfg.steps < 0) throw ParameterError("finetune steps must be >= 0");
  if (cfg.batch < 1) throw ParameterError("finetune batch must be >= 1");
  if (!(cfg.lr > 0.0)) throw ParameterError("finetune learning rate must be > 0");
  if (cfg.phase == FinetunePhase::lora && cfg.lora_rank < 1) {
    throw ParameterError("lora rank must be >= 1");
  }
}

Prompt training_prompt(const ConceptTable& table, const ClassTokens& tokens,
                       const LabeledSample& sample, PromptPolicy policy) {
  if (sample.fine < 0 || static_cast<std::size_t>(sample.fine) >= tokens.size()) {
    throw ParameterError("sample " + sample.id + " has label " + std::to_string(sample.fine) +
                         " without a class token");
  }
  Prompt p{tokens[static_cast<std::size_t>(sample.fine)], ""};
  if (policy == PromptPolicy::suffix_enriched && table.has_suffix(sample.annotation)) {
    p.suffix = sample.annotation;
  }
  return p;
}

namespace {

struct Pool {
  std::vector<Tensor> images;
  std::vector<Prompt> prompts;
};

Pool make_pool(const ConceptTable& table, std::span<const LabeledSample> train,
               const ClassTokens& tokens, PromptPolicy policy, const std::set<int>* keep) {
  Pool pool;
  for (const auto& s : train) {
    if (keep && !keep->count(s.fine)) continue;
    pool.images.push_back(to_model_space(s.image));
    pool.prompts.push_back(training_prompt(table, tokens, s, policy));
  }
  return pool;
}

std::vector<TrainExample> draw_batch(const Pool& pool, int batch, Rng& rng) {
  std::vector<TrainExample> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    const std::size_t j = rng.index(pool.images.size());
    out.push_back({&pool.images[j], pool.prompts[j]});
  }
  return out;
}

}  // namespace

ConceptResult textual_inversion(const DenoiserModel& model, const NoiseSchedule& schedule,
                                std::span<const LabeledSample> train, const ClassTokens& tokens,
                                std::span<const int> classes, const FinetuneConfig& cfg) {
  validate(cfg);
  if (cfg.phase != FinetunePhase::concept_only) {
    throw ParameterError("textual_inversion requires the concept_only phase");
  }
  std::set<int> keep;
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= tokens.size()) {
      throw ParameterError("unknown class id " + std::to_string(c));
    }
    const bool present =
        std::any_of(train.begin(), train.end(), [c](const auto& s) { return s.fine == c; });
    if (!present) throw ParameterError("class id " + std::to_string(c) + " has no training data");
    keep.insert(c);
  }

  DenoiserModel work = model;
  Rng rng(derive_seed(cfg.seed, "textual_inversion"));
  std::vector<std::string> learned;
  for (int c : keep) {
    const std::string& tok = tokens[static_cast<std::size_t>(c)];
    if (!work.concepts().has_token(tok)) {
      Tensor v({work.arch().cond_dim});
      for (double& x : v.storage()) x = 0.1 * rng.normal();
      work.concepts().set_token(tok, std::move(v));
    }
    if (std::find(learned.begin(), learned.end(), tok) == learned.end()) learned.push_back(tok);
  }

  ConceptResult result;
  if (cfg.steps == 0) {
    result.table = work.concepts();
    return result;
  }
  const Pool pool = make_pool(work.concepts(), train, tokens, cfg.prompt_policy, &keep);
  std::vector<Tensor*> params;
  for (const auto& tok : learned) params.push_back(&work.concepts().token(tok));
  auto opt = nn::make_adam(cfg.lr);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = draw_batch(pool, cfg.batch, rng);
    Graph g;
    auto loss = ddpm_loss(g, work, batch, schedule, 0.0, rng);
    result.loss_history.push_back(loss.value()[0]);
    std::vector<const Tensor*> cp(params.begin(), params.end());
    auto grads = nn::grad(g, loss, cp);
    nn::optimizer_step(opt, params, grads);
  }
  result.table = work.concepts();
  return result;
}

double conditional_loss(const DenoiserModel& model, const NoiseSchedule& schedule,
                        std::span<const LabeledSample> train, const ClassTokens& tokens,
                        PromptPolicy policy, std::uint64_t seed) {
  const Pool pool = make_pool(model.concepts(), train, tokens, policy, nullptr);
  if (pool.images.empty()) throw ParameterError("conditional_loss: empty training set");
  Rng rng(derive_seed(seed, "conditional_loss"));
  // Several noise draws per image keep the estimate stable for small sets.
  constexpr int kDraws = 8;
  std::vector<TrainExample> batch;
  std::vector<int> t;
  const std::size_t d = model.arch().image_dim;
  Tensor eps({pool.images.size() * kDraws * d});
  for (int r = 0; r < kDraws; ++r) {
    for (std::size_t i = 0; i < pool.images.size(); ++i) {
      batch.push_back({&pool.images[i], pool.prompts[i]});
      t.push_back(1 + static_cast<int>(rng.index(static_cast<std::size_t>(schedule.steps))));
    }
  }
  rng.fill_normal(eps.storage());
  Graph g(false);
  return ddpm_loss_at(g, model_network(model, schedule), batch, t, eps, schedule).value()[0];
}

LoraResult dreambooth_lora(const DenoiserModel& model, const NoiseSchedule& schedule,
                           std::span<const LabeledSample> train, const ClassTokens& tokens,
                           const FinetuneConfig& cfg) {
  validate(cfg);
  if (cfg.phase != FinetunePhase::lora) throw ParameterError("dreambooth_lora requires the lora phase");
  if (train.empty()) throw ParameterError("dreambooth_lora: empty training set");
  for (const auto& s : train) {
    const auto& tok = tokens.at(static_cast<std::size_t>(s.fine));
    if (!model.concepts().has_token(tok)) {
      throw ParameterError("concept table lacks token '" + tok + "'; run the concept phase first");
    }
  }
  Rng rng(derive_seed(cfg.seed, "dreambooth_lora"));
  DenoiserModel work = model;
  work.detach_adapters();
  for (const auto& name : cfg.lora_layers) {
    const auto& l = work.layer(name);
    if (cfg.lora_rank > std::min(l.in_features(), l.out_features())) {
      throw ParameterError("lora rank " + std::to_string(cfg.lora_rank) + " exceeds the dims of '" +
                           name + "' (" + std::to_string(l.out_features()) + "x" +
                           std::to_string(l.in_features()) + ")");
    }
  }
  work.attach_adapters(make_adapters(work, cfg.lora_layers, cfg.lora_rank, cfg.lora_alpha, rng));

  LoraResult result;
  const std::uint64_t eval_seed = derive_seed(cfg.seed, "lora_eval");
  result.loss_before = conditional_loss(work, schedule, train, tokens, cfg.prompt_policy, eval_seed);
  const Pool pool = make_pool(work.concepts(), train, tokens, cfg.prompt_policy, nullptr);
  auto params = work.adapter_parameters();
  auto opt = nn::make_adam(cfg.lr);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = draw_batch(pool, cfg.batch, rng);
    Graph g;
    auto loss = ddpm_loss(g, work, batch, schedule, 0.0, rng);
    result.loss_history.push_back(loss.value()[0]);
    std::vector<const Tensor*> cp(params.begin(), params.end());
    auto grads = nn::grad(g, loss, cp);
    nn::optimizer_step(opt, params, grads);
  }
  result.loss_after = conditional_loss(work, schedule, train, tokens, cfg.prompt_policy, eval_seed);
  result.adapters = work.adapters();
  return result;
}

std::vector<double> train_backbone(DenoiserModel& model, const NoiseSchedule& schedule,
                                   std::span<const BackboneExample> examples,
                                   const BackboneConfig& cfg) {
  if (examples.empty()) throw ParameterError("train_backbone: no examples");
  if (cfg.batch < 1 || cfg.steps < 0) throw ParameterError("train_backbone: bad batch/steps");
  std::vector<Tensor*> params;
  for (auto& [name, p] : model.trunk_parameters()) params.push_back(p);
  params.push_back(&model.null_embed());
  std::set<std::string> toks, sufs;
  for (const auto& e : examples) {
    if (!e.prompt.token.empty()) toks.insert(e.prompt.token);
    if (!e.prompt.suffix.empty()) sufs.insert(e.prompt.suffix);
  }
  for (const auto& t : toks) params.push_back(&model.concepts().token(t));
  for (const auto& s : sufs) params.push_back(&model.concepts().suffix(s));

  Rng rng(derive_seed(cfg.seed, "backbone"));
  auto opt = nn::make_adam(cfg.lr);
  std::vector<double> history;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<TrainExample> batch;
    for (int i = 0; i < cfg.batch; ++i) {
      const auto& e = examples[rng.index(examples.size())];
      batch.push_back({&e.x0, e.prompt});
    }
    Graph g;
    auto loss = ddpm_loss(g, model, batch, schedule, cfg.cond_dropout, rng);
    history.push_back(loss.value()[0]);
    std::vector<const Tensor*> cp(params.begin(), params.end());
    auto grads = nn::grad(g, loss, cp);
    nn::optimizer_step(opt, params, grads);
  }
  return history;
}

}  // namespace unidiff
