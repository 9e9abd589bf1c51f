#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unidiff/data.hpp"
#include "unidiff/denoiser.hpp"
#include "unidiff/schedule.hpp"

namespace unidiff {

enum class FinetunePhase { concept_only, lora };
enum class PromptPolicy { plain, suffix_enriched };

struct FinetuneConfig {
  FinetunePhase phase = FinetunePhase::concept_only;
  double lr = 5e-4;
  int batch = 16;
  int steps = 200;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  std::vector<std::string> lora_layers{"hidden0", "hidden1"};
  std::uint64_t seed = 0;
  PromptPolicy prompt_policy = PromptPolicy::plain;
};

void validate(const FinetuneConfig& cfg);

// Token used for each fine class, indexed by label.
using ClassTokens = std::vector<std::string>;

// Prompt paired with a training image: the class token, plus the image's
// annotated suffix under suffix_enriched when the table knows that suffix.
Prompt training_prompt(const ConceptTable& table, const ClassTokens& tokens,
                       const LabeledSample& sample, PromptPolicy policy);

struct ConceptResult {
  ConceptTable table;
  std::vector<double> loss_history;
};

// Learns the embeddings of the tokens of `classes` with everything else
// frozen. Tokens missing from the table start from a small random vector.
ConceptResult textual_inversion(const DenoiserModel& model, const NoiseSchedule& schedule,
                                std::span<const LabeledSample> train, const ClassTokens& tokens,
                                std::span<const int> classes, const FinetuneConfig& cfg);

struct LoraResult {
  nn::AdapterSet adapters;
  std::vector<double> loss_history;
  double loss_before = 0.0;  // conditional loss on a fixed evaluation draw
  double loss_after = 0.0;
};

// Trains low-rank adapters on cfg.lora_layers; trunk and concept table stay fixed.
LoraResult dreambooth_lora(const DenoiserModel& model, const NoiseSchedule& schedule,
                           std::span<const LabeledSample> train, const ClassTokens& tokens,
                           const FinetuneConfig& cfg);

// Mean conditional denoising loss over `train` with steps and noise drawn from `seed`.
double conditional_loss(const DenoiserModel& model, const NoiseSchedule& schedule,
                        std::span<const LabeledSample> train, const ClassTokens& tokens,
                        PromptPolicy policy, std::uint64_t seed);

struct BackboneConfig {
  int steps = 3000;
  int batch = 32;
  double lr = 1e-3;
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
};

struct BackboneExample {
  nn::Tensor x0;  // flattened model-space image
  Prompt prompt;
};

// Trains trunk, null embedding and every table entry used by the examples.
std::vector<double> train_backbone(DenoiserModel& model, const NoiseSchedule& schedule,
                                   std::span<const BackboneExample> examples,
                                   const BackboneConfig& cfg);

}  // namespace unidiff
