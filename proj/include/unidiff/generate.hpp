#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "unidiff/autodiff.hpp"
#include "unidiff/classify.hpp"
#include "unidiff/data.hpp"
#include "unidiff/diffusion.hpp"
#include "unidiff/finetune.hpp"

namespace unidiff {

enum class Strategy { sdedit, interclass_mix, invert_interpolate, stylemix_composite,
                      latent_optimized_sdedit };
enum class SuffixPolicy { none, pool, dream, exchange };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);
std::string to_string(SuffixPolicy p);
SuffixPolicy suffix_policy_from_string(const std::string& s);

struct MaskChoice {
  bool vertical = true;        // split into left/right halves (else top/bottom)
  bool original_first = true;  // original occupies the left (or top) half
};

struct GenerationSpec {
  Strategy strategy = Strategy::sdedit;
  double strength = 0.9;
  int ratio = 5;  // synthetic variants per real sample
  SuffixPolicy suffix_policy = SuffixPolicy::none;
  SamplerConfig sampler;
  std::uint64_t seed = 0;

  // invert_interpolate
  double two_stage_r = 0.0;
  std::optional<double> lambda;  // fixed slerp weight; otherwise U[lambda_lo, lambda_hi]
  double lambda_lo = 0.3;
  double lambda_hi = 0.7;

  // stylemix_composite
  double style_strength = 0.5;
  double fractal_gamma = 0.2;
  std::optional<MaskChoice> mask;

  // latent_optimized_sdedit
  int opt_steps = 5;
  double w_info = 1.0;
  double w_div = 0.0;
  double opt_lr = 0.05;
};

void validate(const GenerationSpec& spec);

// What generation runs against. `model` is optional for strategies that only
// need noise predictions (an analytic predictor can stand in); it is required
// for latent optimization, which differentiates through the network.
struct GenerationContext {
  const NoisePredictor* predictor = nullptr;
  const DenoiserModel* model = nullptr;
  const NoiseSchedule* schedule = nullptr;
  const Hierarchy* hierarchy = nullptr;
  ClassTokens tokens;
  std::vector<std::string> pool_suffixes;                      // "pool" policy vocabulary
  std::vector<std::string> dream_suffixes;                     // never used as annotations
  std::vector<std::pair<std::string, std::string>> observed;  // (sample id, annotation)
};

// Fills the suffix vocabularies from the built-in lists and the training set.
void set_default_vocabulary(GenerationContext& ctx, std::span<const LabeledSample> train);

// Differentiable log p(label | x) for a single model-space row [1 x D].
class DifferentiableScorer {
 public:
  virtual ~DifferentiableScorer() = default;
  virtual nn::Var log_prob(nn::Graph& g, nn::Var x, int label) const = 0;
};

class ClassifierScorer final : public DifferentiableScorer {
 public:
  explicit ClassifierScorer(const Classifier& model) : model_(model) {}
  nn::Var log_prob(nn::Graph& g, nn::Var x, int label) const override;

 private:
  const Classifier& model_;
};

LabeledSample sdedit_generate(const GenerationContext& ctx, const LabeledSample& sample,
                              const GenerationSpec& spec, std::uint64_t seed);

LabeledSample latent_optimized_sdedit(const GenerationContext& ctx, const LabeledSample& sample,
                                      const GenerationSpec& spec,
                                      const DifferentiableScorer& scorer, std::uint64_t seed);

LabeledSample interclass_mix(const GenerationContext& ctx, const LabeledSample& sample,
                             int target_class, const GenerationSpec& spec, std::uint64_t seed);

LabeledSample invert_interpolate(const GenerationContext& ctx, const LabeledSample& a,
                                 const LabeledSample& b, const GenerationSpec& spec,
                                 std::uint64_t seed);

// Style edit of a storage-space image; the default is an SDEdit pass with the
// style suffix appended to the class prompt.
using StyleTransform = std::function<nn::Tensor(const LabeledSample&, const std::string& style)>;

LabeledSample stylemix_composite(const GenerationContext& ctx, const LabeledSample& sample,
                                 const std::string& style, const GenerationSpec& spec,
                                 std::uint64_t seed, const StyleTransform& transform = {});

// Midpoint-displacement texture in [0, 1] with the given [H x W x C] shape.
nn::Tensor fractal_texture(const nn::Shape& shape, Rng& rng, double roughness = 0.55);

struct AugmentResult {
  std::vector<LabeledSample> synthetic;
  double seconds = 0.0;
  int fallbacks = 0;
};

std::uint64_t variant_seed(std::uint64_t master, const std::string& sample_id, int variant);

// One synthetic variant j of real sample i (partner choice included).
LabeledSample generate_variant(const GenerationContext& ctx, std::span<const LabeledSample> real,
                               std::size_t i, int j, const GenerationSpec& spec,
                               const DifferentiableScorer* scorer = nullptr);

// M variants per real training sample, in (sample, variant) order.
AugmentResult augment_dataset(const GenerationContext& ctx, std::span<const LabeledSample> real,
                              const GenerationSpec& spec,
                              const DifferentiableScorer* scorer = nullptr, bool parallel = true);

}  // namespace unidiff
